"""Desk-scale experiment pipelines shared by the CLI, the scripts and the
acceptance tests.

Every function takes an ``ExperimentConfig`` (or pieces of one) and derives
all randomness from the configured seed through fixed ``Rng`` key paths, so
results are a pure function of (config, seed).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import attacks as atk
from . import data as dt
from . import theory
from .config import AttackSpec, ExperimentConfig
from .constraints import ProjectionConfig, projected_updater
from .model import Deterministic, Stochastic, WcaNet, create, linear_feature_map, margins_from_logits
from .numerics import Rng, sym_eig
from .objective import ObjectiveConfig, TrainConfig, sgd_step, train

# Rng key paths (first element) for the independent streams of a run.
K_DATA, K_INIT, K_ATTACK, K_EVAL, K_AUG = 10, 11, 12, 13, 14


class ExperimentError(ValueError):
    """A pipeline was asked to run on an incompatible model or dataset."""


# --------------------------------------------------------------------------
# Data


@dataclass
class Bundle:
    train: dt.LabeledDataset
    test: dt.LabeledDataset
    pca: dt.PcaModel | None = None
    image_shape: tuple[int, ...] | None = None

    @property
    def box(self) -> tuple[float, float]:
        return self.train.box

    @property
    def n_classes(self) -> int:
        labels = self.train.labels
        return 2 if set(np.unique(labels)) <= {-1, 1} else int(labels.max()) + 1


def _shuffle(ds: dt.LabeledDataset, key: int) -> dt.LabeledDataset:
    order = Rng(0, (K_DATA, key)).permutation(len(ds))
    return ds.subset(order, "shuffle")


def load_data(cfg: ExperimentConfig) -> Bundle:
    """Training and test sets for ``cfg.dataset``.

    MNIST files are sorted by class, so both splits are shuffled with a fixed
    stream before the test subset of ``n_test`` rows is cut. Blobs depend on
    the training seed.
    """
    spec = cfg.dataset
    if spec.kind == "blobs":
        means = np.asarray(spec.means, dtype=np.float64)
        cov = spec.std ** 2 * np.eye(means.shape[1])
        rng = Rng(cfg.seed, (K_DATA,))
        tr = dt.make_blobs(rng.spawn(0), spec.n_per_class, means, cov, box=spec.box, name="blobs-train")
        n_test_pc = max(1, spec.n_test // means.shape[0])
        te = dt.make_blobs(rng.spawn(1), n_test_pc, means, cov, box=spec.box, name="blobs-test")
        if is_binary(cfg):
            if means.shape[0] != 2:
                raise ExperimentError("the hinge loss needs exactly two blobs")
            tr, te = dt.filter_binary(tr, 0, 1), dt.filter_binary(te, 0, 1)
        return Bundle(tr, te)
    root = dt.data_root(cfg.data)
    tr = dt.load_mnist(root, "train")
    te = dt.load_mnist(root, "test")
    if spec.kind == "mnist01":
        tr = dt.filter_binary(tr, *spec.classes)
        te = dt.filter_binary(te, *spec.classes)
    tr = _shuffle(tr, 0)
    te = _shuffle(te, 1)
    te = te.subset(np.arange(min(spec.n_test, len(te))))
    pca = dt.pca_fit(tr.features, spec.pca_dim)
    return Bundle(tr, te, pca, (28, 28))


# --------------------------------------------------------------------------
# Models and training


def is_binary(cfg: ExperimentConfig) -> bool:
    return cfg.objective.loss == "hinge"


def build_model(cfg: ExperimentConfig, bundle: Bundle, seed: int | None = None) -> WcaNet:
    """Fresh model for the configured data.

    MNIST inputs go through a frozen PCA projection when there are no hidden
    layers (the linear study); otherwise a relu MLP is trained end to end.
    """
    seed = cfg.seed if seed is None else seed
    rng = Rng(seed, (K_INIT,))
    m = cfg.model
    D = bundle.train.features.shape[1]
    binary = is_binary(cfg)
    if binary and bundle.n_classes != 2:
        raise ExperimentError("the hinge loss needs a binary dataset")
    if bundle.pca is not None and not m.hidden:
        pca = bundle.pca
        model = create(rng, pca.k, bundle.n_classes, d=pca.k, noise=m.noise, l_init=m.l_init, binary=binary)
        model.extractor = linear_feature_map(pca.components, -pca.components @ pca.mean)
        model.freeze_extractor = True
        return model
    return create(rng, D, bundle.n_classes, hidden=m.hidden, d=m.d, noise=m.noise, l_init=m.l_init, binary=binary)


def objective_config(cfg: ExperimentConfig) -> ObjectiveConfig:
    o = cfg.objective
    return ObjectiveConfig(loss=o.loss, lam=o.lam if o.regularizer == "penalty" else 0.0,
                           wca=o.wca and cfg.model.noise != "none", wca_weight=o.wca_weight,
                           penalize_bias=o.penalize_bias)


def updater(cfg: ExperimentConfig):
    o = cfg.objective
    if o.regularizer == "constraint":
        return projected_updater(ProjectionConfig(o.gamma, o.tau))
    return sgd_step


def fit(cfg: ExperimentConfig, bundle: Bundle, seed: int | None = None, X=None, y=None,
        model: WcaNet | None = None, augment=None) -> tuple[WcaNet, list[dict]]:
    seed = cfg.seed if seed is None else seed
    X = bundle.train.features if X is None else X
    y = bundle.train.labels if y is None else y
    model = build_model(cfg, bundle, seed) if model is None else model
    t = cfg.training
    tc = TrainConfig(lr=t.lr, epochs=t.epochs, batch_size=t.batch_size, seed=seed)
    return train(model, X, y, objective_config(cfg), tc, update=updater(cfg), augment=augment)


def stochastic_accuracy(model: WcaNet, X, y, rng: Rng, n_draws: int, n_avg: int = 1) -> float:
    """Accuracy of the noisy model averaged over ``n_draws`` noise draws.

    Each prediction averages ``n_avg`` logit samples (1 is the usual
    single-sample prediction).
    """
    y = np.asarray(y)
    if model.noise == "none" or not np.any(model.L):
        return float(np.mean(model.predict(X) == y))
    hits = 0.0
    for _ in range(n_draws):
        hits += np.mean(model.predict(X, Stochastic(n_avg), rng) == y)
    return float(hits / n_draws)


@dataclass
class GridResult:
    lr: float
    lam: float
    rows: list[dict] = field(default_factory=list)  # lr, lam, val_accuracy


def grid_search(cfg: ExperimentConfig, bundle: Bundle, seed: int | None = None) -> GridResult:
    """lr x lam over ``training.grid_values`` on a 90/10 index split.

    Selection by validation accuracy; ties keep the earliest grid point.
    """
    seed = cfg.seed if seed is None else seed
    tr, val = dt.split_by_index(bundle.train, 1.0 - cfg.training.val_fraction)
    sub = Bundle(tr, val, bundle.pca, bundle.image_shape)
    best = None
    rows = []
    for lr in cfg.training.grid_values:
        for lam in cfg.training.grid_values:
            c = cfg.replace(training={"lr": lr}, objective={"lam": lam})
            try:
                model, _ = fit(c, sub, seed)
                acc = stochastic_accuracy(model, val.features, val.labels, Rng(seed, (K_EVAL, 99)), 10)
            except FloatingPointError:
                acc = float("nan")
            rows.append({"lr": lr, "lam": lam, "val_accuracy": acc})
            if not math.isnan(acc) and (best is None or acc > best[2]):
                best = (lr, lam, acc)
    if best is None:
        raise ExperimentError("every grid point diverged")
    return GridResult(best[0], best[1], rows)


def resolve(cfg: ExperimentConfig, bundle: Bundle, seed: int | None = None) -> tuple[ExperimentConfig, GridResult | None]:
    """Config with (lr, lam) picked by the grid when ``training.grid`` is on."""
    if not cfg.training.grid:
        return cfg, None
    g = grid_search(cfg, bundle, seed)
    return cfg.replace(training={"lr": g.lr, "grid": False}, objective={"lam": g.lam}), g


# --------------------------------------------------------------------------
# Attacks


def attack_config(spec: AttackSpec, eps: float, box) -> atk.AttackConfig:
    return atk.AttackConfig(eps=eps, norm=spec.norm, steps=spec.steps, alpha=spec.alpha,
                            restarts=spec.restarts, eot_samples=spec.eot_samples, box=tuple(box), loss=spec.loss)


def run_attack(model: WcaNet, X, y, spec: AttackSpec, eps: float, rng: Rng, box,
               image_shape=None) -> atk.AttackResult:
    """Dispatch one attack by name at budget ``eps``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y)
    if X.shape[1] != model.input_dim:
        raise ExperimentError(f"model takes {model.input_dim} inputs, data has {X.shape[1]}")
    if eps == 0 and spec.name not in ("one_pixel", "cw"):
        m = atk.eot_margins(model, X, y, spec.eot_samples, rng)
        return atk.AttackResult(X.copy(), m < 0, m, np.zeros(len(y), dtype=np.int64), m)
    cfg = attack_config(spec, eps, box)
    if spec.name == "fgsm":
        return atk.fgsm(model, X, y, cfg, rng)
    if spec.name == "pgd":
        return atk.pgd(model, X, y, cfg, rng)
    if spec.name == "cw":
        res = atk.cw(model, X, y, replace(cfg, norm="2"), rng, iters=200)
        # keep only perturbations inside the l2 budget
        too_far = atk.perturbation_norm(X, res.x_adv, "2") > eps + 1e-12
        res.x_adv[too_far] = X[too_far]
        res.success &= ~too_far
        return res
    query = atk.make_query(model, rng, 1)
    if spec.name == "one_pixel":
        return atk.one_pixel(query, X, y, rng, n_pixels=max(1, int(round(eps))), box=tuple(box))
    if spec.name == "square":
        return atk.square_attack(query, X, y, eps, rng, budget=spec.steps * spec.restarts,
                                 image_shape=image_shape or _square_shape(X.shape[1]), box=tuple(box))
    return atk.random_search(query, X, y, eps, rng, budget=spec.steps * spec.restarts, norm=spec.norm,
                             box=tuple(box))


def _square_shape(D: int):
    side = int(round(math.sqrt(D)))
    return (side, side) if side * side == D else (1, D)


def attacked_accuracy(model: WcaNet, X, y, spec: AttackSpec, eps: float, seed: int, box, n_draws: int,
                      image_shape=None, n_avg: int = 1, tag: int = 0) -> tuple[float, atk.AttackResult]:
    """Noisy-model accuracy on the adversarial inputs.

    The attack and the evaluation draws use streams that do not depend on
    ``eps`` (common random numbers), which keeps accuracy curves monotone
    for attacks that are monotone in the budget.
    """
    res = run_attack(model, X, y, spec, eps, Rng(seed, (K_ATTACK, tag)), box, image_shape)
    acc = stochastic_accuracy(model, res.x_adv, y, Rng(seed, (K_EVAL, tag)), n_draws, n_avg)
    return acc, res


def attack_table(cfg: ExperimentConfig, model: WcaNet, bundle: Bundle, seed: int | None = None) -> list[dict]:
    """Per-attack, per-eps accuracy rows (eps = 0 is the clean row)."""
    seed = cfg.seed if seed is None else seed
    X, y = bundle.test.features, bundle.test.labels
    rows = []
    for a_i, spec in enumerate(cfg.attacks):
        budgets = (0.0, *[e for e in spec.budgets if e > 0])
        for eps in budgets:
            acc, res = attacked_accuracy(model, X, y, spec, eps, seed, bundle.box, cfg.eval_draws,
                                         bundle.image_shape, tag=a_i)
            rows.append({"attack": spec.name, "eps": eps, "accuracy": acc,
                         "success_rate": res.success_rate, "mean_margin": float(np.mean(res.margin))})
    return rows


# --------------------------------------------------------------------------
# Bound study


def linear_weights(model: WcaNet) -> tuple[np.ndarray, np.ndarray]:
    """(input-space weights, feature-space weights) of a single-output linear model."""
    if not model.binary:
        raise ExperimentError("the bound study needs a single-output head")
    if len(model.extractor) > 1:
        raise ExperimentError("the bound study needs a linear model (at most one affine extractor layer)")
    w = model.W[0]
    w_in = model.extractor[0].weight.T @ w if model.extractor else w
    return w_in, w


def bound_report(cfg: ExperimentConfig, model: WcaNet, bundle: Bundle, label: str,
                 seed: int | None = None) -> theory.BoundReport:
    """Theory columns plus PGD accuracy for each budget of the first attack."""
    seed = cfg.seed if seed is None else seed
    if bundle.n_classes != 2 or not model.binary:
        raise ExperimentError("the bound study needs a binary dataset and a single-output head")
    w_in, w = linear_weights(model)
    X, y = bundle.test.features, bundle.test.labels
    F = model.features(X)
    spec = cfg.attacks[0]
    clean_acc = stochastic_accuracy(model, X, y, Rng(seed, (K_EVAL, 0)), cfg.eval_draws)
    report = theory.BoundReport(label)
    for eps in spec.budgets:
        acc, _ = attacked_accuracy(model, X, y, spec, eps, seed, bundle.box, cfg.eval_draws)
        report.rows.append(theory.bound_row(eps, w_in, w, model.b[0], model.L, F, y, clean_acc, acc))
    return report


NOISE_PAIR = ("isotropic", "anisotropic")


def bound_experiment(cfg: ExperimentConfig, bundle: Bundle | None = None,
                     progress: Callable[[str], None] | None = None) -> dict[str, list[theory.BoundReport]]:
    """Train and evaluate both noise variants for ``cfg.seeds`` seeds each.

    Returns ``{noise: [report per seed]}``. With ``training.grid`` on,
    (lr, lam) are chosen per variant and seed on the validation split.
    """
    bundle = bundle or load_data(cfg)
    out: dict[str, list[theory.BoundReport]] = {}
    for noise in NOISE_PAIR:
        out[noise] = []
        for s in range(cfg.seeds):
            seed = cfg.seed + s
            c = cfg.replace(model={"noise": noise})
            c, _ = resolve(c, bundle, seed)
            model, _ = fit(c, bundle, seed)
            rep = bound_report(c, model, bundle, f"{noise}/seed{seed}", seed)
            out[noise].append(rep)
            if progress:
                progress(f"{noise} seed {seed}: lr={c.training.lr:g} lam={c.objective.lam:g} "
                         f"violations={len(rep.violations)}")
    return out


def median_curve(reports: list[theory.BoundReport], attr: str = "empirical_attacked_acc") -> np.ndarray:
    return np.median(np.array([[getattr(r, attr) for r in rep.rows] for rep in reports]), axis=0)


# --------------------------------------------------------------------------
# Robustness comparison on any dataset


def robustness_curves(cfg: ExperimentConfig, bundle: Bundle | None = None,
                      variants=NOISE_PAIR) -> dict[str, np.ndarray]:
    """Attacked accuracy per (variant, seed, eps) for the first attack.

    Returns ``{variant: array(seeds, len(budgets))}``; the clean accuracy is
    not included (see ``attack_table``).
    """
    bundle = bundle or load_data(cfg)
    spec = cfg.attacks[0]
    out = {}
    for noise in variants:
        curves = []
        for s in range(cfg.seeds):
            seed = cfg.seed + s
            b = load_data(cfg.replace(training={"seed": seed})) if cfg.dataset.kind == "blobs" else bundle
            c = cfg.replace(model={"noise": noise})
            c, _ = resolve(c, b, seed)
            model, _ = fit(c, b, seed)
            curves.append([attacked_accuracy(model, b.test.features, b.test.labels, spec, eps, seed, b.box,
                                             cfg.eval_draws, b.image_shape)[0] for eps in spec.budgets])
        out[noise] = np.array(curves)
    return out


def clean_accuracies(cfg: ExperimentConfig, bundle: Bundle | None = None,
                     variants=("none", "anisotropic")) -> dict[str, np.ndarray]:
    """Clean test accuracy per variant and seed (noisy models use noise draws)."""
    bundle = bundle or load_data(cfg)
    out = {}
    for noise in variants:
        accs = []
        for s in range(cfg.seeds):
            seed = cfg.seed + s
            b = load_data(cfg.replace(training={"seed": seed})) if cfg.dataset.kind == "blobs" else bundle
            c = cfg.replace(model={"noise": noise})
            c, _ = resolve(c, b, seed)
            model, _ = fit(c, b, seed)
            accs.append(stochastic_accuracy(model, b.test.features, b.test.labels,
                                            Rng(seed, (K_EVAL, 0)), cfg.eval_draws))
        out[noise] = np.array(accs)
    return out


# --------------------------------------------------------------------------
# Gradient-obfuscation checklist


@dataclass
class CheckItem:
    number: int
    name: str
    passed: bool
    detail: str


def correct_rate(model: WcaNet, X, y, rng: Rng, n_draws: int, n_avg: int = 1) -> np.ndarray:
    """Per-example fraction of noise draws that classify correctly."""
    y = np.asarray(y)
    if model.noise == "none" or not np.any(model.L):
        return (model.predict(X) == y).astype(np.float64)
    hits = np.zeros(len(y))
    for _ in range(n_draws):
        hits += model.predict(X, Stochastic(n_avg), rng) == y
    return hits / n_draws


def checklist(cfg: ExperimentConfig, model: WcaNet, bundle: Bundle, seed: int | None = None,
              n_examples: int = 200) -> list[CheckItem]:
    """Five refutation tests for gradient obfuscation.

    1. iterative PGD hurts accuracy at least as much as one-step FGSM
    2. the black-box one-pixel attack hurts no more than PGD
    3. unbounded PGD (eps spanning the whole box, 20 steps) leaves 0% accuracy
    4. 1000 random in-ball samples find few adversarials that PGD missed
    5. accuracy under PGD does not increase with eps

    Every adversarial input is scored the same way: per example, the
    fraction of ``eval_draws`` shared noise draws classifying it correctly.
    An example counts as adversarial when that fraction is below 1/2.
    Black-box attacks query logits averaged over ``eot_samples`` draws.
    """
    seed = cfg.seed if seed is None else seed
    X = bundle.test.features[:n_examples]
    y = bundle.test.labels[:n_examples]
    box = bundle.box
    base = cfg.attacks[0]
    eps = _middle_budget(base)
    pgd = replace(base, name="pgd")
    fgsm = replace(base, name="fgsm")

    def score(X_adv):
        return correct_rate(model, X_adv, y, Rng(seed, (K_EVAL, 0)), cfg.eval_draws)

    def query(key):
        return atk.make_query(model, Rng(seed, (K_ATTACK, key)), base.eot_samples)

    items = []
    p_pgd = score(run_attack(model, X, y, pgd, eps, Rng(seed, (K_ATTACK, 1)), box).x_adv)
    p_fgsm = score(run_attack(model, X, y, fgsm, eps, Rng(seed, (K_ATTACK, 2)), box).x_adv)
    items.append(CheckItem(1, "iterative >= one-step", p_pgd.mean() <= p_fgsm.mean(),
                           f"eps={eps:.4g} pgd_accuracy={p_pgd.mean():.4f} fgsm_accuracy={p_fgsm.mean():.4f}"))

    n_bb = min(50, len(y))
    r_op = atk.one_pixel(query(3), X[:n_bb], y[:n_bb], Rng(seed, (K_ATTACK, 4)), box=tuple(box))
    p_op = correct_rate(model, r_op.x_adv, y[:n_bb], Rng(seed, (K_EVAL, 0)), cfg.eval_draws)
    items.append(CheckItem(2, "black-box <= white-box", p_op.mean() >= p_pgd[:n_bb].mean(),
                           f"one_pixel_accuracy={p_op.mean():.4f} pgd_accuracy={p_pgd[:n_bb].mean():.4f} n={n_bb}"))

    span = float(box[1] - box[0])
    unbounded = replace(pgd, steps=20, restarts=1, alpha=None)
    p_unb = score(run_attack(model, X, y, unbounded, span, Rng(seed, (K_ATTACK, 5)), box).x_adv)
    items.append(CheckItem(3, "unbounded attack reaches 0% accuracy", float(p_unb.mean()) == 0.0,
                           f"eps={span:g} steps=20 accuracy={p_unb.mean():.4f}"))

    r_rand = atk.random_search(query(6), X, y, eps, Rng(seed, (K_ATTACK, 7)), budget=1000, norm=base.norm,
                               box=tuple(box))
    p_rand = score(r_rand.x_adv)
    extra = int(np.sum((p_rand < 0.5) & (p_pgd >= 0.5)))
    items.append(CheckItem(4, "random sampling finds few extra adversarials", extra <= max(1, len(y) // 100),
                           f"eps={eps:.4g} random_accuracy={p_rand.mean():.4f} extra_over_pgd={extra}"))

    accs = []
    for e in sorted(set(base.budgets) | {eps}):
        accs.append((e, float(score(run_attack(model, X, y, pgd, e, Rng(seed, (K_ATTACK, 1)), box).x_adv).mean())))
    mono = all(b[1] <= a[1] for a, b in zip(accs, accs[1:]))
    items.append(CheckItem(5, "attacks get stronger with eps", mono,
                           " ".join(f"{e:.4g}:{a:.4f}" for e, a in accs)))
    return items


def _middle_budget(spec: AttackSpec) -> float:
    b = sorted(e for e in spec.budgets if e > 0)
    return b[len(b) // 2] if b else 0.1


def format_checklist(items: list[CheckItem]) -> str:
    return "".join(f"criterion {it.number} [{'PASS' if it.passed else 'FAIL'}] {it.name}: {it.detail}\n"
                   for it in items)


# --------------------------------------------------------------------------
# Covariance contours


@dataclass
class Contours:
    eigenvalues: np.ndarray
    eigenvectors: np.ndarray  # columns
    weights: np.ndarray  # (C, 2)
    ellipses: dict[float, np.ndarray]  # level -> (n_points, 2)
    alignment: float  # nan when undefined
    isotropic: bool


def alignment_score(W: np.ndarray, sigma: np.ndarray) -> float:
    """max_i cos^2 between w_i and the top eigenvector of ``sigma``."""
    _, vecs = sym_eig(sigma)
    v = vecs[:, 0]
    norms = np.linalg.norm(W, axis=1)
    cos = (W @ v) / np.maximum(norms, 1e-300)
    return float(np.max(cos ** 2))


def contours(model: WcaNet, levels=(1.0, 2.0), n_points: int = 64, iso_tol: float = 1e-9) -> Contours:
    """Noise ellipses ``{sqrt(lam_j) cos/sin(t) v_j}`` and the head weights."""
    if model.d != 2:
        raise ExperimentError(f"contours need a 2-dimensional bottleneck, model has d={model.d}")
    vals, vecs = sym_eig(model.sigma)
    vals = np.clip(vals, 0.0, None)
    t = np.linspace(0.0, 2.0 * np.pi, n_points, endpoint=False)
    unit = np.stack([np.cos(t), np.sin(t)], axis=1) * np.sqrt(vals)
    ellipses = {float(k): k * unit @ vecs.T for k in levels}
    iso = model.noise == "isotropic" or abs(vals[0] - vals[1]) <= iso_tol * max(vals[0], 1e-300)
    score = float("nan") if iso else alignment_score(model.W, model.sigma)
    return Contours(vals, vecs, model.W.copy(), ellipses, score, iso)


# --------------------------------------------------------------------------
# Ablation


ABLATION_COLUMNS = ("variant", "clean", "fgsm", "pgd")


def _adversarial_augment(spec: AttackSpec, eps: float, box, mix: bool):
    """Replace (or extend) each batch with PGD examples against the current model."""
    a = atk.AttackConfig(eps=eps, norm=spec.norm, steps=5, restarts=1, eot_samples=4, box=tuple(box))

    def augment(model, Xb, yb, rng):
        adv = atk.pgd(model, Xb, yb, a, rng).x_adv
        if mix:
            return np.concatenate([Xb, adv]), np.concatenate([yb, yb])
        return adv, yb

    return augment


def ablation(cfg: ExperimentConfig, bundle: Bundle | None = None, eps: float | None = None,
             seed: int | None = None, progress: Callable[[str], None] | None = None) -> list[dict]:
    """Clean / FGSM / PGD accuracy for the control variants.

    Variants: undefended, anisotropic and isotropic WCA, the constraint
    regularizer, E1 (attack without EoT), E2 (10 averaged logit samples at
    test time), E3 (noise trained after the rest of the model is frozen),
    and adversarial training on pure or mixed batches.
    """
    seed = cfg.seed if seed is None else seed
    bundle = bundle or load_data(cfg)
    base = cfg.attacks[0]
    eps = _middle_budget(base) if eps is None else eps
    X, y, box = bundle.test.features, bundle.test.labels, bundle.box
    pgd = replace(base, name="pgd")
    fgsm = replace(base, name="fgsm")

    def evaluate(name, model, eot=None, n_avg=1):
        p = pgd if eot is None else replace(pgd, eot_samples=eot)
        f = fgsm if eot is None else replace(fgsm, eot_samples=eot)
        clean = stochastic_accuracy(model, X, y, Rng(seed, (K_EVAL, 0)), cfg.eval_draws, n_avg)
        a_f, _ = attacked_accuracy(model, X, y, f, eps, seed, box, cfg.eval_draws, n_avg=n_avg, tag=1)
        a_p, _ = attacked_accuracy(model, X, y, p, eps, seed, box, cfg.eval_draws, n_avg=n_avg, tag=2)
        row = {"variant": name, "clean": clean, "fgsm": a_f, "pgd": a_p}
        if progress:
            progress(f"{name}: clean={clean:.4f} fgsm={a_f:.4f} pgd={a_p:.4f}")
        return row

    rows = []
    aniso = cfg.replace(model={"noise": "anisotropic"}, objective={"regularizer": "penalty", "wca": True})
    m_none, _ = fit(cfg.replace(model={"noise": "none"}), bundle, seed)
    rows.append(evaluate("no_defense", m_none))
    m_aniso, _ = fit(aniso, bundle, seed)
    rows.append(evaluate("wca_anisotropic", m_aniso))
    m_iso, _ = fit(aniso.replace(model={"noise": "isotropic"}), bundle, seed)
    rows.append(evaluate("wca_isotropic", m_iso))
    m_con, _ = fit(aniso.replace(objective={"regularizer": "constraint"}), bundle, seed)
    rows.append(evaluate("constraint_regularizer", m_con))
    rows.append(evaluate("E1_no_eot", m_aniso, eot=1))
    rows.append(evaluate("E2_average_10_logits", m_aniso, n_avg=10))
    # E3: the undefended model, frozen, then only L trained with the WCA objective
    e3 = m_none.copy()
    e3.noise = "anisotropic"
    e3.L = np.eye(e3.d) * cfg.model.l_init
    e3.freeze_extractor = e3.freeze_head = True
    e3, _ = fit(aniso, bundle, seed, model=e3)
    rows.append(evaluate("E3_noise_trained_separately", e3))
    at_eps = eps
    m_at, _ = fit(aniso, bundle, seed, augment=_adversarial_augment(base, at_eps, box, mix=False))
    rows.append(evaluate("AT_adversarial_only", m_at))
    m_mix, _ = fit(aniso, bundle, seed, augment=_adversarial_augment(base, at_eps, box, mix=True))
    rows.append(evaluate("AT_clean_and_adversarial", m_mix))
    return rows


def robust_margin(model: WcaNet, X, y) -> np.ndarray:
    """Noise-free margins (used by the scripts for quick diagnostics)."""
    return margins_from_logits(model.logits(X, Deterministic()), y)
