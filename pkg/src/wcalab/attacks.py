"""White-box (FGSM, PGD, C&W) and black-box (one-pixel DE, square)
adversaries for ``WcaNet`` models.

White-box attacks average input gradients over ``eot_samples`` noise draws
at every query (expectation over transformation). Black-box attacks only
see a query function ``X -> logits``.

All attacks work on a batch ``X`` of shape (n, D) and return an
``AttackResult`` with per-example arrays.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import numerics as nm
from .model import Deterministic, Stochastic, WcaNet, forward_nodes, margins_from_logits
from .numerics import Rng, ShapeError, Tape

Query = Callable[[np.ndarray], np.ndarray]
NORMS = ("inf", "2", "0")
ATTACK_LOSSES = ("margin", "cross_entropy", "hinge")
REPORT_COLUMNS = ("example_id", "attack", "eps", "success", "margin_before", "margin_after", "queries")


@dataclass(frozen=True)
class AttackConfig:
    eps: float
    norm: str = "inf"
    steps: int = 10
    alpha: float | None = None  # None -> eps / 10
    restarts: int = 1
    eot_samples: int = 50
    box: tuple[float, float] = (0.0, 1.0)
    targeted: bool = False
    random_init: bool = True
    loss: str = "margin"

    def __post_init__(self):
        if self.eps < 0:
            raise ValueError("eps must be >= 0")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.steps < 1 or self.restarts < 1 or self.eot_samples < 1:
            raise ValueError("steps, restarts and eot_samples must be >= 1")
        if self.box[0] > self.box[1]:
            raise ValueError("box lower bound exceeds upper bound")
        if self.loss not in ATTACK_LOSSES:
            raise ValueError(f"loss must be one of {ATTACK_LOSSES}")

    @property
    def step_size(self) -> float:
        return self.eps / 10.0 if self.alpha is None else self.alpha


@dataclass
class AttackResult:
    x_adv: np.ndarray
    success: np.ndarray
    margin: np.ndarray
    queries: np.ndarray
    margin_before: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success)) if self.success.size else 0.0


# --------------------------------------------------------------------------
# Model access


def _mode(model: WcaNet, n: int):
    return Deterministic() if model.noise == "none" or not np.any(model.L) else Stochastic(n)


def eot_gradient(model: WcaNet, X, y, n: int, rng: Rng, loss: str = "cross_entropy",
                 exact_mc: bool = False) -> np.ndarray:
    """Input gradient of the per-example loss, averaged over ``n`` noise draws.

    ``loss="margin"`` differentiates the negated classification margin, so
    ascending it always pushes towards misclassification. For a
    single-output head that margin is affine in the noise and its expected
    gradient is returned exactly (the limit of infinitely many draws)
    unless ``exact_mc`` forces Monte-Carlo sampling.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y).reshape(-1)
    if loss == "margin" and model.binary and not exact_mc:
        # y*h is affine in the noise: the average over draws has a closed form
        n = 1
        model = _noise_free(model)
    grad, _ = _loss_and_grad(model, X, y, n, rng, loss)
    return grad


def _noise_free(model: WcaNet) -> WcaNet:
    twin = model.copy()
    twin.L = np.zeros_like(model.L)
    return twin


def _loss_and_grad(model, X, y, n, rng, loss):
    tape = Tape()
    params = {k: tape.const(v) for k, v in model.parameters().items()}
    xn = tape.var(X)
    mode = _mode(model, n)
    rows = X.shape[0]
    if isinstance(mode, Stochastic):
        # one logit row per (example, draw); gradients summed per example then / n
        h = xn
        for i in range(len(model.extractor)):
            h = nm.add(nm.matmul(h, nm.transpose(params[f"extractor.{i}.weight"])), params[f"extractor.{i}.bias"])
            if i < len(model.extractor) - 1:
                h = nm.relu(h)
        hn = nm.repeat_rows(h, n) if n > 1 else h
        U = rng.gaussian((rows * n, model.d))
        hn = nm.add(hn, nm.matmul(tape.const(U), nm.transpose(params["head.L"])))
        logits = nm.add(nm.matmul(hn, nm.transpose(params["head.W"])), params["head.b"])
        yy = np.repeat(y, n)
        weight = 1.0 / n
    else:
        logits = forward_nodes(model, tape, xn, params)
        yy = y
        weight = 1.0
    total_rows = logits.value.shape[0]
    if loss == "margin":
        obj = nm.scale(nm.sum(nm.logit_margin(logits, yy)), -weight)
    elif loss == "hinge":
        obj = nm.scale(nm.hinge(logits, yy), total_rows * weight)
    else:
        if logits.value.shape[1] == 1:
            # two-class logistic loss on [0, h] for a single-output head
            z = np.asarray(yy, dtype=np.float64)
            two = nm.matmul(logits, tape.const(np.array([[-0.5, 0.5]])))
            obj = nm.scale(nm.softmax_cross_entropy(two, (z > 0).astype(np.int64)), total_rows * weight)
        else:
            obj = nm.scale(nm.softmax_cross_entropy(logits, yy), total_rows * weight)
    tape.backward(obj)
    g = xn.grad if xn.grad is not None else np.zeros_like(X)
    return g, float(obj.value)


def eot_margins(model: WcaNet, X, y, n: int, rng: Rng) -> np.ndarray:
    """Margins of the logits averaged over ``n`` noise draws.

    Single-output heads use the exact expectation (the noise-free margin).
    """
    if model.binary:
        return margins_from_logits(model.logits(X), y)
    return margins_from_logits(model.logits(X, _mode(model, n), rng), y)


def make_query(model: WcaNet, rng: Rng, n_samples: int = 1) -> Query:
    """Black-box view of a model: inputs to (noise-averaged) logits."""
    mode = _mode(model, n_samples)

    def query(X):
        return model.logits(np.atleast_2d(X), mode, rng)

    return query


# --------------------------------------------------------------------------
# Projections


def _box_arrays(box, D):
    lo = np.broadcast_to(np.asarray(box[0], dtype=np.float64), (D,))
    hi = np.broadcast_to(np.asarray(box[1], dtype=np.float64), (D,))
    return lo, hi


def project(X0, X, cfg: AttackConfig) -> np.ndarray:
    """Project ``X`` into the eps-ball around ``X0`` and then into the box."""
    delta = X - X0
    if cfg.norm == "inf":
        delta = np.clip(delta, -cfg.eps, cfg.eps)
    elif cfg.norm == "2":
        norms = np.linalg.norm(delta, axis=1, keepdims=True)
        factor = np.where(norms > cfg.eps, cfg.eps / np.maximum(norms, 1e-300), 1.0)
        delta = delta * factor
    else:
        raise ValueError("gradient attacks support the inf and 2 norms")
    lo, hi = _box_arrays(cfg.box, X0.shape[1])
    return np.clip(X0 + delta, lo, hi)


def perturbation_norm(X0, X, norm: str) -> np.ndarray:
    d = X - X0
    if norm == "inf":
        return np.max(np.abs(d), axis=1) if d.size else np.zeros(0)
    if norm == "2":
        return np.linalg.norm(d, axis=1)
    return np.count_nonzero(d, axis=1).astype(np.float64)


def _random_start(X0, cfg: AttackConfig, rng: Rng) -> np.ndarray:
    n, D = X0.shape
    if cfg.norm == "inf":
        delta = rng.uniform((n, D), -cfg.eps, cfg.eps)
    else:
        g = rng.gaussian((n, D))
        g /= np.maximum(np.linalg.norm(g, axis=1, keepdims=True), 1e-300)
        delta = g * cfg.eps * rng.uniform((n, 1)) ** (1.0 / D)
    return project(X0, X0 + delta, cfg)


def _ascent_direction(g, norm):
    if norm == "inf":
        return np.sign(g)
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    return np.where(norms > 0, g / np.maximum(norms, 1e-300), 0.0)


# --------------------------------------------------------------------------
# Gradient attacks


def _gradient_run(model, X0, y, cfg: AttackConfig, rng: Rng, start, steps, alpha):
    X = start.copy()
    sign = -1.0 if cfg.targeted else 1.0
    for _ in range(steps):
        g = eot_gradient(model, X, y, cfg.eot_samples, rng, cfg.loss)
        X = project(X0, X + sign * alpha * _ascent_direction(g, cfg.norm), cfg)
    return X


def _finish(model, X0, X, y, cfg, rng, queries, before) -> AttackResult:
    m = eot_margins(model, X, y, cfg.eot_samples, rng)
    success = m > 0 if cfg.targeted else m < 0
    return AttackResult(X, success, m, np.full(X.shape[0], queries), before)


def fgsm(model: WcaNet, X, y, cfg: AttackConfig, rng: Rng) -> AttackResult:
    """``x' = clip_box(x + eps * sign(g))`` with the EoT gradient ``g``."""
    X0 = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y).reshape(-1)
    before = eot_margins(model, X0, y, cfg.eot_samples, rng)
    single = replace(cfg, norm="inf") if cfg.norm == "0" else cfg
    Xa = _gradient_run(model, X0, y, single, rng, X0, 1, cfg.eps)
    return _finish(model, X0, Xa, y, single, rng, cfg.eot_samples, before)


def pgd(model: WcaNet, X, y, cfg: AttackConfig, rng: Rng) -> AttackResult:
    """Projected gradient ascent with random restarts.

    Each restart starts uniformly inside the eps-ball (or at ``X`` when
    ``random_init`` is off) and takes ``steps`` signed (l-inf) or
    normalised (l2) steps of size ``alpha``. Per example, the restart with
    the lowest final margin wins; ties keep the earliest restart.
    """
    X0 = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y).reshape(-1)
    before = eot_margins(model, X0, y, cfg.eot_samples, rng)
    best_X = X0.copy()
    best_m = np.full(X0.shape[0], np.inf)
    for _ in range(cfg.restarts):
        start = _random_start(X0, cfg, rng) if cfg.random_init else X0
        Xr = _gradient_run(model, X0, y, cfg, rng, start, cfg.steps, cfg.step_size)
        m = eot_margins(model, Xr, y, cfg.eot_samples, rng)
        key = -m if cfg.targeted else m
        better = key < best_m
        best_X[better] = Xr[better]
        best_m[better] = key[better]
    queries = cfg.restarts * cfg.steps * cfg.eot_samples
    return _finish(model, X0, best_X, y, cfg, rng, queries, before)


def cw(model: WcaNet, X, y, cfg: AttackConfig, rng: Rng, kappa: float = 0.0, c0: float = 1e-3,
       binary_steps: int = 9, iters: int = 1000, lr: float = 5e-4) -> AttackResult:
    """Carlini-Wagner l2 attack.

    Minimises ``|delta|_2^2 + c * max(margin(x + delta), -kappa)`` with Adam.
    Finite boxes use the tanh change of variables; unbounded boxes optimise
    ``delta`` directly. ``c`` is tuned per example by binary search (grown
    tenfold until the first success). The smallest-norm perturbation that
    reaches margin <= -kappa (and < 0) is returned.
    """
    X0 = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y).reshape(-1)
    n, D = X0.shape
    lo, hi = _box_arrays(cfg.box, D)
    finite = bool(np.all(np.isfinite(lo)) and np.all(np.isfinite(hi)))
    eot = cfg.eot_samples

    def reached(m):
        return (m <= -kappa) & (m < 0)

    before = eot_margins(model, X0, y, eot, rng)
    best_norm = np.where(reached(before), 0.0, np.inf)
    best_X = X0.copy()
    best_m = before.copy()
    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    c = np.full(n, float(c0))
    queries = 0
    if finite:
        span = np.where(hi > lo, hi - lo, 1.0)
        w0 = np.arctanh(np.clip((X0 - lo) / span * 2.0 - 1.0, -1 + 1e-12, 1 - 1e-12))

        def to_x(w):
            return lo + span * (np.tanh(w) + 1.0) / 2.0
    else:
        w0 = X0.copy()

        def to_x(w):
            return w

    active = best_norm > 0
    for _ in range(binary_steps):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        w = w0[idx].copy()
        mom, vel = np.zeros_like(w), np.zeros_like(w)
        succeeded = np.zeros(idx.size, dtype=bool)
        for t in range(1, iters + 1):
            xa = to_x(w)
            g_margin = -eot_gradient(model, xa, y[idx], eot, rng, "margin")
            m = eot_margins(model, xa, y[idx], eot, rng)
            queries += 2 * eot
            d2 = np.sum((xa - X0[idx]) ** 2, axis=1)
            ok = reached(m)
            improve = ok & (np.sqrt(d2) < best_norm[idx])
            if improve.any():
                sel = idx[improve]
                best_norm[sel] = np.sqrt(d2[improve])
                best_X[sel] = xa[improve]
                best_m[sel] = m[improve]
            succeeded |= ok
            hinge_on = (m > -kappa)[:, None]
            gx = 2.0 * (xa - X0[idx]) + c[idx][:, None] * np.where(hinge_on, g_margin, 0.0)
            gw = gx * (span * (1.0 - np.tanh(w) ** 2) / 2.0 if finite else 1.0)
            mom = 0.9 * mom + 0.1 * gw
            vel = 0.999 * vel + 0.001 * gw * gw
            w -= lr * (mom / (1 - 0.9 ** t)) / (np.sqrt(vel / (1 - 0.999 ** t)) + 1e-8)
        for k, i in enumerate(idx):
            if succeeded[k]:
                upper[i] = min(upper[i], c[i])
                c[i] = (lower[i] + upper[i]) / 2.0
            else:
                lower[i] = max(lower[i], c[i])
                c[i] = c[i] * 10.0 if not np.isfinite(upper[i]) else (lower[i] + upper[i]) / 2.0
    success = np.isfinite(best_norm)
    return AttackResult(best_X, success, best_m, np.full(n, queries), before)


# --------------------------------------------------------------------------
# Black-box attacks


def true_class_confidence(logits: np.ndarray, y) -> np.ndarray:
    """Softmax probability of the true class (sigmoid for a single output)."""
    if logits.shape[1] == 1:
        return 1.0 / (1.0 + np.exp(-np.asarray(y, dtype=np.float64) * logits[:, 0]))
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    return p[np.arange(len(y)), np.asarray(y)]


def _apply_pixels(x, cand, n_pixels):
    out = np.repeat(x[None, :], cand.shape[0], axis=0)
    for p in range(n_pixels):
        idx = cand[:, 2 * p].astype(np.int64)
        out[np.arange(cand.shape[0]), idx] = cand[:, 2 * p + 1]
    return out


@dataclass
class DEStats:
    generations: int
    converged: bool


def one_pixel(query: Query, X, y, rng: Rng, n_pixels: int = 1, population: int = 50, k_max: int = 200,
              crossover: float = 0.7, mutation: float = 0.5, box: tuple[float, float] = (0.0, 1.0),
              tol: float = 0.01) -> AttackResult:
    """Differential-evolution attack that rewrites ``n_pixels`` input values.

    A candidate is ``(index, value)`` per pixel. Energy is the true-class
    confidence (minimised). DE/rand/1/bin with mutation constant
    ``mutation`` and crossover probability ``crossover``; a run stops on
    success, after ``k_max`` generations, or once
    ``std(E) <= tol * |mean(E)|`` over the population.
    """
    X0 = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y).reshape(-1)
    n, D = X0.shape
    if n_pixels < 1:
        raise ValueError("n_pixels must be >= 1")
    if population < 4:
        raise ValueError("differential evolution needs a population of at least 4")
    lower = np.tile([0.0, box[0]], n_pixels)
    upper = np.tile([D - 1e-9, box[1]], n_pixels)
    out_X = X0.copy()
    success = np.zeros(n, dtype=bool)
    margin_after = np.zeros(n)
    queries = np.zeros(n, dtype=np.int64)
    margin_before = margins_from_logits(query(X0), y)
    for i in range(n):
        out_X[i], success[i], margin_after[i], queries[i], _ = _de_single(
            query, X0[i], y[i], rng, n_pixels, population, k_max, crossover, mutation, lower, upper, tol)
    return AttackResult(out_X, success, margin_after, queries, margin_before)


def _de_single(query, x, yi, rng, n_pixels, N, k_max, r, m, lower, upper, tol):
    dim = lower.size
    yy = np.full(N, yi)
    pop = lower + rng.uniform((N, dim)) * (upper - lower)
    logits = query(_apply_pixels(x, pop, n_pixels))
    energy = true_class_confidence(logits, yy)
    margins = margins_from_logits(logits, yy)
    queries = N
    stats = DEStats(0, False)
    for gen in range(k_max):
        best = int(np.argmin(margins))
        if margins[best] < 0:
            break
        if np.std(energy) <= tol * abs(np.mean(energy)):
            stats.converged = True
            break
        picks = np.stack([rng.permutation(N - 1)[:3] for _ in range(N)])
        picks = picks + (picks >= np.arange(N)[:, None])  # skip the target index itself
        a, b, c = pop[picks[:, 0]], pop[picks[:, 1]], pop[picks[:, 2]]
        mutant = np.clip(a + m * (b - c), lower, upper)
        cross = rng.uniform((N, dim)) < r
        cross[np.arange(N), rng.integers(0, dim, N)] = True
        trial = np.where(cross, mutant, pop)
        t_logits = query(_apply_pixels(x, trial, n_pixels))
        queries += N
        t_energy = true_class_confidence(t_logits, yy)
        t_margins = margins_from_logits(t_logits, yy)
        keep = t_energy <= energy
        pop[keep], energy[keep], margins[keep] = trial[keep], t_energy[keep], t_margins[keep]
        stats.generations = gen + 1
    best = int(np.argmin(margins))
    x_adv = _apply_pixels(x, pop[best:best + 1], n_pixels)[0]
    return x_adv, bool(margins[best] < 0), float(margins[best]), queries, stats


SQUARE_SCHEDULE = (0.001, 0.005, 0.02, 0.05, 0.1, 0.2, 0.4, 0.6, 0.8)


def square_fraction(p0: float, i: int, budget: int) -> float:
    """Patch area fraction at query ``i``: halves at fixed fractions of the budget."""
    frac = i / max(budget, 1)
    halvings = sum(frac > f for f in SQUARE_SCHEDULE)
    return p0 / (2 ** halvings)


def square_attack(query: Query, X, y, eps: float, rng: Rng, budget: int = 1000, p0: float = 0.1,
                  image_shape: tuple[int, ...] | None = None, box: tuple[float, float] = (0.0, 1.0)) -> AttackResult:
    """Random-search l-inf attack with square patches.

    Starts from random vertical stripes of +-eps, then repeatedly redraws a
    random square patch to a constant +-eps per channel and keeps the
    proposal only if the margin drops. Stops per example on success.
    """
    X0 = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y).reshape(-1)
    n, D = X0.shape
    if image_shape is None:
        side = int(round(math.sqrt(D)))
        if side * side != D:
            raise ShapeError(f"cannot view {D} features as a square image; pass image_shape")
        image_shape = (side, side)
    H, W = image_shape[:2]
    C = image_shape[2] if len(image_shape) > 2 else 1
    if H * W * C != D:
        raise ShapeError(f"image shape {image_shape} does not hold {D} features")
    lo, hi = box
    before = margins_from_logits(query(X0), y)
    queries = np.ones(n, dtype=np.int64)
    if eps == 0:
        return AttackResult(X0.copy(), before < 0, before, queries, before)
    stripes = eps * np.where(rng.uniform((n, 1, W, C)) < 0.5, -1.0, 1.0)
    Xa = np.clip(X0 + np.broadcast_to(stripes, (n, H, W, C)).reshape(n, D), lo, hi)
    margin = margins_from_logits(query(Xa), y)
    queries += 1
    history = [margin.copy()]
    for i in range(1, budget):
        todo = np.flatnonzero(margin >= 0)
        if todo.size == 0:
            break
        p = square_fraction(p0, i, budget)
        s = int(min(max(round(math.sqrt(p * H * W)), 1), max(min(H, W) - 1, 1)))
        cand = Xa[todo].reshape(-1, H, W, C).copy()
        base = X0[todo].reshape(-1, H, W, C)
        for k in range(todo.size):
            r0 = int(rng.integers(0, H - s + 1))
            c0 = int(rng.integers(0, W - s + 1))
            vals = eps * np.where(rng.uniform(C) < 0.5, -1.0, 1.0)
            cand[k, r0:r0 + s, c0:c0 + s, :] = np.clip(base[k, r0:r0 + s, c0:c0 + s, :] + vals, lo, hi)
        cand = cand.reshape(todo.size, D)
        m_new = margins_from_logits(query(cand), y[todo])
        queries[todo] += 1
        accept = m_new < margin[todo]
        Xa[todo[accept]] = cand[accept]
        margin[todo[accept]] = m_new[accept]
        history.append(margin.copy())
    result = AttackResult(Xa, margin < 0, margin, queries, before)
    result.history = np.array(history)
    return result


def random_search(query: Query, X, y, eps: float, rng: Rng, budget: int = 1000, norm: str = "inf",
                  box: tuple[float, float] = (0.0, 1.0), corners: bool = False) -> AttackResult:
    """Baseline: ``budget`` random in-ball perturbations per example.

    ``corners=True`` samples +-eps sign vectors (l-inf only) instead of
    uniform points in the ball. The lowest-margin sample is kept.
    """
    X0 = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y).reshape(-1)
    n, D = X0.shape
    before = margins_from_logits(query(X0), y)
    best_X, best_m = X0.copy(), before.copy()
    cfg = AttackConfig(eps=eps, norm=norm, box=box)
    chunk = max(1, min(budget, 200))
    done = 0
    while done < budget:
        b = min(chunk, budget - done)
        rep = np.repeat(X0, b, axis=0)
        if corners and norm == "inf":
            delta = eps * np.where(rng.uniform(rep.shape) < 0.5, -1.0, 1.0)
            cand = project(rep, rep + delta, cfg)
        else:
            cand = _random_start(rep, cfg, rng)
        m = margins_from_logits(query(cand), np.repeat(y, b)).reshape(n, b)
        j = m.argmin(axis=1)
        mins = m[np.arange(n), j]
        better = mins < best_m
        best_m[better] = mins[better]
        best_X[better] = cand.reshape(n, b, D)[np.flatnonzero(better), j[better]]
        done += b
    return AttackResult(best_X, best_m < 0, best_m, np.full(n, budget), before)


# --------------------------------------------------------------------------
# Reports


def report_rows(result: AttackResult, attack: str, eps: float, ids=None) -> list[dict]:
    ids = np.arange(result.success.size) if ids is None else ids
    before = result.margin_before if result.margin_before.size else np.full(result.success.size, np.nan)
    return [
        {"example_id": int(i), "attack": attack, "eps": float(eps), "success": int(s),
         "margin_before": float(mb), "margin_after": float(ma), "queries": int(q)}
        for i, s, mb, ma, q in zip(ids, result.success, before, result.margin, result.queries)
    ]


def format_report(rows: list[dict], header: str = "") -> str:
    buf = io.StringIO()
    buf.write(header)
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
    return buf.getvalue()
