"""Command-line driver.

    wcalab train      --config cfg.json --out runs/a
    wcalab attack     --config cfg.json --checkpoint runs/a/model.npz
    wcalab bound      --config cfg.json
    wcalab checklist  --config cfg.json --checkpoint runs/a/model.npz
    wcalab contours   --config blobs.json --checkpoint runs/b/model.npz
    wcalab ablate     --config blobs.json

Settings come from the dataclass defaults, then the JSON file given by
``--config``, then ``--seed``/``--out``/``--data``. The data root falls back
to ``$WCALAB_DATA`` and then ``./data``. Every CSV starts with ``#`` comment
lines carrying the config hash, the seed and the data provenance.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cf
from . import experiments as ex
from . import model as mdl
from . import svg
from .attacks import REPORT_COLUMNS, report_rows
from .numerics import ShapeError
from .objective import format_train_log
from .theory import BOUND_COLUMNS

log = logging.getLogger("wcalab")

EXIT_CONFIG, EXIT_DATA, EXIT_INCOMPATIBLE = 2, 3, 4


def header(command: str, cfg: cf.ExperimentConfig, source: str = "") -> str:
    lines = [f"wcalab {command}", f"config_sha256: {cfg.digest()}", f"seed: {cfg.seed}"]
    if source:
        lines.append(f"data: {source}")
    return "".join(f"# {s}\n" for s in lines)


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(text)
    log.info("wrote %s", path)
    return path


def table_csv(rows: list[dict], columns, head: str) -> str:
    buf = io.StringIO()
    buf.write(head)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([repr(float(r[c])) if isinstance(r[c], (float, np.floating)) else r[c] for c in columns])
    return buf.getvalue()


def _checkpoint(args, cfg) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.out) / "model.npz"


# --------------------------------------------------------------------------
# Subcommands


def cmd_train(cfg: cf.ExperimentConfig, args) -> int:
    bundle = ex.load_data(cfg)
    out = Path(cfg.out)
    resolved, grid = ex.resolve(cfg, bundle)
    head = header("train", cfg, bundle.train.provenance)
    if grid is not None:
        write_text(out / "grid.csv", table_csv(grid.rows, ("lr", "lam", "val_accuracy"), head))
        log.info("grid picked lr=%g lam=%g", grid.lr, grid.lam)
    model, rows = ex.fit(resolved, bundle)
    model.meta.update({"config_sha256": cfg.digest(), "seed": cfg.seed, "lr": resolved.training.lr,
                       "lam": resolved.objective.lam, "dataset": cfg.dataset.kind})
    path = out / "model.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    mdl.save(model, path)
    write_text(out / "train_log.csv", format_train_log(rows, head))
    acc = ex.stochastic_accuracy(model, bundle.test.features, bundle.test.labels, ex.Rng(cfg.seed, (ex.K_EVAL, 0)),
                                 cfg.eval_draws)
    print(f"test accuracy {acc:.4f}")
    return 0


def cmd_attack(cfg: cf.ExperimentConfig, args) -> int:
    bundle = ex.load_data(cfg)
    model = mdl.load(_checkpoint(args, cfg))
    head = header("attack", cfg, bundle.test.provenance)
    rows = ex.attack_table(cfg, model, bundle)
    out = Path(cfg.out)
    write_text(out / "attack_report.csv",
               table_csv(rows, ("attack", "eps", "accuracy", "success_rate", "mean_margin"), head))
    names = {}
    for r in rows:
        names.setdefault(r["attack"], []).append((r["eps"], r["accuracy"]))
    for r in rows:
        print(f"{r['attack']:>10} eps={r['eps']:.4f} accuracy={r['accuracy']:.4f}")
    if args.per_example:
        X, y = bundle.test.features, bundle.test.labels
        per = []
        for a_i, spec in enumerate(cfg.attacks):
            for eps in spec.budgets:
                res = ex.run_attack(model, X, y, spec, eps, ex.Rng(cfg.seed, (ex.K_ATTACK, a_i)), bundle.box,
                                    bundle.image_shape)
                per.extend(report_rows(res, spec.name, eps))
        write_text(out / "attack_examples.csv", table_csv(per, REPORT_COLUMNS, head))
    series = {}
    for name, pts in names.items():
        series[name] = np.array([a for _, a in pts])
    first = next(iter(names.values()))
    write_text(out / "attack_report.svg", svg.line_chart([e for e, _ in first], series, "accuracy under attack",
                                                         "eps", "accuracy", (0.0, 1.0)))
    return 0


def cmd_bound(cfg: cf.ExperimentConfig, args) -> int:
    bundle = ex.load_data(cfg)
    if bundle.n_classes != 2:
        raise ex.ExperimentError("the bound study needs a binary dataset")
    cfg = cfg.replace(objective={"loss": "hinge"})
    reports = ex.bound_experiment(cfg, bundle, progress=lambda s: log.info(s))
    out = Path(cfg.out)
    head = header("bound", cfg, bundle.test.provenance)
    rows = []
    for noise, reps in reports.items():
        for s, rep in enumerate(reps):
            for r in rep.rows:
                rows.append({"variant": noise, "seed": cfg.seed + s, **{c: getattr(r, c) for c in BOUND_COLUMNS}})
                rows[-1]["floor_ok"] = int(r.floor_ok)
    write_text(out / "bound.csv", table_csv(rows, ("variant", "seed", *BOUND_COLUMNS), head))
    eps = [r.eps for r in reports["anisotropic"][0].rows]
    series = {}
    for noise, reps in reports.items():
        series[f"{noise} attacked"] = ex.median_curve(reps)
        series[f"{noise} floor"] = ex.median_curve(reps, "certified_floor")
    write_text(out / "bound.svg", svg.line_chart(eps, series, "PGD accuracy vs certified floor", "eps",
                                                 "accuracy", (0.0, 1.0),
                                                 dashed=tuple(k for k in series if k.endswith("floor"))))
    bad = sum(len(rep.violations) for reps in reports.values() for rep in reps)
    print(f"floor violations: {bad}")
    for noise, reps in reports.items():
        print(f"{noise:>12} median attacked accuracy: "
              + " ".join(f"{e:g}:{a:.4f}" for e, a in zip(eps, ex.median_curve(reps))))
    return 0


def cmd_checklist(cfg: cf.ExperimentConfig, args) -> int:
    bundle = ex.load_data(cfg)
    model = mdl.load(_checkpoint(args, cfg))
    items = ex.checklist(cfg, model, bundle)
    text = ex.format_checklist(items)
    head = header("checklist", cfg, bundle.test.provenance)
    rows = [{"criterion": it.number, "name": it.name, "result": "PASS" if it.passed else "FAIL",
             "detail": it.detail} for it in items]
    write_text(Path(cfg.out) / "checklist.csv", table_csv(rows, ("criterion", "name", "result", "detail"), head))
    sys.stdout.write(text)
    return 0


def cmd_contours(cfg: cf.ExperimentConfig, args) -> int:
    model = mdl.load(_checkpoint(args, cfg))
    c = ex.contours(model)
    head = header("contours", cfg)
    rows = []
    for level, pts in sorted(c.ellipses.items()):
        rows.extend({"kind": "ellipse", "index": i, "level": level, "x": p[0], "y": p[1]}
                    for i, p in enumerate(pts))
    rows.extend({"kind": "weight", "index": i, "level": 0.0, "x": w[0], "y": w[1]} for i, w in enumerate(c.weights))
    rows.extend({"kind": "eigenvector", "index": i, "level": c.eigenvalues[i], "x": c.eigenvectors[0, i],
                 "y": c.eigenvectors[1, i]} for i in range(2))
    rows.append({"kind": "alignment", "index": int(c.isotropic), "level": c.alignment, "x": 0.0, "y": 0.0})
    out = Path(cfg.out)
    write_text(out / "contours.csv", table_csv(rows, ("kind", "index", "level", "x", "y"), head))
    write_text(out / "contours.svg", svg.contour_plot(c.ellipses, c.weights, "noise covariance and weights"))
    if c.isotropic:
        print("alignment score: undefined (isotropic noise)")
    else:
        print(f"alignment score: {c.alignment:.4f}")
    return 0


def cmd_ablate(cfg: cf.ExperimentConfig, args) -> int:
    bundle = ex.load_data(cfg)
    rows = ex.ablation(cfg, bundle, progress=lambda s: log.info(s))
    head = header("ablate", cfg, bundle.test.provenance)
    write_text(Path(cfg.out) / "ablation.csv", table_csv(rows, ex.ABLATION_COLUMNS, head))
    for r in rows:
        print(f"{r['variant']:>28} clean={r['clean']:.4f} fgsm={r['fgsm']:.4f} pgd={r['pgd']:.4f}")
    return 0


COMMANDS = {
    "train": (cmd_train, "train a model and write model.npz plus train_log.csv"),
    "attack": (cmd_attack, "per-attack, per-eps accuracy of a checkpoint"),
    "bound": (cmd_bound, "certified floor vs PGD for isotropic and anisotropic noise"),
    "checklist": (cmd_checklist, "gradient-obfuscation checklist for a checkpoint"),
    "contours": (cmd_contours, "noise ellipses and weight vectors of a d=2 checkpoint"),
    "ablate": (cmd_ablate, "control experiments E1-E3, adversarial training, regularizers"),
}


def parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="wcalab", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="JSON experiment config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--data", help="data root (default $WCALAB_DATA, then ./data)")
        if name in ("attack", "checklist", "contours"):
            p.add_argument("--checkpoint", help="model file (default OUT/model.npz)")
        if name == "attack":
            p.add_argument("--per-example", action="store_true", help="also write attack_examples.csv")
    return ap


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = cf.load(args.config) if args.config else cf.ExperimentConfig().validate()
        cfg = cf.with_overrides(cfg, args.seed, args.out, args.data)
    except (cf.ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command][0](cfg, args)
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ex.ExperimentError, mdl.ContractError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INCOMPATIBLE


if __name__ == "__main__":
    sys.exit(main())
