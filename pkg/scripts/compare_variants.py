"""Median clean and attacked accuracy of several noise variants over seeds.

    python scripts/compare_variants.py --config configs/blobs.json --seeds 5
    python scripts/compare_variants.py --config configs/mnist01_bound.json --variants none anisotropic

Each (variant, seed) is trained from scratch; the grid search runs when the
config enables it.
"""
import argparse

import numpy as np

from wcalab import config as cf
from wcalab import experiments as ex


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", required=True)
    ap.add_argument("--seeds", type=int, default=5)
    ap.add_argument("--variants", nargs="+", default=["none", "isotropic", "anisotropic"])
    ap.add_argument("--data")
    a = ap.parse_args()
    cfg = cf.with_overrides(cf.load(a.config), data=a.data).replace(seeds=a.seeds)
    bundle = None if cfg.dataset.kind == "blobs" else ex.load_data(cfg)
    clean = ex.clean_accuracies(cfg, bundle, a.variants)
    curves = ex.robustness_curves(cfg, bundle, a.variants)
    budgets = cfg.attacks[0].budgets
    print("variant," + ",".join(["clean", *[f"eps={e:.4g}" for e in budgets]]))
    for v in a.variants:
        row = [np.median(clean[v]), *np.median(curves[v], axis=0)]
        print(v + "," + ",".join(f"{x:.4f}" for x in row))


if __name__ == "__main__":
    run()
