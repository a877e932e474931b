"""End-to-end 2-D blobs run: train, attack sweep, noise contours, ablation.

    python scripts/run_blobs.py [--out runs/blobs] [--seed 0]
"""
import argparse
import sys

from wcalab.cli import main


def run():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", default="configs/blobs.json")
    ap.add_argument("--out", default="runs/blobs")
    ap.add_argument("--seed", default="0")
    a = ap.parse_args()
    common = ["--config", a.config, "--out", a.out, "--seed", a.seed]
    for cmd in ("train", "attack", "contours", "ablate"):
        print(f"== {cmd}")
        code = main([cmd, *common])
        if code:
            return code
    return 0


if __name__ == "__main__":
    sys.exit(run())
