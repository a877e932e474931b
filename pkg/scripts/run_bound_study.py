"""Certified floor vs PGD accuracy on MNIST 0/1, both noise shapes, several seeds.

    python scripts/run_bound_study.py --config configs/mnist01_bound.json --out runs/bound

Writes bound.csv and bound.svg (same files as ``wcalab bound``) and prints
the median attacked-accuracy curve of each variant.
"""
import sys

from wcalab.cli import main

if __name__ == "__main__":
    args = sys.argv[1:] or ["--config", "configs/mnist01_bound.json"]
    sys.exit(main(["-v", "bound", *args]))
