"""Build MNIST IDX files from the digits bundled in the npm ``mnist`` package.

The package ships 10,000 MNIST digits as per-class JSON arrays of pixel
intensities in [0, 1] rounded to three decimals. Pixels are mapped back to
bytes with round(v * 255). Within each class, even positions go to the
``train`` files and odd positions to the ``t10k`` files.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python scripts/prepare_mnist.py package/src/digits data/mnist
"""
import argparse
import json
from pathlib import Path

import numpy as np

from wcalab.data import write_idx


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path, help="directory holding 0.json ... 9.json")
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()

    parts = {"train": ([], []), "t10k": ([], [])}
    for digit in range(10):
        raw = np.asarray(json.loads((args.digits_dir / f"{digit}.json").read_text())["data"])
        images = np.rint(raw.reshape(-1, 28, 28) * 255.0).clip(0, 255).astype(np.uint8)
        for split, sl in (("train", slice(0, None, 2)), ("t10k", slice(1, None, 2))):
            parts[split][0].append(images[sl])
            parts[split][1].append(np.full(images[sl].shape[0], digit, dtype=np.uint8))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    for split, (imgs, labs) in parts.items():
        X, y = np.concatenate(imgs), np.concatenate(labs)
        write_idx(args.out_dir / f"{split}-images-idx3-ubyte.gz", X)
        write_idx(args.out_dir / f"{split}-labels-idx1-ubyte.gz", y)
        print(f"{split}: {len(y)} images")


if __name__ == "__main__":
    main()
