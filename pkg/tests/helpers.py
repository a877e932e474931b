"""Shared oracles for the test-suite."""
from pathlib import Path

import numpy as np

from wcalab import numerics as nm

DATA = Path(__file__).resolve().parents[1] / "data"
FD_H = 1e-5
FD_TOL = 1e-5


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(build, values, h=FD_H):
    """Worst relative error between tape gradients and central differences.

    ``build(tape, *nodes)`` must return a scalar node; ``values`` are the
    input arrays. Every input is checked.
    """
    tape = nm.Tape()
    nodes = [tape.var(v) for v in values]
    loss = build(tape, *nodes)
    grads = tape.gradients(loss, nodes)
    worst = 0.0
    for i, v in enumerate(values):
        def f(x, i=i):
            t = nm.Tape()
            ns = [t.var(x if j == i else values[j]) for j in range(len(values))]
            return float(build(t, *ns).value)
        worst = max(worst, rel_err(grads[i], nm.finite_difference_gradient(f, v, h)))
    return worst


def mnist_available() -> bool:
    return (DATA / "mnist" / "train-images-idx3-ubyte.gz").exists()


# acceptance verdicts, echoed in the terminal summary by conftest
VERDICTS: dict[int, str] = {}


def verdict(number: int, ok: bool, detail: str) -> bool:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[number] = line
    print(line)
    return ok
