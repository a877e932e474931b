"""Dense float64 arithmetic, seeded sampling, a small reverse-mode tape and
the symmetric factorizations used by the rest of the package.

Tensors are plain ``numpy.ndarray`` objects with ``dtype=float64``.
"""
from __future__ import annotations

import math
from typing import Callable, Sequence

import numpy as np

Tensor = np.ndarray

SYMMETRY_TOL = 1e-10
PSD_TOL = 1e-9


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class FactorizationError(ValueError):
    """A matrix factorization could not be computed."""


class DomainError(ValueError):
    """A value falls outside the domain of a mathematical function."""


# --------------------------------------------------------------------------
# Random numbers


class Rng:
    """Counter-based generator (Philox 4x64) with Box-Muller normals.

    The stream depends only on ``seed`` (and the ``key`` path used to derive
    child streams), never on the platform.
    """

    def __init__(self, seed: int, key: Sequence[int] = ()):
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        ss = np.random.SeedSequence([self.seed & 0xFFFFFFFFFFFFFFFF, *self.key])
        self._bits = np.random.Philox(ss)
        self._gen = np.random.Generator(self._bits)

    def spawn(self, *key: int) -> "Rng":
        """Independent stream derived from ``(seed, self.key, key)``."""
        return Rng(self.seed, self.key + tuple(key))

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int | None = None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def gaussian(self, shape) -> Tensor:
        """I.i.d. standard normals of the given shape via Box-Muller."""
        shape = (shape,) if isinstance(shape, (int, np.integer)) else tuple(shape)
        n = int(np.prod(shape)) if shape else 1
        if n < 0:
            raise ValueError("sample count must be non-negative")
        if n == 0:
            return np.zeros(shape)
        pairs = (n + 1) // 2
        # 1 - U lies in (0, 1], keeping the log finite.
        u1 = 1.0 - self._gen.random(pairs)
        u2 = self._gen.random(pairs)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty(2 * pairs)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n].reshape(shape)


def gaussian(rng: Rng, n: int) -> Tensor:
    if n < 1:
        raise ValueError(f"gaussian needs n >= 1, got {n}")
    return rng.gaussian(n)


# --------------------------------------------------------------------------
# Reverse-mode differentiation


class Node:
    __slots__ = ("tape", "id", "value", "grad", "parents", "backward_fn", "requires_grad")

    def __init__(self, tape: "Tape", value, parents=(), backward_fn=None, requires_grad=False):
        self.tape = tape
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.grad = None
        self.id = len(tape.nodes)
        tape.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, c):
        return scale(self, c)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Node(id={self.id}, shape={self.value.shape})"


class Tape:
    """Records primitive ops in execution order; ``backward`` replays them
    in reverse, so every node's gradient is complete before it is read."""

    def __init__(self):
        self.nodes: list[Node] = []

    def var(self, value, requires_grad: bool = True) -> Node:
        return Node(self, value, requires_grad=requires_grad)

    def const(self, value) -> Node:
        return Node(self, value, requires_grad=False)

    def backward(self, loss: Node) -> None:
        if loss.tape is not self:
            raise ValueError("loss node belongs to a different tape")
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        for node in self.nodes:
            node.grad = None
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes[: loss.id + 1]):
            if node.grad is None or node.backward_fn is None:
                continue
            grads = node.backward_fn(node.grad)
            for parent, g in zip(node.parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    def gradients(self, loss: Node, wrt: Sequence[Node]) -> list[Tensor]:
        self.backward(loss)
        return [np.zeros_like(n.value) if n.grad is None else n.grad for n in wrt]


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise TypeError("at least one operand must be a Node")


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.const(x)


def _op(tape, value, parents, backward_fn) -> Node:
    needs = any(p.requires_grad for p in parents)
    return Node(tape, value, parents if needs else (), backward_fn if needs else None, needs)


def _unbroadcast(g: Tensor, shape) -> Tensor:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def matmul(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    return _op(tape, av @ bv, (a, b), lambda g: (g @ bv.T, av.T @ g))


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.value.shape, b.value.shape
    try:
        out = a.value + b.value
    except ValueError as exc:
        raise ShapeError(f"add shape mismatch: {sa} + {sb}") from exc
    return _op(tape, out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    sa, sb = a.value.shape, b.value.shape
    try:
        out = a.value - b.value
    except ValueError as exc:
        raise ShapeError(f"sub shape mismatch: {sa} - {sb}") from exc
    return _op(tape, out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def scale(a: Node, c: float) -> Node:
    c = float(c)
    return _op(a.tape, a.value * c, (a,), lambda g: (g * c,))


def transpose(a: Node) -> Node:
    return _op(a.tape, a.value.T, (a,), lambda g: (g.T,))


def repeat_rows(a: Node, n: int) -> Node:
    """Repeat every row ``n`` times consecutively: (m, k) -> (m*n, k)."""
    v = a.value
    m = v.shape[0]
    return _op(a.tape, np.repeat(v, n, axis=0), (a,),
               lambda g: (g.reshape(m, n, *v.shape[1:]).sum(axis=1),))


def relu(a: Node) -> Node:
    # subgradient 0 at the kink
    mask = a.value > 0
    return _op(a.tape, np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def log(a: Node) -> Node:
    v = a.value
    if np.any(v <= 0):
        raise DomainError("log of a non-positive value")
    return _op(a.tape, np.log(v), (a,), lambda g: (g / v,))


def sum(a: Node) -> Node:  # noqa: A001 - mirrors numpy naming
    shape = a.value.shape
    return _op(a.tape, np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(a: Node) -> Node:
    shape, n = a.value.shape, a.value.size
    return _op(a.tape, np.asarray(a.value.mean()), (a,),
               lambda g: (np.broadcast_to(g / n, shape).copy(),))


def sumsq(a: Node) -> Node:
    """Squared Frobenius norm."""
    v = a.value
    return _op(a.tape, np.asarray(np.sum(v * v)), (a,), lambda g: (2.0 * g * v,))


def row_sumsq(a: Node) -> Node:
    """Squared l2 norm of every row of a matrix."""
    v = a.value
    return _op(a.tape, np.sum(v * v, axis=1), (a,), lambda g: (2.0 * g[:, None] * v,))


def quad_form(w: Node, sigma) -> Node:
    """Row-wise bilinear form ``w_i^T sigma w_i`` for a matrix of row vectors."""
    tape = _tape_of(w, sigma)
    w, sigma = _lift(tape, w), _lift(tape, sigma)
    wv, sv = w.value, sigma.value
    if wv.ndim == 1:
        wv = wv[None, :]
    if sv.shape != (wv.shape[1], wv.shape[1]):
        raise ShapeError(f"quad_form shape mismatch: {w.value.shape} vs {sv.shape}")
    out = np.einsum("ij,jk,ik->i", wv, sv, wv)
    flat = w.value.ndim == 1

    def back(g):
        gw = g[:, None] * (wv @ (sv + sv.T))
        gs = (wv * g[:, None]).T @ wv
        return (gw[0] if flat else gw, gs)

    return _op(tape, out[0] if flat else out, (w, sigma),
               (lambda g: back(np.atleast_1d(g))) if flat else back)


def group_mean(a: Node, n: int) -> Node:
    """Average consecutive groups of ``n`` rows: (m*n, k) -> (m, k)."""
    v = a.value
    if v.shape[0] % n:
        raise ShapeError(f"{v.shape[0]} rows do not split into groups of {n}")
    m = v.shape[0] // n
    out = v.reshape(m, n, *v.shape[1:]).mean(axis=1)
    return _op(a.tape, out, (a,), lambda g: (np.repeat(g / n, n, axis=0),))


def softmax_cross_entropy(logits: Node, labels) -> Node:
    """Mean cross-entropy of softmax(logits) against integer labels."""
    z = logits.value
    labels = np.asarray(labels, dtype=np.int64)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise ShapeError(f"logits {z.shape} and labels {labels.shape} do not pair up")
    shifted = z - z.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    n = z.shape[0]
    rows = np.arange(n)
    value = -logp[rows, labels].mean()

    def back(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (g * p / n,)

    return _op(logits.tape, np.asarray(value), (logits,), back)


def hinge(scores: Node, y) -> Node:
    """Mean hinge loss ``max(0, 1 - y*s)`` for a single-output head, y in {-1,+1}."""
    s = scores.value.reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if s.shape != y.shape:
        raise ShapeError(f"scores {scores.value.shape} and labels {y.shape} do not pair up")
    slack = 1.0 - y * s
    active = slack > 0
    n = s.size
    shape = scores.value.shape
    return _op(scores.tape, np.asarray(np.where(active, slack, 0.0).mean()), (scores,),
               lambda g: ((g * np.where(active, -y, 0.0) / n).reshape(shape),))


def logit_margin(logits: Node, labels) -> Node:
    """Per-row classification margin.

    Single output: ``y * h`` with y in {-1,+1}. Several outputs: true logit
    minus the largest other logit (ties resolved to the first index).
    """
    z = logits.value
    if z.ndim == 1:
        z = z[:, None]
    n, c = z.shape
    labels = np.asarray(labels)
    shape = logits.value.shape
    if c == 1:
        y = labels.astype(np.float64).reshape(-1)
        return _op(logits.tape, y * z[:, 0], (logits,), lambda g: ((g * y).reshape(shape),))
    labels = labels.astype(np.int64)
    rows = np.arange(n)
    others = z.copy()
    others[rows, labels] = -np.inf
    j = others.argmax(axis=1)
    value = z[rows, labels] - z[rows, j]

    def back(g):
        out = np.zeros((n, c))
        out[rows, labels] += g
        out[rows, j] -= g
        return (out.reshape(shape),)

    return _op(logits.tape, value, (logits,), back)


def finite_difference_gradient(f: Callable[[Tensor], float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central differences of a scalar function, one coordinate at a time."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


# --------------------------------------------------------------------------
# Factorizations


def _check_square_symmetric(a: Tensor, name: str) -> Tensor:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"{name} needs a square matrix, got shape {a.shape}")
    asym = np.max(np.abs(a - a.T)) if a.size else 0.0
    if asym > SYMMETRY_TOL:
        raise ShapeError(f"{name} needs a symmetric matrix (asymmetry {asym:.3g})")
    return a


def cholesky(sigma: Tensor, tol: float = PSD_TOL) -> Tensor:
    """Lower-triangular L with L @ L.T == sigma for symmetric PSD sigma.

    Pivots in ``[-tol, tol]`` are treated as exact zeros (semidefinite
    input); anything more negative raises ``FactorizationError``.
    """
    a = _check_square_symmetric(sigma, "cholesky")
    d = a.shape[0]
    L = np.zeros_like(a)
    for j in range(d):
        pivot = a[j, j] - L[j, :j] @ L[j, :j]
        if pivot < -tol:
            raise FactorizationError(f"matrix is not positive semidefinite (pivot {pivot:.3g} at {j})")
        if pivot <= tol:
            rest = a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]
            if rest.size and np.max(np.abs(rest)) > math.sqrt(tol):
                raise FactorizationError(f"matrix is not positive semidefinite (zero pivot at {j})")
            continue
        L[j, j] = math.sqrt(pivot)
        L[j + 1:, j] = (a[j + 1:, j] - L[j + 1:, :j] @ L[j, :j]) / L[j, j]
    return L


def sym_eig(sigma: Tensor, tol: float = 1e-14, max_sweeps: int = 100) -> tuple[Tensor, Tensor]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns eigenvalues sorted descending and the matching orthonormal
    eigenvectors as columns.
    """
    a = _check_square_symmetric(sigma, "sym_eig").copy()
    d = a.shape[0]
    v = np.eye(d)
    scale_ = np.linalg.norm(a)
    if d > 1 and scale_ > 0:
        for _ in range(max_sweeps):
            off = np.linalg.norm(a - np.diag(np.diag(a)))
            if off <= tol * scale_:
                break
            for p in range(d - 1):
                for q in range(p + 1, d):
                    apq = a[p, q]
                    if abs(apq) <= 1e-18 * (abs(a[p, p]) + abs(a[q, q])) + 1e-300:
                        a[p, q] = a[q, p] = 0.0
                        continue
                    theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                    if abs(theta) > 1e150:
                        t = 0.5 / theta
                    else:
                        t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                    c = 1.0 / math.sqrt(t * t + 1.0)
                    s = t * c
                    ap, aq = a[:, p].copy(), a[:, q].copy()
                    a[:, p] = c * ap - s * aq
                    a[:, q] = s * ap + c * aq
                    rp, rq = a[p, :].copy(), a[q, :].copy()
                    a[p, :] = c * rp - s * rq
                    a[q, :] = s * rp + c * rq
                    a[p, q] = a[q, p] = 0.0
                    vp, vq = v[:, p].copy(), v[:, q].copy()
                    v[:, p] = c * vp - s * vq
                    v[:, q] = s * vp + c * vq
        else:
            raise FactorizationError("Jacobi iteration did not converge")
    vals = np.diag(a).copy()
    order = np.argsort(-vals, kind="stable")
    return vals[order], v[:, order]


def tril_mask(d: int) -> Tensor:
    return np.tril(np.ones((d, d)))
