"""WCA-Net: feature extractor, bottleneck, learned Gaussian noise and a
linear head, ``h(x) = W (f(x) + z) + b`` with ``z ~ N(0, L L^T)``."""
from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nm
from .numerics import Node, Rng, ShapeError, Tape

CHECKPOINT_VERSION = 1
NOISE_KINDS = ("anisotropic", "isotropic", "diagonal", "none")


class ContractError(ValueError):
    """An operation was called on a model it is not defined for."""


@dataclass(frozen=True)
class Deterministic:
    """z = 0 everywhere (the noise-free twin of the model)."""


@dataclass(frozen=True)
class Stochastic:
    """Draw ``n_samples`` noise vectors per input and average the logits."""

    n_samples: int = 1

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")


ForwardMode = Deterministic | Stochastic


@dataclass
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


@dataclass
class WcaNet:
    """Model parameters plus the flags that shape how they are trained.

    ``extractor`` is a chain of affine layers with relu between them and no
    activation on the last (bottleneck) layer. An empty chain means the
    inputs are already the features. ``noise`` selects how ``L`` is
    parameterised:

    * ``anisotropic``: full lower-triangular ``L``
    * ``diagonal``: axis-aligned ``L``
    * ``isotropic``: ``L = s * I`` with one shared scale ``s``
    * ``none``: ``L`` pinned to zero (undefended baseline)
    """

    extractor: list[Layer]
    W: np.ndarray  # (C, d)
    b: np.ndarray  # (C,)
    L: np.ndarray  # (d, d)
    noise: str = "anisotropic"
    freeze_extractor: bool = False
    freeze_head: bool = False
    freeze_noise: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.noise not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.noise!r}")
        c, d = self.W.shape
        if self.b.shape != (c,) or self.L.shape != (d, d):
            raise ShapeError(f"head shapes disagree: W {self.W.shape}, b {self.b.shape}, L {self.L.shape}")
        prev = None
        for layer in self.extractor:
            if prev is not None and layer.weight.shape[1] != prev:
                raise ShapeError("extractor layer dims do not chain")
            prev = layer.weight.shape[0]
        if prev is not None and prev != d:
            raise ShapeError(f"bottleneck width {prev} does not match head width {d}")

    # -- shape helpers -----------------------------------------------------
    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def input_dim(self) -> int:
        return self.extractor[0].weight.shape[1] if self.extractor else self.d

    @property
    def binary(self) -> bool:
        return self.n_classes == 1

    @property
    def sigma(self) -> np.ndarray:
        return self.L @ self.L.T

    def copy(self) -> "WcaNet":
        return copy.deepcopy(self)

    # -- parameters --------------------------------------------------------
    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.extractor):
            out[f"extractor.{i}.weight"] = layer.weight
            out[f"extractor.{i}.bias"] = layer.bias
        out["head.W"] = self.W
        out["head.b"] = self.b
        out["head.L"] = self.L
        return out

    def trainable(self, name: str) -> bool:
        if name.startswith("extractor."):
            return not self.freeze_extractor
        if name == "head.L":
            return not self.freeze_noise and self.noise != "none"
        return not self.freeze_head

    def with_parameters(self, params: dict[str, np.ndarray]) -> "WcaNet":
        new = self.copy()
        for i, layer in enumerate(new.extractor):
            layer.weight = np.array(params[f"extractor.{i}.weight"], dtype=np.float64)
            layer.bias = np.array(params[f"extractor.{i}.bias"], dtype=np.float64)
        new.W = np.array(params["head.W"], dtype=np.float64)
        new.b = np.array(params["head.b"], dtype=np.float64)
        new.L = new.constrain_noise(np.array(params["head.L"], dtype=np.float64))
        return new

    def constrain_noise(self, L: np.ndarray) -> np.ndarray:
        """Map an arbitrary matrix onto the admissible set for ``noise``."""
        if self.noise == "anisotropic":
            return np.tril(L)
        if self.noise == "diagonal":
            return np.diag(np.diag(L))
        if self.noise == "isotropic":
            return np.eye(self.d) * np.mean(np.diag(L))
        return np.zeros_like(L)

    def noise_gradient(self, grad_L: np.ndarray) -> np.ndarray:
        """Chain rule from dLoss/dL onto the free noise parameters.

        Isotropic noise has one free scale ``s`` with ``L = s I``, whose
        gradient is ``tr(G)``; it is returned as ``tr(G) I`` so the step can
        still be taken on ``L``.
        """
        if self.noise == "anisotropic":
            return np.tril(grad_L)
        if self.noise == "diagonal":
            return np.diag(np.diag(grad_L))
        if self.noise == "isotropic":
            return np.eye(self.d) * np.trace(grad_L)
        return np.zeros_like(grad_L)

    # -- forward passes ----------------------------------------------------
    def features(self, X: np.ndarray) -> np.ndarray:
        X = _as_batch(X, self.input_dim)
        h = X
        for i, layer in enumerate(self.extractor):
            h = h @ layer.weight.T + layer.bias
            if i < len(self.extractor) - 1:
                h = np.maximum(h, 0.0)
        return h

    def logits(self, X: np.ndarray, mode: ForwardMode = Deterministic(), rng: Rng | None = None) -> np.ndarray:
        """Numpy-only forward pass for a batch ``X`` of shape (n, D)."""
        F = self.features(X)
        if isinstance(mode, Deterministic) or self.noise == "none":
            return F @ self.W.T + self.b
        if rng is None:
            raise ValueError("stochastic forward needs an Rng")
        n = mode.n_samples
        U = rng.gaussian((F.shape[0] * n, self.d))
        H = np.repeat(F, n, axis=0) + U @ self.L.T
        out = H @ self.W.T + self.b
        return out.reshape(F.shape[0], n, -1).mean(axis=1)

    def predict(self, X, mode: ForwardMode = Deterministic(), rng: Rng | None = None) -> np.ndarray:
        z = self.logits(X, mode, rng)
        if self.binary:
            return np.where(z[:, 0] >= 0, 1, -1)
        return z.argmax(axis=1)


def _as_batch(X, dim: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != dim:
        raise ShapeError(f"expected inputs with {dim} features, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("inputs contain non-finite values")
    return X


# --------------------------------------------------------------------------
# Construction


def create(
    rng: Rng,
    input_dim: int,
    n_classes: int,
    hidden: tuple[int, ...] = (),
    d: int | None = None,
    noise: str = "anisotropic",
    l_init: float = 0.1,
    binary: bool = False,
) -> WcaNet:
    """Fresh model with Glorot-uniform layers and ``L = l_init * I``.

    ``binary=True`` builds a single-output head for labels in {-1, +1}.
    With ``d=None`` the bottleneck width is ``max(n_classes, 8)``; when
    there are neither hidden layers nor an explicit ``d`` the inputs are
    used as features directly.
    """
    if d is None:
        d = input_dim if not hidden else max(n_classes, 8)
    if d < n_classes:
        raise ValueError(f"bottleneck width {d} must be >= number of classes {n_classes}")
    dims = [input_dim, *hidden, d]
    layers = []
    if hidden or d != input_dim:
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            layers.append(Layer(rng.uniform((fan_out, fan_in), -limit, limit), np.zeros(fan_out)))
    c_out = 1 if binary else n_classes
    limit = np.sqrt(6.0 / (d + c_out))
    W = rng.uniform((c_out, d), -limit, limit)
    L = np.eye(d) * l_init if noise != "none" else np.zeros((d, d))
    return WcaNet(layers, W, np.zeros(c_out), L, noise=noise)


def linear_feature_map(weight: np.ndarray, bias: np.ndarray) -> list[Layer]:
    """A single frozen-able affine extractor layer, e.g. a PCA projection."""
    return [Layer(np.array(weight, dtype=np.float64), np.array(bias, dtype=np.float64))]


# --------------------------------------------------------------------------
# Tape-based forward


def forward_nodes(model: WcaNet, tape: Tape, X, params: dict[str, Node], mode: ForwardMode = Deterministic(),
                  U: np.ndarray | None = None, rng: Rng | None = None) -> Node:
    """Logits as a tape node. ``X`` may be a node (for input gradients).

    Stochastic mode uses the frozen standard-normal draws ``U`` of shape
    (n * n_samples, d) when given, otherwise draws them from ``rng``.
    """
    h = X if isinstance(X, Node) else tape.const(_as_batch(X, model.input_dim))
    for i in range(len(model.extractor)):
        h = nm.add(nm.matmul(h, nm.transpose(params[f"extractor.{i}.weight"])), params[f"extractor.{i}.bias"])
        if i < len(model.extractor) - 1:
            h = nm.relu(h)
    Wt = nm.transpose(params["head.W"])
    if isinstance(mode, Deterministic) or model.noise == "none":
        return nm.add(nm.matmul(h, Wt), params["head.b"])
    n = mode.n_samples
    m = h.value.shape[0]
    if U is None:
        if rng is None:
            raise ValueError("stochastic forward needs frozen draws or an Rng")
        U = rng.gaussian((m * n, model.d))
    if U.shape != (m * n, model.d):
        raise ShapeError(f"noise draws have shape {U.shape}, expected {(m * n, model.d)}")
    Z = nm.matmul(tape.const(U), nm.transpose(params["head.L"]))
    hn = nm.add(nm.repeat_rows(h, n) if n > 1 else h, Z)
    logits = nm.add(nm.matmul(hn, Wt), params["head.b"])
    return nm.group_mean(logits, n) if n > 1 else logits


def parameter_nodes(model: WcaNet, tape: Tape, all_trainable: bool = False) -> dict[str, Node]:
    return {
        name: tape.var(value, requires_grad=all_trainable or model.trainable(name))
        for name, value in model.parameters().items()
    }


# --------------------------------------------------------------------------
# Noise and margins


def sample_noise(model: WcaNet, rng: Rng) -> np.ndarray:
    """One draw ``z = L u`` with ``u ~ N(0, I)``."""
    return model.L @ rng.gaussian(model.d)


def forward(model: WcaNet, x, mode: ForwardMode = Deterministic(), rng: Rng | None = None) -> np.ndarray:
    """Logits for a single input vector."""
    return model.logits(np.asarray(x, dtype=np.float64)[None, :], mode, rng)[0]


def margin(model: WcaNet, x, y: int, mode: ForwardMode = Deterministic(), rng: Rng | None = None) -> float:
    """``y * h(x)`` for a single-output head and y in {-1, +1}."""
    if not model.binary:
        raise ContractError("margin y*h(x) is only defined for a single-output head")
    if y not in (-1, 1):
        raise ValueError(f"binary labels must be -1 or +1, got {y}")
    return float(y * forward(model, x, mode, rng)[0])


def batch_margins(model: WcaNet, X, y, mode: ForwardMode = Deterministic(), rng: Rng | None = None) -> np.ndarray:
    """Per-row margin; multi-class heads use true logit minus best other."""
    z = model.logits(X, mode, rng)
    return margins_from_logits(z, y)


def margins_from_logits(z: np.ndarray, y) -> np.ndarray:
    y = np.asarray(y)
    if z.shape[1] == 1:
        return y.astype(np.float64) * z[:, 0]
    rows = np.arange(z.shape[0])
    others = z.copy()
    others[rows, y] = -np.inf
    return z[rows, y] - others.max(axis=1)


# --------------------------------------------------------------------------
# Checkpoints


def save(model: WcaNet, path) -> Path:
    """Write a checkpoint.

    Layout: a numpy ``.npz`` archive holding one little-endian float64
    array per parameter (names as in ``WcaNet.parameters``) and a
    ``__meta__`` entry with a JSON document (format version, shapes, noise
    kind, freeze flags, free-form metadata).
    """
    path = Path(path)
    params = model.parameters()
    meta = {
        "format": "wcalab-checkpoint",
        "version": CHECKPOINT_VERSION,
        "n_layers": len(model.extractor),
        "d": model.d,
        "n_classes": model.n_classes,
        "noise": model.noise,
        "freeze_extractor": model.freeze_extractor,
        "freeze_head": model.freeze_head,
        "freeze_noise": model.freeze_noise,
        "shapes": {k: list(v.shape) for k, v in params.items()},
        "meta": model.meta,
    }
    arrays = {k: np.ascontiguousarray(v, dtype="<f8") for k, v in params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load(path) -> WcaNet:
    with np.load(Path(path), allow_pickle=False) as archive:
        meta = json.loads(str(archive["__meta__"]))
        if meta.get("format") != "wcalab-checkpoint":
            raise ValueError(f"{path} is not a wcalab checkpoint")
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['version']}")
        arrays = {k: np.array(archive[k], dtype=np.float64) for k in meta["shapes"]}
    layers = [Layer(arrays[f"extractor.{i}.weight"], arrays[f"extractor.{i}.bias"]) for i in range(meta["n_layers"])]
    return WcaNet(
        layers, arrays["head.W"], arrays["head.b"], arrays["head.L"], noise=meta["noise"],
        freeze_extractor=meta["freeze_extractor"], freeze_head=meta["freeze_head"],
        freeze_noise=meta["freeze_noise"], meta=meta["meta"],
    )
