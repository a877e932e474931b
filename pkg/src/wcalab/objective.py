"""Training objective: classification loss minus the weight-covariance
alignment term plus an l2 penalty, and the SGD loop that minimises it."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from . import numerics as nm
from .model import Deterministic, Stochastic, WcaNet, forward_nodes, parameter_nodes
from .numerics import DomainError, Node, Rng, Tape

log = logging.getLogger(__name__)

WCA_FLOOR = 1e-30
LOSS_KINDS = ("cross_entropy", "hinge")
TRAIN_LOG_COLUMNS = ("step", "L_C", "L_WCA", "penalty", "total", "clean_accuracy")


@dataclass(frozen=True)
class ObjectiveConfig:
    loss: str = "cross_entropy"
    lam: float = 1e-4
    wca: bool = True
    wca_weight: float = 1.0
    penalize_bias: bool = False

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown classification loss {self.loss!r}")
        if self.lam < 0:
            raise ValueError("penalty weight must be >= 0")


def wca_value(W: np.ndarray, L: np.ndarray) -> float:
    """sum_i ln(w_i^T L L^T w_i) evaluated directly."""
    q = np.sum((np.atleast_2d(W) @ L) ** 2, axis=1)
    if np.any(q <= WCA_FLOOR):
        raise DomainError(f"w_i^T Sigma w_i at or below {WCA_FLOOR:g}: {q.min():.3g}")
    return float(np.sum(np.log(q)))


def wca_term(W: Node, L: Node) -> Node:
    """Tape version of ``wca_value``; differentiable in W and L."""
    q = nm.row_sumsq(nm.matmul(W, L))
    if np.any(q.value <= WCA_FLOOR):
        raise DomainError(f"w_i^T Sigma w_i at or below {WCA_FLOOR:g}: {q.value.min():.3g}")
    return nm.sum(nm.log(q))


def classification_loss(logits: Node, y, kind: str) -> Node:
    if kind == "hinge":
        if logits.value.shape[1] != 1:
            raise ValueError("hinge loss needs a single-output head")
        return nm.hinge(logits, y)
    return nm.softmax_cross_entropy(logits, y)


@dataclass
class LossParts:
    total: Node
    classification: float
    wca: float
    penalty: float
    params: dict


def total_loss(model: WcaNet, X, y, cfg: ObjectiveConfig, U: np.ndarray | None = None,
               rng: Rng | None = None, tape: Tape | None = None, all_trainable: bool = False) -> LossParts:
    """Batch objective ``mean L_C - wca_weight * L_WCA + lam * (|W|^2 + |L|^2)``.

    The noise enters through frozen standard-normal draws ``U`` (one row
    per example), so the value is a deterministic function of the
    parameters once ``U`` is fixed.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise ValueError("empty batch")
    tape = tape or Tape()
    params = parameter_nodes(model, tape, all_trainable=all_trainable)
    mode = Stochastic(1) if model.noise != "none" else Deterministic()
    if isinstance(mode, Stochastic) and U is None:
        if rng is None:
            raise ValueError("need frozen noise draws U or an Rng")
        U = rng.gaussian((X.shape[0], model.d))
    logits = forward_nodes(model, tape, X, params, mode, U=U)
    lc = classification_loss(logits, y, cfg.loss)
    total = lc
    wca_v = 0.0
    if cfg.wca and model.noise != "none":
        w = wca_term(params["head.W"], params["head.L"])
        wca_v = float(w.value)
        total = nm.sub(total, nm.scale(w, cfg.wca_weight))
    pen_v = 0.0
    if cfg.lam > 0:
        pen = nm.add(nm.sumsq(params["head.W"]), nm.sumsq(params["head.L"]))
        if cfg.penalize_bias:
            pen = nm.add(pen, nm.sumsq(params["head.b"]))
        pen_v = float(pen.value)
        total = nm.add(total, nm.scale(pen, cfg.lam))
    return LossParts(total, float(lc.value), wca_v, pen_v, params)


def gradients(model: WcaNet, parts: LossParts) -> dict[str, np.ndarray]:
    tape = parts.total.tape
    tape.backward(parts.total)
    out = {}
    for name, node in parts.params.items():
        g = node.grad if node.grad is not None else np.zeros_like(node.value)
        out[name] = g
    return out


def sgd_step(model: WcaNet, grads: dict[str, np.ndarray], lr: float) -> WcaNet:
    """theta <- theta - lr * grad on every trainable parameter."""
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient in {', '.join(bad)}")
    params = dict(model.parameters())
    for name, value in params.items():
        if not model.trainable(name) or name not in grads:
            continue
        g = grads[name]
        if name == "head.L":
            g = model.noise_gradient(g)
        params[name] = value - lr * g
    return model.with_parameters(params)


# --------------------------------------------------------------------------
# Training loop


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    epochs: int = 20
    batch_size: int = 128
    seed: int = 0
    log_every: int = 0  # steps; 0 logs once per epoch


def accuracy(model: WcaNet, X, y, rng: Rng | None = None, n_draws: int = 1) -> float:
    """Fraction correct; stochastic models average over ``n_draws`` noise draws."""
    y = np.asarray(y)
    if model.noise == "none" or rng is None:
        return float(np.mean(model.predict(X) == y))
    hits = 0.0
    for _ in range(n_draws):
        hits += np.mean(model.predict(X, Stochastic(1), rng) == y)
    return float(hits / n_draws)


def batches(n: int, batch_size: int, rng: Rng) -> Iterable[np.ndarray]:
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


Updater = Callable[[WcaNet, dict, float], WcaNet]
# (model, X_batch, y_batch, rng) -> (X_batch', y_batch'), e.g. adversarial examples
Augment = Callable[[WcaNet, np.ndarray, np.ndarray, Rng], tuple[np.ndarray, np.ndarray]]


def train(model: WcaNet, X, y, obj: ObjectiveConfig, cfg: TrainConfig,
          update: Updater = sgd_step, augment: Augment | None = None) -> tuple[WcaNet, list[dict]]:
    """Minibatch training; returns the final model and the log rows.

    ``update`` maps (model, grads, lr) to the next model, so the projected
    update from ``constraints`` plugs in unchanged. ``augment`` rewrites
    each batch before the step (adversarial training).
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y)
    if model.freeze_extractor and model.extractor and augment is None:
        # a frozen extractor is a fixed map: train the head on cached features
        extractor = model.extractor
        head = model.copy()
        head.extractor = []
        head, rows = train(head, model.features(X), y, obj, cfg, update)
        head.extractor = extractor
        return head, rows
    rng = Rng(cfg.seed, (1,))
    aug_rng = Rng(cfg.seed, (3,))
    eval_rng = Rng(cfg.seed, (2,))
    rows: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        for idx in batches(X.shape[0], cfg.batch_size, rng):
            Xb, yb = X[idx], y[idx]
            if augment is not None:
                Xb, yb = augment(model, Xb, yb, aug_rng)
            parts = total_loss(model, Xb, yb, obj, rng=rng)
            if not math.isfinite(parts.total.value):
                raise FloatingPointError(f"loss became non-finite at step {step}")
            model = update(model, gradients(model, parts), cfg.lr)
            step += 1
            if cfg.log_every and step % cfg.log_every == 0:
                rows.append(_log_row(step, parts, model, X, y, eval_rng))
        if not cfg.log_every:
            rows.append(_log_row(step, parts, model, X, y, eval_rng))
        log.debug("epoch %d step %d loss %.5f", epoch, step, rows[-1]["total"] if rows else float("nan"))
    return model, rows


def _log_row(step, parts: LossParts, model, X, y, rng) -> dict:
    return {
        "step": step,
        "L_C": parts.classification,
        "L_WCA": parts.wca,
        "penalty": parts.penalty,
        "total": float(parts.total.value),
        "clean_accuracy": accuracy(model, X, y, rng),
    }


def format_train_log(rows: list[dict], header: str = "") -> str:
    buf = io.StringIO()
    if header:
        buf.write(header)
    writer = csv.DictWriter(buf, fieldnames=TRAIN_LOG_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(float(v)) if k != "step" else v) for k, v in row.items()})
    return buf.getvalue()
