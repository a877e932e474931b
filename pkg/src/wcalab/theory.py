"""Gaussian misclassification probabilities for a noisy linear head and the
bound on how much an attack can raise them.

For a single-output head the margin ``y h(x)`` is Gaussian with mean
``y (w^T f(x) + b)`` and variance ``w^T Sigma w``. If the noise-free model
moves by at most ``delta`` under any admissible perturbation, the attacked
misclassification probability rises by at most
``delta / sqrt(2 pi w^T Sigma w)``.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import DomainError

INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def std_normal_cdf(t):
    """Standard normal CDF via erfc (absolute error far below 1e-7).

    Accepts scalars or arrays.
    """
    t = np.asarray(t, dtype=np.float64)
    if not np.all(np.isfinite(t)):
        raise DomainError("std_normal_cdf needs finite input")
    out = 0.5 * _erfc(-t / math.sqrt(2.0))
    return float(out) if out.ndim == 0 else out


_erfc = np.vectorize(math.erfc, otypes=[np.float64])


def _variance(w, L) -> float:
    w = np.asarray(w, dtype=np.float64)
    v = float(np.sum((w @ np.asarray(L, dtype=np.float64)) ** 2))
    if v <= 0.0:
        raise DomainError("w^T Sigma w is zero; the deterministic limit is handled by the caller")
    return v


def clean_misclass_prob(w, b, L, fx, y):
    """``Phi(-y (w^T fx + b) / sqrt(w^T Sigma w))``; ``fx``/``y`` may be batched."""
    s = math.sqrt(_variance(w, L))
    m = np.asarray(y, dtype=np.float64) * (np.asarray(fx, dtype=np.float64) @ np.asarray(w) + b)
    return std_normal_cdf(-m / s)


def adv_misclass_upper(w, b, L, fx, y, delta):
    """Upper bound on the attacked misclassification probability."""
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise ValueError("delta must be non-negative")
    s = math.sqrt(_variance(w, L))
    m = np.asarray(y, dtype=np.float64) * (np.asarray(fx, dtype=np.float64) @ np.asarray(w) + b)
    return std_normal_cdf((-m + delta) / s)


def gap_bound(w, L, delta):
    """``delta / sqrt(2 pi w^T Sigma w)``."""
    delta = np.asarray(delta, dtype=np.float64)
    if np.any(delta < 0):
        raise ValueError("delta must be non-negative")
    out = delta / math.sqrt(2.0 * math.pi * _variance(w, L))
    return float(out) if out.ndim == 0 else out


def linear_delta_inf(w, eps: float) -> float:
    """Largest change of ``w^T x`` over an l-infinity ball: ``eps * |w|_1``."""
    if eps < 0:
        raise ValueError("eps must be non-negative")
    return float(eps * np.sum(np.abs(np.asarray(w, dtype=np.float64))))


def per_class_gap_bounds(W, L, delta) -> np.ndarray:
    """Heuristic multi-class diagnostic: the binary gap bound for each row of W.

    The bound is only proven for a single-output head.
    """
    return np.array([gap_bound(w, L, delta) for w in np.atleast_2d(W)])


# --------------------------------------------------------------------------
# Reports

BOUND_COLUMNS = ("eps", "delta_mean", "clean_misclass", "adv_upper", "gap_bound", "certified_floor",
                 "empirical_clean_acc", "empirical_attacked_acc", "slack", "floor_ok")


@dataclass
class BoundRow:
    eps: float
    delta_mean: float
    clean_misclass: float
    adv_upper: float
    gap_bound: float
    empirical_clean_acc: float
    empirical_attacked_acc: float
    slack: float

    @property
    def certified_floor(self) -> float:
        return 1.0 - self.clean_misclass - self.gap_bound

    @property
    def floor_ok(self) -> bool:
        return self.empirical_attacked_acc >= self.certified_floor - self.slack


@dataclass
class BoundReport:
    label: str
    rows: list[BoundRow] = field(default_factory=list)

    @property
    def violations(self) -> list[BoundRow]:
        return [r for r in self.rows if not r.floor_ok]

    def to_csv(self, header: str = "") -> str:
        buf = io.StringIO()
        buf.write(header)
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(BOUND_COLUMNS)
        for r in self.rows:
            w.writerow([repr(r.eps), repr(r.delta_mean), repr(r.clean_misclass), repr(r.adv_upper),
                        repr(r.gap_bound), repr(r.certified_floor), repr(r.empirical_clean_acc),
                        repr(r.empirical_attacked_acc), repr(r.slack), int(r.floor_ok)])
        return buf.getvalue()


def binomial_slack(p: float, n: int, k: float = 3.0) -> float:
    return k * math.sqrt(max(p * (1.0 - p), 0.0) / n)


def bound_row(eps, w_out, w_feat, b, L, F, y, clean_acc, attacked_acc, n_sigma: float = 3.0) -> BoundRow:
    """Averages of the per-example theory quantities at one budget.

    ``w_out`` is the weight vector the attack acts through (it sets
    ``delta = eps |w_out|_1``), ``w_feat`` the head weights in feature space.
    """
    delta = linear_delta_inf(w_out, eps)
    clean = clean_misclass_prob(w_feat, b, L, F, y)
    upper = adv_misclass_upper(w_feat, b, L, F, y, delta)
    gap = gap_bound(w_feat, L, delta)
    return BoundRow(
        eps=float(eps),
        delta_mean=delta,
        clean_misclass=float(np.mean(clean)),
        adv_upper=float(np.mean(upper)),
        gap_bound=float(gap),
        empirical_clean_acc=float(clean_acc),
        empirical_attacked_acc=float(attacked_acc),
        slack=binomial_slack(attacked_acc, len(y), n_sigma),
    )
