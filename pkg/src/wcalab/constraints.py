"""Projected-subgradient alternative to the l2 penalty: each classifier row
is kept in an l2 ball and the noise covariance has its spectrum clipped."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import WcaNet
from .numerics import ShapeError, cholesky, sym_eig

CHOLESKY_JITTER = 1e-12


@dataclass(frozen=True)
class ProjectionConfig:
    gamma: float = 5.0  # l2 radius of each classifier row
    tau: float = 5.0  # largest admissible eigenvalue of Sigma

    def __post_init__(self):
        if self.gamma <= 0 or self.tau <= 0:
            raise ValueError("gamma and tau must be positive")


def project_row_l2(u: np.ndarray, gamma: float) -> np.ndarray:
    """Nearest point of the radius-``gamma`` l2 ball: ``u / max(1, |u|/gamma)``."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    u = np.asarray(u, dtype=np.float64)
    return u / max(1.0, float(np.linalg.norm(u)) / gamma)


def project_rows_l2(W: np.ndarray, gamma: float) -> np.ndarray:
    return np.stack([project_row_l2(row, gamma) for row in np.atleast_2d(W)])


def clip_spectrum(sigma: np.ndarray, tau: float) -> np.ndarray:
    """Eigendecompose, clip eigenvalues into [0, tau] and rebuild."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 2 or sigma.shape[0] != sigma.shape[1]:
        raise ShapeError(f"clip_spectrum needs a square matrix, got {sigma.shape}")
    vals, vecs = sym_eig(0.5 * (sigma + sigma.T))
    clipped = np.clip(vals, 0.0, tau)
    out = (vecs * clipped) @ vecs.T
    return 0.5 * (out + out.T)


def refactor(sigma: np.ndarray) -> np.ndarray:
    """Cholesky factor of a clipped covariance, with a tiny diagonal jitter."""
    d = sigma.shape[0]
    return cholesky(sigma + CHOLESKY_JITTER * np.eye(d))


def projected_update(model: WcaNet, grads: dict[str, np.ndarray], lr: float,
                     cfg: ProjectionConfig = ProjectionConfig()) -> WcaNet:
    """One projected-subgradient step.

    Extractor weights and the bias take a plain gradient step. Each row of
    ``W`` steps and is projected into the ``gamma`` ball. For the noise, the
    step is taken on ``L``; with ``Y = L_step^T`` the matrix ``Y^T Y`` equals
    the stepped covariance, which gets its spectrum clipped to ``[0, tau]``
    and is factorised again into a lower-triangular ``L``.
    """
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
    if model.trainable("head.W"):
        params["head.W"] = project_rows_l2(params["head.W"], cfg.gamma)
    new = model.with_parameters(params)
    if model.trainable("head.L"):
        Y = new.L.T
        sigma = clip_spectrum(Y.T @ Y, cfg.tau)
        if model.noise == "anisotropic":
            new.L = refactor(sigma)
        else:
            # diagonal and isotropic factors stay in their own families
            new.L = new.constrain_noise(np.diag(np.sqrt(np.clip(np.diag(sigma), 0.0, cfg.tau))))
    return new


def projected_updater(cfg: ProjectionConfig):
    """Adapter with the (model, grads, lr) signature used by ``objective.train``."""
    def update(model, grads, lr):
        return projected_update(model, grads, lr, cfg)
    return update
