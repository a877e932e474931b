import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from wcalab import model as mdl
from wcalab import numerics as nm
from wcalab.numerics import DomainError, Rng
from wcalab.objective import (ObjectiveConfig, TrainConfig, format_train_log, gradients, sgd_step, total_loss,
                              train, wca_term, wca_value)

from helpers import FD_TOL, gradcheck


def test_wca_examples():
    assert wca_value(np.array([[1.0, 0.0]]), np.eye(2)) == 0.0
    L = np.array([[2.0, 0.0], [1.0, 2.0]])
    assert math.isclose(wca_value(np.array([[1.0, 0.0]]), L), 1.3862944, abs_tol=1e-7)
    W = np.array([[0.0, 1.0], [0.0, 1.0]])
    assert math.isclose(wca_value(W, np.diag([1.0, 3.0])), 4.394449, abs_tol=1e-6)


def test_wca_floor():
    with pytest.raises(DomainError):
        wca_value(np.array([[1.0, 0.0]]), np.zeros((2, 2)))


def test_wca_gradient():
    R = np.random.default_rng(0)
    worst = max(gradcheck(lambda t, W, L: wca_term(W, L), [R.normal(size=(3, 4)), R.normal(size=(4, 4))])
                for _ in range(20))
    assert worst <= FD_TOL


@given(st.floats(0.1, 10.0), st.integers(0, 2**31))
def test_wca_scale_invariance(c, seed):
    R = np.random.default_rng(seed)
    W, L = R.normal(size=(2, 3)), np.tril(R.normal(size=(3, 3))) + 2 * np.eye(3)
    assert math.isclose(wca_value(c * W, L / c), wca_value(W, L), rel_tol=1e-9, abs_tol=1e-9)


def test_wca_maximised_along_top_eigenvector():
    # unit w on a fine grid: the best direction is the top eigenvector of Sigma
    L = np.array([[2.0, 0.0], [1.5, 0.5]])
    sigma = L @ L.T
    ts = np.linspace(0, np.pi, 20001)
    vals = [wca_value(np.array([[np.cos(t), np.sin(t)]]), L) for t in ts]
    best = ts[int(np.argmax(vals))]
    top = nm.sym_eig(sigma)[1][:, 0]
    assert abs(abs(np.cos(best) * top[0] + np.sin(best) * top[1]) - 1.0) < 1e-6


def _toy(noise="anisotropic", binary=True):
    rng = Rng(0)
    X = np.concatenate([rng.gaussian((40, 2)) * 0.3 + 2, rng.gaussian((40, 2)) * 0.3 - 2])
    y = np.repeat([1, -1], 40) if binary else np.repeat([0, 1], 40)
    return X, y


def test_plain_loss_when_wca_off_and_no_penalty():
    X, y = _toy()
    m = mdl.create(Rng(1), 2, 2, binary=True)
    parts = total_loss(m, X, y, ObjectiveConfig(loss="hinge", lam=0.0, wca=False), U=np.zeros((80, 2)))
    s = X @ m.W[0] + m.b[0]
    assert math.isclose(float(parts.total.value), np.mean(np.maximum(0, 1 - y * s)), rel_tol=1e-12)


def test_both_terms_vanish():
    m = mdl.WcaNet([], np.array([[1.0, 0.0]]), np.zeros(1), np.eye(2))
    parts = total_loss(m, np.array([[3.0, 0.0]]), [1], ObjectiveConfig(loss="hinge", lam=0.0),
                       U=np.zeros((1, 2)))
    assert float(parts.total.value) == 0.0


def test_full_objective_gradient_two_class():
    rng = Rng(2)
    m = mdl.create(rng, 2, 2, hidden=(5,), d=2)
    m.L = np.array([[0.7, 0.0], [0.3, 0.5]])
    X, y = _toy(binary=False)
    U = rng.gaussian((80, 2))
    cfg = ObjectiveConfig(loss="cross_entropy", lam=1e-3)
    grads = gradients(m, total_loss(m, X, y, cfg, U=U, all_trainable=True))

    def f(L):
        new = m.copy()
        new.L = L
        return float(total_loss(new, X, y, cfg, U=U).total.value)

    fd = nm.finite_difference_gradient(f, m.L)
    assert np.linalg.norm(np.tril(grads["head.L"] - fd)) <= FD_TOL * np.linalg.norm(np.tril(fd))


def test_sgd_step_examples():
    m = mdl.WcaNet([], np.array([[1.0]]), np.zeros(1), np.zeros((1, 1)), noise="none")
    zero = {k: np.zeros_like(v) for k, v in m.parameters().items()}
    same = sgd_step(m, zero, 0.1)
    assert all(np.array_equal(a, b) for a, b in zip(m.parameters().values(), same.parameters().values()))
    # theta^2 with theta0 = 1: gradient 2, lr 0.1 -> 0.8
    step = sgd_step(m, {**zero, "head.W": 2 * m.W}, 0.1)
    assert step.W[0, 0] == pytest.approx(0.8)


def test_sgd_step_guards():
    m = mdl.create(Rng(0), 2, 2)
    bad = {k: np.full_like(v, np.nan) for k, v in m.parameters().items()}
    with pytest.raises(FloatingPointError):
        sgd_step(m, bad, 0.1)
    with pytest.raises(ValueError):
        sgd_step(m, {}, 0.0)


def test_sgd_step_keeps_L_lower_triangular():
    m = mdl.create(Rng(0), 3, 2)
    g = {k: np.ones_like(v) for k, v in m.parameters().items()}
    assert np.all(np.triu(sgd_step(m, g, 0.1).L, 1) == 0)


def test_hinge_loss_decreases_on_separable_blobs():
    X, y = _toy()
    m = mdl.create(Rng(4), 2, 2, binary=True, noise="none")
    cfg = ObjectiveConfig(loss="hinge", lam=0.0, wca=False)
    losses = []
    for _ in range(100):
        parts = total_loss(m, X, y, cfg)
        losses.append(float(parts.total.value))
        m = sgd_step(m, gradients(m, parts), 0.01)
    assert losses[-1] < losses[0]


def _norm_growth(lam, steps=300):
    X, y = _toy()
    m = mdl.create(Rng(5), 2, 2, binary=True)
    m.freeze_noise = True
    m.L = np.array([[1.0, 0.0], [0.5, 0.3]])
    cfg = ObjectiveConfig(loss="hinge", lam=lam)
    norms = []
    rng = Rng(6)
    for _ in range(steps):
        parts = total_loss(m, X, y, cfg, rng=rng)
        m = sgd_step(m, gradients(m, parts), 0.05)
        norms.append(np.linalg.norm(m.W))
    return np.array(norms)


def test_without_penalty_weights_grow():
    n = _norm_growth(0.0)
    assert np.all(np.diff(n[50:]) > 0)


def test_penalty_bounds_weights():
    n = _norm_growth(0.5, steps=600)
    assert n[-1] < 10 and abs(n[-1] - n[-100]) < 1e-2


def test_training_log_is_reproducible():
    X, y = _toy()
    out = []
    for _ in range(2):
        m = mdl.create(Rng(7), 2, 2, binary=True)
        _, rows = train(m, X, y, ObjectiveConfig(loss="hinge"), TrainConfig(epochs=3, batch_size=16, seed=3))
        out.append(format_train_log(rows, "# seed: 3\n"))
    assert out[0] == out[1]
    assert out[0].splitlines()[1] == "step,L_C,L_WCA,penalty,total,clean_accuracy"
    assert "\r" not in out[0]


def test_frozen_extractor_fast_path_matches_full_path():
    rng = Rng(8)
    X = rng.uniform((60, 4))
    y = np.where(X[:, 0] > 0.5, 1, -1)
    m = mdl.create(rng, 4, 2, d=3, binary=True)
    m.extractor = mdl.linear_feature_map(rng.uniform((3, 4), -1, 1), np.zeros(3))
    m.freeze_extractor = True
    cfg, tc = ObjectiveConfig(loss="hinge"), TrainConfig(epochs=2, batch_size=16)
    fast, _ = train(m, X, y, cfg, tc)
    slow, _ = train(m, X, y, cfg, tc, augment=lambda model, Xb, yb, r: (Xb, yb))
    np.testing.assert_allclose(fast.W, slow.W, atol=1e-12)
    np.testing.assert_allclose(fast.L, slow.L, atol=1e-12)
    assert fast.extractor[0].weight is m.extractor[0].weight
