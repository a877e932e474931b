import numpy as np
import pytest

from wcalab import model as mdl
from wcalab import numerics as nm
from wcalab.model import ContractError, Deterministic, Stochastic
from wcalab.numerics import Rng
from wcalab.objective import ObjectiveConfig, gradients, total_loss

from helpers import FD_TOL, rel_err


def linear_head(w, b=0.0, L=None, noise="anisotropic"):
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    c, d = w.shape
    L = np.zeros((d, d)) if L is None else np.asarray(L, dtype=np.float64)
    b = np.broadcast_to(np.asarray(b, dtype=np.float64), (c,)).copy()
    return mdl.WcaNet([], w, b, L, noise=noise)


def sample_cov(L, n, seed=0):
    rng = Rng(seed)
    model = linear_head(np.ones((1, L.shape[0])), L=L)
    Z = rng.gaussian((n, L.shape[0])) @ model.L.T
    return Z.T @ Z / n


def test_sample_noise_zero_factor():
    m = linear_head([1.0, 0.0])
    assert np.all(mdl.sample_noise(m, Rng(0)) == 0)


@pytest.mark.parametrize("L", [np.eye(2), np.array([[2.0, 0.0], [1.0, 2.0]])])
def test_reparameterised_covariance(L):
    cov = sample_cov(L, 200_000)
    sigma = L @ L.T
    assert np.linalg.norm(cov - sigma) <= 0.05 * max(1.0, np.linalg.norm(sigma))


def test_sample_noise_is_L_times_u():
    L = np.array([[2.0, 0.0], [1.0, 2.0]])
    m = linear_head([1.0, 0.0], L=L)
    u = Rng(5).gaussian(2)
    np.testing.assert_allclose(mdl.sample_noise(m, Rng(5)), L @ u)


def test_zero_noise_stochastic_equals_deterministic():
    m = linear_head([[1.0, -2.0], [0.5, 0.5]], b=[0.1, 0.2])
    X = np.array([[0.3, 0.4], [1.0, -1.0]])
    np.testing.assert_array_equal(m.logits(X, Stochastic(1), Rng(0)), m.logits(X))


def test_averaged_logits_approach_deterministic():
    L = np.array([[1.0, 0.0], [0.5, 1.0]])
    m = linear_head([[1.0, -1.0], [0.2, 0.7]], L=L)
    x = np.array([0.3, 0.1])
    det = mdl.forward(m, x)
    gap1 = np.mean([np.linalg.norm(mdl.forward(m, x, Stochastic(1), Rng(s)) - det) for s in range(200)])
    gap1000 = np.mean([np.linalg.norm(mdl.forward(m, x, Stochastic(1000), Rng(s)) - det) for s in range(200)])
    # n^-1/2 scaling predicts a ratio near sqrt(1000) ~ 31.6
    assert 20 < gap1 / gap1000 < 45


def test_unit_forward():
    m = linear_head([1.0, 0.0, 0.0])
    assert mdl.forward(m, [1.0, 0.0, 0.0])[0] == 1.0


def test_margin_values_and_contract():
    m = linear_head([2.0])
    assert mdl.margin(m, [1.0], 1) == 2.0
    assert mdl.margin(m, [1.0], -1) == -2.0
    with pytest.raises(ContractError):
        mdl.margin(linear_head(np.eye(2)), [1.0, 0.0], 1)


def test_margin_distribution_moments():
    L = np.array([[1.0, 0.0], [0.6, 0.8]])
    w = np.array([1.5, -0.5])
    m = linear_head(w, b=0.2, L=L)
    x = np.array([0.4, 0.9])
    n = 100_000
    X = np.repeat(x[None, :], n, axis=0)
    s = mdl.batch_margins(m, X, -np.ones(n), Stochastic(1), Rng(11))
    mean, var = -(w @ x + 0.2), w @ L @ L.T @ w
    assert abs(s.mean() - mean) <= 4 * np.sqrt(var / n)
    assert abs(s.var() - var) <= 4 * var * np.sqrt(2.0 / n)


def test_multiclass_margin_is_true_minus_best_other():
    z = np.array([[3.0, 1.0, 2.0], [0.0, 5.0, 5.0]])
    np.testing.assert_allclose(mdl.margins_from_logits(z, [0, 2]), [1.0, 0.0])


def test_dimension_mismatch():
    m = linear_head([1.0, 0.0])
    with pytest.raises(nm.ShapeError):
        m.logits(np.ones((1, 3)))


def test_create_defaults():
    m = mdl.create(Rng(0), 10, 3, hidden=(6,))
    assert m.d == 8 and m.n_classes == 3
    np.testing.assert_array_equal(m.L, 0.1 * np.eye(8))
    with pytest.raises(ValueError):
        mdl.create(Rng(0), 10, 5, hidden=(6,), d=3)


def test_noise_families_are_enforced():
    A = np.arange(9.0).reshape(3, 3)
    m = mdl.create(Rng(0), 3, 2, noise="anisotropic")
    assert np.all(np.triu(m.constrain_noise(A), 1) == 0)
    iso = mdl.create(Rng(0), 3, 2, noise="isotropic")
    np.testing.assert_array_equal(iso.constrain_noise(A), 4.0 * np.eye(3))


def test_two_layer_gradients_with_frozen_draws():
    rng = Rng(3)
    m = mdl.create(rng, 5, 3, hidden=(7,), d=4)
    m.L = np.tril(rng.uniform((4, 4), -0.5, 0.5)) + np.eye(4)
    X = rng.uniform((6, 5), -1, 1)
    y = np.array([0, 1, 2, 0, 1, 2])
    U = rng.gaussian((6, 4))
    cfg = ObjectiveConfig(loss="cross_entropy", lam=1e-2)
    parts = total_loss(m, X, y, cfg, U=U, all_trainable=True)
    grads = gradients(m, parts)
    for name, value in m.parameters().items():
        def f(v, name=name):
            p = dict(m.parameters())
            p[name] = v
            new = m.copy()
            for i, layer in enumerate(new.extractor):
                layer.weight, layer.bias = p[f"extractor.{i}.weight"], p[f"extractor.{i}.bias"]
            new.W, new.b, new.L = p["head.W"], p["head.b"], p["head.L"]
            return float(total_loss(new, X, y, cfg, U=U).total.value)
        fd = nm.finite_difference_gradient(f, value)
        if name == "head.L":
            fd = np.tril(fd)
            grads[name] = np.tril(grads[name])
        assert rel_err(grads[name], fd) <= FD_TOL, name


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = mdl.create(Rng(9), 6, 3, hidden=(5,), d=4, noise="diagonal")
    m.meta["note"] = "x"
    path = mdl.save(m, tmp_path / "m.npz")
    back = mdl.load(path)
    for (k, a), (_, b) in zip(m.parameters().items(), back.parameters().items()):
        assert a.tobytes() == b.tobytes(), k
    assert back.noise == "diagonal" and back.meta == {"note": "x"}


def test_deterministic_forward_ignores_rng():
    m = mdl.create(Rng(1), 4, 2, hidden=(3,))
    X = np.ones((2, 4))
    np.testing.assert_array_equal(m.logits(X, Deterministic(), Rng(1)), m.logits(X, Deterministic(), Rng(2)))
