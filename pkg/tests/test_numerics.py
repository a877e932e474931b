import numpy as np
import pytest
from hypothesis import given, strategies as st

from wcalab import numerics as nm
from wcalab.numerics import DomainError, FactorizationError, Rng, ShapeError

from helpers import FD_TOL, gradcheck

R = np.random.default_rng(1234)


def scalar(out):
    """Scalarise any node: linear + quadratic terms so every entry matters."""
    return nm.add(nm.sum(out), nm.scale(nm.sumsq(out), 0.5))


def _away(x, lo=0.05):
    return np.where(np.abs(x) < lo, lo * np.sign(x + 1e-300) + x, x)


PRIMITIVES = {
    "matmul": (lambda t, a, b: scalar(nm.matmul(a, b)), lambda: [R.normal(size=(5, 4)), R.normal(size=(4, 3))]),
    "add": (lambda t, a, b: scalar(nm.add(a, b)), lambda: [R.normal(size=(4, 3)), R.normal(size=3)]),
    "sub": (lambda t, a, b: scalar(nm.sub(a, b)), lambda: [R.normal(size=(4, 3)), R.normal(size=(4, 3))]),
    "scale": (lambda t, a: scalar(nm.scale(a, -1.7)), lambda: [R.normal(size=(3, 2))]),
    "transpose": (lambda t, a: scalar(nm.matmul(nm.transpose(a), t.const(np.arange(6.0).reshape(3, 2)))),
                  lambda: [R.normal(size=(3, 4))]),
    "repeat_rows": (lambda t, a: scalar(nm.repeat_rows(a, 3)), lambda: [R.normal(size=(2, 3))]),
    "relu": (lambda t, a: scalar(nm.relu(a)), lambda: [_away(R.normal(size=(4, 3)))]),
    "log": (lambda t, a: scalar(nm.log(a)), lambda: [R.uniform(0.5, 3.0, size=(3, 3))]),
    "sum": (lambda t, a: nm.scale(nm.sum(a), 2.0), lambda: [R.normal(size=(3, 2))]),
    "mean": (lambda t, a: scalar(nm.mean(a)), lambda: [R.normal(size=(3, 2))]),
    "sumsq": (lambda t, a: nm.sumsq(a), lambda: [R.normal(size=(3, 2))]),
    "row_sumsq": (lambda t, a: scalar(nm.row_sumsq(a)), lambda: [R.normal(size=(4, 3))]),
    "quad_form": (lambda t, w, s: scalar(nm.quad_form(w, s)), lambda: [R.normal(size=(2, 3)), R.normal(size=(3, 3))]),
    "group_mean": (lambda t, a: scalar(nm.group_mean(a, 2)), lambda: [R.normal(size=(6, 3))]),
    "softmax_cross_entropy": (lambda t, z: nm.softmax_cross_entropy(z, [0, 2, 1, 1]), lambda: [R.normal(size=(4, 3))]),
    "hinge": (lambda t, s: nm.hinge(s, [1, -1, 1, -1, 1]), lambda: [_hinge_scores()]),
    "logit_margin": (lambda t, z: scalar(nm.logit_margin(z, [0, 2, 1])), lambda: [_untied(3, 4)]),
}


def _hinge_scores():
    s = R.normal(scale=2.0, size=(5, 1))
    y = np.array([1, -1, 1, -1, 1.0])[:, None]
    slack = 1 - y * s
    return np.where(np.abs(slack) < 0.05, s + 0.2 * y, s)


def _untied(n, c):
    while True:
        z = R.normal(size=(n, c))
        top = np.sort(z, axis=1)
        if np.all(np.diff(top, axis=1) > 0.05):
            return z


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    build, make = PRIMITIVES[name]
    worst = max(gradcheck(build, make()) for _ in range(20))
    assert worst <= FD_TOL, f"{name}: {worst:.2e}"


def test_matmul_examples():
    a = R.normal(size=(3, 3))
    t = nm.Tape()
    np.testing.assert_array_equal(nm.matmul(t.const(np.eye(3)), a).value, a)
    out = nm.matmul(t.const([[1.0, 2.0], [3.0, 4.0]]), t.const([[0.0], [1.0]]))
    np.testing.assert_array_equal(out.value, [[2.0], [4.0]])
    with pytest.raises(ShapeError):
        nm.matmul(t.const(np.ones((2, 3))), t.const(np.ones((2, 3))))


def test_relu_subgradient():
    t = nm.Tape()
    x = t.var([-1.0, 2.0, 0.0])
    g, = t.gradients(nm.sum(nm.relu(x)), [x])
    np.testing.assert_array_equal(g, [0.0, 1.0, 0.0])


def test_quad_form_gradient_identity():
    t = nm.Tape()
    w = t.var([1.0, 0.0])
    sigma = np.array([[4.0, 2.0], [2.0, 5.0]])
    g, = t.gradients(nm.quad_form(w, t.const(sigma)), [w])
    np.testing.assert_allclose(g, [8.0, 4.0])


def test_backward_rejects_non_scalar():
    t = nm.Tape()
    x = t.var(np.ones(3))
    with pytest.raises(ShapeError):
        t.backward(nm.relu(x))


def test_log_domain():
    t = nm.Tape()
    with pytest.raises(DomainError):
        nm.log(t.var([1.0, 0.0]))


def test_fan_out_accumulates():
    # x used twice: d/dx (x*2 + x*3) summed = 5
    t = nm.Tape()
    x = t.var(np.array([1.0, -2.0]))
    g, = t.gradients(nm.sum(nm.add(nm.scale(x, 2.0), nm.scale(x, 3.0))), [x])
    np.testing.assert_allclose(g, [5.0, 5.0])


# -- random numbers ---------------------------------------------------------

def test_gaussian_determinism():
    a = nm.gaussian(Rng(42), 2)
    b = nm.gaussian(Rng(42), 2)
    np.testing.assert_array_equal(a, b)


def test_gaussian_moments():
    z = nm.gaussian(Rng(7), 100_000)
    assert -0.02 <= z.mean() <= 0.02
    assert 0.97 <= z.var() <= 1.03


def test_gaussian_rejects_empty():
    with pytest.raises(ValueError):
        nm.gaussian(Rng(0), 0)


def test_spawned_streams_differ_and_repeat():
    r = Rng(3)
    assert not np.array_equal(r.spawn(1).gaussian(4), r.spawn(2).gaussian(4))
    np.testing.assert_array_equal(Rng(3, (1,)).gaussian(4), Rng(3).spawn(1).gaussian(4))


def test_known_stream_is_frozen():
    # pins the generator: a change of algorithm or seeding breaks this
    expected = [-0.1656472506323414, 0.02991348726724718, 0.6482145914671419]
    assert Rng(0).gaussian(3).tolist() == expected


# -- factorizations ---------------------------------------------------------

def test_cholesky_examples():
    L = nm.cholesky(np.array([[4.0, 2.0], [2.0, 5.0]]))
    np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, 2.0]], atol=1e-12)
    np.testing.assert_array_equal(nm.cholesky(np.eye(4)), np.eye(4))
    with pytest.raises(FactorizationError):
        nm.cholesky(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_cholesky_rejects_asymmetric():
    with pytest.raises(ShapeError):
        nm.cholesky(np.array([[1.0, 0.5], [0.0, 1.0]]))


@given(st.integers(1, 12), st.integers(0, 2**31))
def test_cholesky_inverts_gram(d, seed):
    g = np.random.default_rng(seed)
    L = np.tril(g.normal(size=(d, d)))
    L[np.diag_indices(d)] = g.uniform(0.2, 2.0, size=d)
    np.testing.assert_allclose(nm.cholesky(L @ L.T), L, atol=1e-9)


def test_sym_eig_examples():
    vals, vecs = nm.sym_eig(np.diag([4.0, 1.0]))
    np.testing.assert_allclose(vals, [4.0, 1.0])
    np.testing.assert_allclose(np.abs(vecs), np.eye(2))
    vals, _ = nm.sym_eig(np.array([[2.0, 1.0], [1.0, 2.0]]))
    np.testing.assert_allclose(vals, [3.0, 1.0], atol=1e-12)
    A = R.normal(size=(8, 8))
    S = A @ A.T
    vals, vecs = nm.sym_eig(S)
    assert np.linalg.norm(vecs * vals @ vecs.T - S) <= 1e-8


def test_sym_eig_rejects_asymmetric():
    with pytest.raises(ShapeError):
        nm.sym_eig(np.array([[1.0, 2.0], [0.0, 1.0]]))


@given(st.integers(2, 32), st.integers(0, 2**31))
def test_sym_eig_reconstructs_random_psd(d, seed):
    A = np.random.default_rng(seed).normal(size=(d, d))
    S = A @ A.T
    vals, vecs = nm.sym_eig(S)
    assert np.linalg.norm(vecs * vals @ vecs.T - S) <= 1e-8
    assert np.linalg.norm(vecs.T @ vecs - np.eye(d)) <= 1e-8
    assert np.all(np.diff(vals) <= 0)


def test_sym_eig_matches_characteristic_roots():
    S = np.array([[3.0, 1.0, 0.0], [1.0, 3.0, 1.0], [0.0, 1.0, 3.0]])
    roots = np.sort(np.roots(np.poly(S)).real)[::-1]
    np.testing.assert_allclose(nm.sym_eig(S)[0], roots, atol=1e-10)
