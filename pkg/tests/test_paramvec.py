"""Flat parameter-vector algebra and the finite-difference oracles."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from metanssm.paramvec import (
    Layout,
    LayoutMismatchError,
    NonFiniteEvaluationError,
    ParamVector,
    axpy,
    fd_gradient,
    fd_hvp,
)

L2 = Layout.of([("w", (2,))])


def vec(values, layout=L2):
    return ParamVector(np.asarray(values, dtype=float), layout)


# -- layout ------------------------------------------------------------------

def test_layout_size_is_sum_of_shape_products():
    lay = Layout.of([("a", (2, 3)), ("b", (4,)), ("c", (1, 1, 5))])
    assert lay.size == 6 + 4 + 5


def test_views_share_memory_and_shapes():
    lay = Layout.of([("a", (2, 2)), ("b", (3,))])
    x = np.arange(7.0)
    views = lay.views(x)
    assert views["a"].shape == (2, 2)
    assert views["b"].shape == (3,)
    np.testing.assert_array_equal(views["a"], [[0.0, 1.0], [2.0, 3.0]])
    np.testing.assert_array_equal(views["b"], [4.0, 5.0, 6.0])


def test_pack_then_views_roundtrip_exactly():
    lay = Layout.of([("a", (3, 2)), ("b", (4,))])
    rng = np.random.default_rng(0)
    tensors = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=4)}
    flat = lay.pack(tensors)
    back = lay.views(flat)
    for name in tensors:
        np.testing.assert_array_equal(back[name], tensors[name])


def test_unflatten_then_pack_is_identity():
    lay = Layout.of([("a", (2, 3)), ("b", (5,))])
    v = ParamVector(np.random.default_rng(1).normal(size=lay.size), lay)
    np.testing.assert_array_equal(lay.pack(v.unflatten()), v.values)


def test_param_vector_rejects_wrong_length():
    with pytest.raises(ValueError):
        ParamVector(np.zeros(3), L2)


# -- algebra -----------------------------------------------------------------

def test_axpy_zero_scale_returns_y():
    y = vec([3.0, 4.0])
    out = axpy(0.0, vec([7.0, -2.0]), y)
    np.testing.assert_array_equal(out.values, y.values)


def test_axpy_additive_inverse_is_zero():
    v = vec([1.5, -2.5])
    out = axpy(1.0, v, -v)
    np.testing.assert_array_equal(out.values, [0.0, 0.0])


def test_axpy_forced_arithmetic():
    out = axpy(2.0, vec([1.0, 2.0]), vec([3.0, 4.0]))
    np.testing.assert_array_equal(out.values, [5.0, 8.0])


def test_axpy_layout_mismatch_names_first_differing_segment():
    other = Layout.of([("q", (2,))])
    with pytest.raises(LayoutMismatchError, match="q"):
        axpy(1.0, vec([1.0, 2.0]), ParamVector(np.zeros(2), other))


def test_axpy_is_bitwise_deterministic():
    x, y = vec([0.1, 0.2]), vec([0.3, 0.7])
    a = axpy(0.31, x, y).values
    b = axpy(0.31, x, y).values
    assert a.tobytes() == b.tobytes()


def test_dot_and_norm():
    v = vec([3.0, 4.0])
    assert v.dot(v) == 25.0
    assert v.norm() == 5.0


@st.composite
def vec_pairs(draw):
    n = draw(st.integers(min_value=1, max_value=8))
    lay = Layout.of([("w", (n,))])
    elems = st.floats(min_value=-1e6, max_value=1e6, allow_nan=False)
    x = draw(st.lists(elems, min_size=n, max_size=n))
    y = draw(st.lists(elems, min_size=n, max_size=n))
    return ParamVector(np.array(x), lay), ParamVector(np.array(y), lay)


@settings(max_examples=50, deadline=None)
@given(vec_pairs(), st.floats(min_value=-1e3, max_value=1e3, allow_nan=False))
def test_axpy_matches_dense_arithmetic(pair, a):
    x, y = pair
    out = axpy(a, x, y)
    np.testing.assert_array_equal(out.values, a * x.values + y.values)
    assert out.layout == x.layout


@settings(max_examples=50, deadline=None)
@given(vec_pairs())
def test_algebra_closure_preserves_layout(pair):
    x, y = pair
    for r in (x + y, x - y, 2.0 * x, x * 2.0, -x):
        assert r.layout == x.layout
        assert r.values.shape == x.values.shape


# -- fd_gradient -------------------------------------------------------------

def test_fd_gradient_of_half_square_norm_is_w():
    w = vec([3.0, -1.0])
    g = fd_gradient(lambda p: 0.5 * float(p.values @ p.values), w, h=1e-5)
    np.testing.assert_allclose(g.values, [3.0, -1.0], atol=1e-8)


def test_fd_gradient_of_constant_is_zero():
    g = fd_gradient(lambda p: 42.0, vec([0.3, 0.4]), h=1e-5)
    np.testing.assert_array_equal(g.values, [0.0, 0.0])


def test_fd_gradient_nonfinite_carries_offending_index():
    def f(p):
        return float("nan") if p.values[1] != 0.4 else 1.0

    with pytest.raises(NonFiniteEvaluationError) as exc:
        fd_gradient(f, vec([0.0, 0.4]), h=1e-5)
    assert exc.value.index == 1


def test_fd_gradient_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        fd_gradient(lambda p: 0.0, vec([1.0, 2.0]), h=0.0)


# -- fd_hvp ------------------------------------------------------------------

def test_fd_hvp_identity_hessian():
    out = fd_hvp(lambda p: p, vec([0.0, 0.0]), vec([1.0, 2.0]), h=1e-4)
    np.testing.assert_allclose(out.values, [1.0, 2.0], atol=1e-9)


def test_fd_hvp_diagonal_hessian():
    d = np.array([2.0, 5.0])

    def g(p):
        return ParamVector(d * p.values, p.layout)

    out = fd_hvp(g, vec([0.3, -0.7]), vec([1.0, 1.0]), h=1e-4)
    np.testing.assert_allclose(out.values, [2.0, 5.0], atol=1e-9)


def test_fd_hvp_layout_mismatch_rejected():
    other = Layout.of([("z", (2,))])
    with pytest.raises(LayoutMismatchError):
        fd_hvp(lambda p: p, vec([0.0, 0.0]), ParamVector(np.ones(2), other), h=1e-4)


@settings(max_examples=40, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_fd_hvp_symmetric_bilinear_form_on_quadratic(seed):
    # f(w) = w' M w / 2 with symmetric M: u' H v == v' H u up to rounding
    rng = np.random.default_rng(seed)
    n = 4
    lay = Layout.of([("w", (n,))])
    m = rng.normal(size=(n, n))
    m = m + m.T

    def g(p):
        return ParamVector(m @ p.values, lay)

    w = ParamVector(rng.normal(size=n), lay)
    u = ParamVector(rng.normal(size=n), lay)
    v = ParamVector(rng.normal(size=n), lay)
    uhv = u.dot(fd_hvp(g, w, v, h=1e-4))
    vhu = v.dot(fd_hvp(g, w, u, h=1e-4))
    assert uhv == pytest.approx(vhu, rel=1e-6, abs=1e-9)
