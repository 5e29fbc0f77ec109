import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from attnmixer import autodiff as ad
from attnmixer.errors import DomainError, NumericInputError, RankError, ShapeError


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out


def P(x, name="p"):
    return ad.parameter(np.array(x, dtype=float), name)


finite_rows = arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)),
                     elements=st.floats(-30, 30, allow_nan=False))


# ---------------------------------------------------------------- matmul

def test_matmul_identity_and_selector():
    b = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.matmul(np.eye(2), b).data, b)
    out = ad.matmul([[1.0, 0.0], [0.0, 0.0]], [[5.0, 6.0], [7.0, 8.0]]).data
    np.testing.assert_array_equal(out, [[5.0, 6.0], [0.0, 0.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    assert np.max(np.abs(ad.matmul(a, b).data - naive_matmul(a, b))) < 1e-12


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_associativity():
    rng = np.random.default_rng(1)
    a, b, c = (rng.uniform(-1, 1, (5, 5)) for _ in range(3))
    left = ad.matmul(a, ad.matmul(b, c)).data
    right = ad.matmul(ad.matmul(a, b), c).data
    assert np.max(np.abs(left - right)) < 1e-10


def test_matmul_gradients():
    rng = np.random.default_rng(2)
    a, b = P(rng.normal(size=(3, 4)), "a"), P(rng.normal(size=(4, 2)), "b")
    ad.sum(ad.matmul(a, b)).backward()
    np.testing.assert_allclose(a.grad, np.ones((3, 2)) @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ np.ones((3, 2)))


def test_flop_counter_counts_2mnk():
    with ad.count_flops() as c:
        ad.matmul(np.ones((3, 4)), np.ones((4, 5)))
    assert c.count == 2 * 3 * 4 * 5
    with ad.count_flops() as c:
        ad.matmul(np.ones((7, 3, 4)), np.ones((4, 5)))
    assert c.count == 7 * 2 * 3 * 4 * 5


def test_batched_matmul_matches_per_slice_and_sums_parameter_grads():
    rng = np.random.default_rng(3)
    xs = rng.normal(size=(4, 3, 5))
    w = P(rng.normal(size=(5, 2)), "w")
    out = ad.matmul(xs, w)
    for i in range(4):
        np.testing.assert_allclose(out.data[i], xs[i] @ w.data, atol=1e-14)
    ad.sum(out).backward()
    expected = sum(xs[i].T @ np.ones((3, 2)) for i in range(4))
    np.testing.assert_allclose(w.grad, expected, atol=1e-12)


# ---------------------------------------------------------------- transpose / affine

def test_transpose():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(ad.transpose(a).data, [[1.0, 3.0], [2.0, 4.0]])
    r = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(ad.transpose(ad.transpose(r)).data, r)
    p = P(r)
    ad.sum(ad.transpose(p)).backward()
    np.testing.assert_array_equal(p.grad, np.ones_like(r))


def test_transpose_rank_check():
    with pytest.raises(RankError):
        ad.transpose(np.ones(3))


def test_affine_cases():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(4, 3))
    np.testing.assert_array_equal(ad.affine(x, np.eye(3), np.zeros((1, 3))).data, x)
    b = rng.normal(size=(1, 2))
    np.testing.assert_array_equal(ad.affine(np.zeros((4, 3)), rng.normal(size=(3, 2)), b).data, np.repeat(b, 4, 0))
    w = rng.normal(size=(3, 2))
    assert np.max(np.abs(ad.affine(x, w, b).data - (naive_matmul(x, w) + b))) < 1e-12
    with pytest.raises(ShapeError):
        ad.affine(x, w, np.zeros((1, 3)))


# ---------------------------------------------------------------- softmax

def test_softmax_known_rows():
    out = ad.softmax_rows([[0.0, 0.0, 0.0]]).data
    np.testing.assert_allclose(out, [[1 / 3] * 3], atol=1e-15)
    out = ad.softmax_rows([[0.0, math.log(3.0)]]).data
    np.testing.assert_allclose(out, [[0.25, 0.75]], atol=1e-15)


def test_softmax_extreme_row_against_high_precision():
    mpmath.mp.dps = 50
    denom = 1 + mpmath.exp(-50)
    expected = [float(1 / denom), float(mpmath.exp(-50) / denom)]
    out = ad.softmax_rows([[0.0, -50.0]]).data[0]
    assert out[0] == pytest.approx(expected[0], abs=1e-15)
    assert out[1] == pytest.approx(expected[1], rel=1e-12)
    assert abs(out.sum() - 1.0) < 1e-12


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_softmax_rejects_non_finite(bad):
    with pytest.raises(NumericInputError):
        ad.softmax_rows([[0.0, bad]])


@settings(max_examples=60, deadline=None)
@given(finite_rows, st.floats(-100, 100))
def test_softmax_properties(logits, shift):
    p = ad.softmax_rows(logits).data
    assert np.all(p >= 0) and np.all(p <= 1)
    assert np.max(np.abs(p.sum(axis=-1) - 1.0)) < 1e-12
    shifted = logits.copy()
    shifted[0] += shift
    assert np.max(np.abs(ad.softmax_rows(shifted).data - p)) < 1e-12


# ---------------------------------------------------------------- layer norm

def test_layer_norm_cases():
    one, zero = np.ones((1, 3)), np.zeros((1, 3))
    np.testing.assert_array_equal(ad.layer_norm([[5.0, 5.0, 5.0]], one, zero).data, [[0.0, 0.0, 0.0]])
    out = ad.layer_norm([[1.0, -1.0]], np.ones((1, 2)), np.zeros((1, 2)), eps=0.0).data
    np.testing.assert_allclose(out, [[1.0, -1.0]], atol=1e-15)
    x = [1.0, 2.0, 3.0]
    mu = sum(x) / 3
    var = sum((v - mu) ** 2 for v in x) / 3
    expected = [(v - mu) / math.sqrt(var + 1e-5) for v in x]
    assert np.max(np.abs(ad.layer_norm([x], one, zero, 1e-5).data[0] - expected)) < 1e-10


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 8)), elements=st.floats(-50, 50)))
def test_layer_norm_moments(x):
    d = x.shape[1]
    out = ad.layer_norm(x, np.ones((1, d)), np.zeros((1, d))).data
    assert np.max(np.abs(out.mean(axis=1))) < 1e-10
    # output variance is var / (var + eps): within 1e-6 of 1 once var >= 10
    big = x.var(axis=1) >= 10.0
    if big.any():
        assert np.max(np.abs(out[big].var(axis=1) - 1.0)) < 1e-6


def test_layer_norm_variance_close_to_one_for_large_spread():
    x = np.random.default_rng(5).normal(scale=10.0, size=(6, 7))
    out = ad.layer_norm(x, np.ones((1, 7)), np.zeros((1, 7))).data
    assert np.max(np.abs(out.var(axis=1) - 1.0)) < 1e-6


# ---------------------------------------------------------------- elementwise

def test_elementwise_values():
    assert ad.elementwise("sigmoid", [[0.0]]).data[0, 0] == 0.5
    assert ad.elementwise("tanh", [[0.0]]).data[0, 0] == 0.0
    assert ad.elementwise("abs", [[-2.5]]).data[0, 0] == 2.5
    assert ad.elementwise("neg", [[2.0]]).data[0, 0] == -2.0
    assert ad.elementwise("square", [[3.0]]).data[0, 0] == 9.0
    assert ad.elementwise("scale", [[3.0]], 2.0).data[0, 0] == 6.0
    assert ad.elementwise("add", [[1.0]], [[2.0]]).data[0, 0] == 3.0
    assert ad.elementwise("sub", [[1.0]], [[2.0]]).data[0, 0] == -1.0
    assert ad.elementwise("mul", [[1.5]], [[2.0]]).data[0, 0] == 3.0
    assert ad.elementwise("log", [[1.0]]).data[0, 0] == 0.0


def test_log_domain_error():
    with pytest.raises(DomainError):
        ad.log([[1.0, 0.0]])
    with pytest.raises(DomainError):
        ad.log([[-1.0]])


def test_sigmoid_extremes_are_finite():
    out = ad.sigmoid([[-800.0, 800.0]]).data
    assert np.all(np.isfinite(out))
    assert out[0, 0] == 0.0 and out[0, 1] == 1.0


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))


# ---------------------------------------------------------------- backward

def test_backward_square():
    w = P([[3.0]], "w")
    grads = ad.square(w).backward()
    assert grads["w"][0, 0] == 6.0


def test_backward_linear_map():
    x = np.array([[1.0], [2.0], [3.0]])
    W = P(np.random.default_rng(0).normal(size=(2, 3)), "W")
    ad.sum(ad.matmul(W, x)).backward()
    np.testing.assert_array_equal(W.grad, np.outer(np.ones(2), x.ravel()))


def test_backward_rejects_non_scalar():
    with pytest.raises(RankError):
        ad.backward(ad.add(P(np.ones((2, 2))), 1.0))


def test_backward_shared_node_accumulates():
    w = P([[2.0]], "w")
    y = ad.mul(w, w)
    ad.sum(ad.add(y, y)).backward()
    assert w.grad[0, 0] == 8.0


def _toy_graph(seed):
    rng = np.random.default_rng(seed)
    ps = {n: P(rng.normal(size=s), n) for n, s in (("a", (3, 4)), ("b", (4, 4)), ("g", (1, 4)), ("c", (1, 4)))}

    def loss():
        h = ad.matmul(ps["a"], ps["b"])
        h = ad.layer_norm(h, ps["g"], ps["c"])
        m = ad.softmax_rows(ad.matmul(h, ad.transpose(h)))
        e = ad.mul(m, ad.log(ad.add(m, 1e-12)))
        t = ad.tanh(ad.sigmoid(ad.matmul(m, h)))
        return ad.add(ad.sum(ad.square(t)), ad.mean(ad.absolute(e)))

    return ps, loss


def test_backward_determinism_bitwise():
    ps, loss = _toy_graph(7)
    first = {n: g.copy() for n, g in loss().backward().items()}
    ad.zero_grad(ps.values())
    second = loss().backward()
    for n in first:
        assert np.array_equal(first[n], second[n])


# ---------------------------------------------------------------- grad_check

def test_grad_check_quadratic():
    w = P([[1.5, -0.3], [0.2, 2.0]], "w")
    assert ad.grad_check(lambda: ad.sum(ad.square(w)), {"w": w}, 1e-5) < 1e-8


PRIMITIVES = {
    "matmul": lambda a, b: ad.matmul(a, b),
    "transpose": lambda a, b: ad.matmul(ad.transpose(a), a),
    "affine": lambda a, b: ad.affine(a, b, ad.rows(b, 0, 1)),
    "softmax": lambda a, b: ad.softmax_rows(ad.matmul(a, b)),
    "layer_norm": lambda a, b: ad.layer_norm(a, ad.rows(ad.transpose(b), 0, 1), ad.rows(ad.transpose(b), 1, 2)),
    "add": lambda a, b: ad.add(a, ad.transpose(b)),
    "sub": lambda a, b: ad.sub(a, ad.transpose(b)),
    "mul": lambda a, b: ad.mul(a, ad.transpose(b)),
    "scale": lambda a, b: ad.scale(a, -1.7),
    "abs": lambda a, b: ad.absolute(a),
    "log": lambda a, b: ad.log(ad.add(ad.square(a), 0.5)),
    "neg": lambda a, b: ad.neg(a),
    "square": lambda a, b: ad.square(a),
    "sigmoid": lambda a, b: ad.sigmoid(a),
    "tanh": lambda a, b: ad.tanh(a),
    "mean": lambda a, b: ad.mean(a, axis=-1, keepdims=True),
    "rows": lambda a, b: ad.rows(a, 1, 3),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_grad_check_each_primitive(name):
    rng = np.random.default_rng(11)
    a = P(rng.uniform(0.2, 1.0, (3, 4)) * rng.choice([-1, 1], (3, 4)), "a")
    b = P(rng.normal(size=(4, 3)), "b")
    weights = rng.normal(size=PRIMITIVES[name](a, b).shape)

    def loss():
        return ad.sum(ad.mul(PRIMITIVES[name](a, b), weights))

    assert ad.grad_check(loss, {"a": a, "b": b}, 1e-5) < 1e-6


def test_grad_check_gru_sequence():
    rng = np.random.default_rng(12)
    H = 3
    xs = [P(rng.normal(size=(2, 4, H)), f"x{i}") for i in range(3)]
    us = [P(rng.normal(scale=0.5, size=(H, H)), f"u{i}") for i in range(3)]
    bs = [P(rng.normal(size=(1, H)), f"b{i}") for i in range(3)]
    weights = rng.normal(size=(2, 1, H))

    def loss():
        return ad.sum(ad.mul(ad.gru_sequence(*xs, *us, *bs), weights))

    assert ad.grad_check(loss, xs + us + bs, 1e-5) < 1e-6


def test_no_grad_builds_no_graph():
    w = P([[1.0]])
    with ad.no_grad():
        out = ad.square(w)
    assert not out.requires_grad
