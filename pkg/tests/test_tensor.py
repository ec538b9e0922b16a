import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from csmunet import _fpmode
from csmunet.tensor import (DimensionError, OracleError, conv2d, conv2d_backward, ew,
                            finite_diff_grad, rel_error)
from oracles import direct_conv2d


def test_sigmoid_of_zero():
    assert ew("sigmoid", np.array(0.0)) == 0.5


def test_clip_to_upper_bound():
    assert ew("clip", np.array(0.6065), lo=0.0, hi=0.5) == 0.5


def test_exp_identities():
    np.testing.assert_allclose(ew("exp", np.array([0.0, math.log(2)])), [1.0, 2.0], rtol=1e-15)


def test_exp_is_guarded_against_overflow():
    assert np.isfinite(ew("exp", np.array([1e4], dtype=np.float32))).all()


def test_sigmoid_extremes_stay_finite():
    out = ew("sigmoid", np.array([-1e4, 1e4]))
    assert np.isfinite(out).all() and out[0] >= 0 and out[1] <= 1


def test_broadcast_per_channel_vector():
    a = np.ones((3, 2, 2))
    out = ew("mul", a, np.array([1.0, 2.0, 3.0]))
    np.testing.assert_array_equal(out[:, 0, 0], [1, 2, 3])


def test_shape_mismatch_is_dimension_error():
    with pytest.raises(DimensionError):
        ew("add", np.ones((2, 3)), np.ones((3, 2)))


@given(arrays(np.float64, st.integers(1, 24), elements=st.floats(-50, 50)))
def test_ew_ignores_shape_metadata(x):
    a = ew("sigmoid", x.reshape(-1, 1))
    b = ew("sigmoid", x)
    np.testing.assert_array_equal(a.reshape(-1), b)


def test_depthwise_all_ones_on_constant_image():
    out = conv2d(np.ones((1, 5, 5)), np.ones((1, 3, 3)), "depthwise")
    assert out[0, 2, 2] == 9.0


def test_pointwise_identity():
    x = np.random.default_rng(0).standard_normal((4, 5, 6))
    np.testing.assert_array_equal(conv2d(x, np.eye(4), "pointwise"), x)


@pytest.mark.parametrize("k", [1, 3, 5, 7])
def test_depthwise_delta_kernel_is_identity(k):
    x = np.random.default_rng(k).standard_normal((2, 3, 9, 8))
    kern = np.zeros((3, k, k))
    kern[:, k // 2, k // 2] = 1
    np.testing.assert_array_equal(conv2d(x, kern, "depthwise"), x)


def test_depthwise_matches_direct_loops():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 7, 6))
    k = rng.standard_normal((2, 5, 5))
    out = conv2d(x, k, "depthwise")
    for c in range(2):
        np.testing.assert_allclose(out[c], direct_conv2d(x[c], k[c]), atol=1e-12)


def test_dense_matches_sum_of_depthwise():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((3, 6, 6))
    k = rng.standard_normal((2, 3, 3, 3))
    out = conv2d(x, k, "dense")
    ref = np.stack([sum(direct_conv2d(x[c], k[o, c]) for c in range(3)) for o in range(2)])
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_channel_mismatch():
    with pytest.raises(DimensionError):
        conv2d(np.ones((3, 4, 4)), np.ones((2, 3, 3)), "depthwise")
    with pytest.raises(DimensionError):
        conv2d(np.ones((3, 4, 4)), np.ones((2, 4)), "pointwise")


def test_even_kernel_rejected():
    with pytest.raises(DimensionError):
        conv2d(np.ones((1, 4, 4)), np.ones((1, 2, 2)), "depthwise")


def test_same_padding_preserves_shape():
    x = np.ones((2, 3, 5, 7), dtype=np.float32)
    for k in (3, 5, 7):
        out = conv2d(x, np.ones((3, k, k), np.float32), "depthwise")
        assert out.shape == x.shape and out.dtype == np.float32


@pytest.mark.parametrize("mode,kshape", [("depthwise", (2, 3, 3)), ("pointwise", (3, 2)),
                                         ("dense", (3, 2, 3, 3))])
def test_conv_backward_matches_finite_differences(mode, kshape):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 2, 5, 4))
    k = rng.standard_normal(kshape)
    go = rng.standard_normal(conv2d(x, k, mode).shape)
    gx, gk = conv2d_backward(x, k, go, mode)
    nx = finite_diff_grad(lambda t: (conv2d(t, k, mode) * go).sum(), x, 1e-6)
    nk = finite_diff_grad(lambda t: (conv2d(x, t, mode) * go).sum(), k, 1e-6)
    assert rel_error(gx, nx) < 1e-8
    assert rel_error(gk, nk) < 1e-8


def test_finite_diff_square():
    g = finite_diff_grad(lambda x: float((x ** 2).sum()), np.array([3.0]))
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_diff_of_sum_is_ones():
    x = np.random.default_rng(1).standard_normal((3, 4))
    np.testing.assert_allclose(finite_diff_grad(lambda t: t.sum(), x), np.ones_like(x), atol=1e-9)


def test_finite_diff_of_linear_functional_is_exact():
    rng = np.random.default_rng(2)
    w = rng.standard_normal((4, 3))
    x = rng.standard_normal((4, 3))
    np.testing.assert_allclose(finite_diff_grad(lambda t: (w * t).sum(), x), w, atol=1e-9)


def test_finite_diff_non_finite_raises():
    with pytest.raises(OracleError):
        finite_diff_grad(lambda t: float("inf"), np.zeros(2))


def test_finite_diff_of_sequential_scan_matches_adjoint():
    from csmunet import scan
    rng = np.random.default_rng(3)
    p = scan.init_params(rng, 2, 3, dtype=np.float64)
    tok = rng.standard_normal((8, 2))
    go = rng.standard_normal((8, 2))
    _, cache = scan.scan_forward(scan.ScanSequence(tok), p, "sequential")
    g = scan.scan_backward(cache, go)
    num = finite_diff_grad(
        lambda t: (scan.selective_scan_seq(scan.ScanSequence(t), p) * go).sum(), tok, 1e-6)
    assert rel_error(g["tokens"], num) < 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 9), st.integers(3, 9), st.sampled_from([3, 5, 7]))
def test_delta_kernel_identity_property(h, w, k):
    x = np.random.default_rng(h * 31 + w).standard_normal((1, h, w))
    kern = np.zeros((1, k, k))
    kern[0, k // 2, k // 2] = 1
    np.testing.assert_array_equal(conv2d(x, kern, "depthwise"), x)


@pytest.mark.skipif(not _fpmode._supported, reason="flush-to-zero control is x86-64 only")
def test_flush_subnormals_is_scoped():
    tiny = np.full(4, 1e-39, dtype=np.float32)
    assert (tiny * np.float32(1)).all()
    with _fpmode.flush_subnormals():
        assert not (tiny * np.float32(1)).any()
        assert (np.full(4, 1e-30, dtype=np.float32) * np.float32(1)).all()
    assert (tiny * np.float32(1)).all()
