import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from csmunet import scan
from oracles import sequential_ssm


def test_zoh_scalar():
    Abar, Bbar = scan.discretize_zoh(np.array([[-1.0]]), np.array([0.5]), np.array([1.0]))
    assert abs(Abar[0, 0] - math.exp(-0.5)) < 1e-15 and Bbar[0, 0] == 0.5


def test_zoh_small_timestep():
    Abar, Bbar = scan.discretize_zoh(np.array([[-1.0]]), np.array([1e-12]), np.array([3.0]))
    assert abs(Abar[0, 0] - 1) < 1e-11 and abs(Bbar[0, 0]) < 1e-11


def test_zoh_quarter():
    Abar, _ = scan.discretize_zoh(np.array([[-2.0]]), np.array([math.log(2)]), np.array([1.0]))
    assert abs(Abar[0, 0] - 0.25) < 1e-15


def test_zoh_rejects_nonpositive_timestep():
    with pytest.raises(scan.ParameterError):
        scan.discretize_zoh(np.array([[-1.0]]), np.array([0.0]), np.array([1.0]))


def test_modulation_endpoints(rng):
    d0 = rng.uniform(0.1, 1, (5, 3))
    B0 = rng.standard_normal((5, 4))
    d, B, _ = scan.modulate_params(d0, B0, np.zeros(5), np.ones(5))
    np.testing.assert_array_equal(d, d0)
    np.testing.assert_array_equal(B, 2 * B0)
    d, _, _ = scan.modulate_params(d0, B0, np.full(5, 0.8), None)
    np.testing.assert_allclose(d, 0.2 * d0, rtol=1e-12)


def test_modulation_floor():
    d, _, clamped = scan.modulate_params(np.ones((2, 1)), np.ones((2, 1)), np.array([1.0, 1.5]))
    assert clamped.all() and (d == scan.DELTA_FLOOR).all()


def _scalar_params(D=0.0):
    return {"W_delta": np.zeros((1, 1)), "b_delta": np.array([math.log(math.expm1(math.log(2)))]),
            "W_B": np.zeros((1, 1)), "W_C": np.zeros((1, 1)),
            "A_log": np.zeros((1, 1)), "D": np.array([D])}


def test_hand_recurrence():
    # B and C are token projections, so feed x through a scan with B = C = 1 directly
    x = np.ones((2, 1))
    delta = np.full((2, 1), math.log(2))
    y, _ = scan.ssm_forward(x, delta, np.array([[-1.0]]), np.ones((2, 1)), np.ones((2, 1)),
                            method="sequential")
    np.testing.assert_allclose(y[:, 0], [0.6931, 1.0397], atol=1e-4)


def test_single_step(rng):
    p = scan.init_params(rng, 3, 4, dtype=np.float64)
    tok = rng.standard_normal((1, 3))
    y = scan.selective_scan_seq(scan.ScanSequence(tok), p)
    d0, B0, Cm, _ = scan.project(tok, p)
    expect = (Cm[0] * B0[0]).sum() * d0[0] * tok[0] + p["D"] * tok[0]
    np.testing.assert_allclose(y[0], expect, rtol=1e-12)
    np.testing.assert_array_equal(scan.selective_scan_parallel(scan.ScanSequence(tok), p), y)


def test_zero_input(rng):
    p = scan.init_params(rng, 3, 4)
    assert not scan.selective_scan_seq(scan.ScanSequence(np.zeros((7, 3), np.float32)), p).any()


def test_identity_element(rng):
    a, b = rng.standard_normal(3), rng.standard_normal(3)
    one = (np.ones(3), np.zeros(3))
    for pair in (scan.combine(one, (a, b)), scan.combine((a, b), one)):
        np.testing.assert_array_equal(pair[0], a)
        np.testing.assert_array_equal(pair[1], b)


def test_combine_associative(rng):
    x, y, z = [(rng.standard_normal(4), rng.standard_normal(4)) for _ in range(3)]
    l = scan.combine(scan.combine(x, y), z)
    r = scan.combine(x, scan.combine(y, z))
    np.testing.assert_allclose(l[0], r[0], rtol=1e-12)
    np.testing.assert_allclose(l[1], r[1], rtol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 70), st.integers(1, 3), st.integers(1, 4), st.integers(0, 2 ** 31))
def test_methods_agree_with_loop_oracle(L, C, N, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((L, C))
    delta = rng.uniform(0.01, 0.5, (L, C))
    A = -rng.uniform(0.1, 2, (C, N))
    B = rng.standard_normal((L, N))
    Cm = rng.standard_normal((L, N))
    D = rng.standard_normal(C)
    ref = sequential_ssm(x, delta, A, B, Cm, D)
    for method in ("sequential", "parallel", "fused"):
        y, _ = scan.ssm_forward(x, delta, A, B, Cm, D, method)
        np.testing.assert_allclose(y, ref, atol=1e-10, rtol=1e-10)


@pytest.mark.parametrize("method", ["parallel", "fused"])
def test_backward_matches_sequential(rng, method):
    p = scan.init_params(rng, 3, 4, dtype=np.float64)
    seq = scan.ScanSequence(rng.standard_normal((2, 11, 3)), rng.uniform(0, 0.9, (2, 11)),
                            rng.uniform(0, 1, (2, 11)))
    go = rng.standard_normal((2, 11, 3))
    ref = scan.scan_backward(scan.scan_forward(seq, p, "sequential")[1], go)
    got = scan.scan_backward(scan.scan_forward(seq, p, method)[1], go)
    for k in ref:
        np.testing.assert_allclose(got[k], ref[k], rtol=1e-9, atol=1e-12)


def test_dead_output_path_has_zero_token_grad(rng):
    p = scan.init_params(rng, 3, 4, dtype=np.float64)
    p["W_C"][:] = 0
    p["D"][:] = 0
    seq = scan.ScanSequence(rng.standard_normal((6, 3)))
    g = scan.scan_backward(scan.scan_forward(seq, p)[1], rng.standard_normal((6, 3)))
    assert not g["tokens"].any()


def test_enhance_grad_zero_without_input_projection(rng):
    p = scan.init_params(rng, 3, 4, dtype=np.float64)
    p["W_B"][:] = 0
    seq = scan.ScanSequence(rng.standard_normal((6, 3)), None, rng.uniform(size=6))
    g = scan.scan_backward(scan.scan_forward(seq, p)[1], rng.standard_normal((6, 3)))
    assert not g["E"].any()


def test_backward_without_cache():
    with pytest.raises(scan.ScanStateError):
        scan.scan_backward(None, np.zeros(1))


def test_unknown_method():
    with pytest.raises(ValueError):
        scan.linear_recurrence(np.ones((2, 1, 1)), np.ones((2, 1, 1)), "magic")
