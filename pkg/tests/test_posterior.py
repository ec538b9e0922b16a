import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from csmunet import posterior
from oracles import all_pairs_edt


def _inv_softplus(y):
    return math.log(math.expm1(y))


def test_dt_all_true_is_zero():
    assert posterior.distance_transform(np.ones((5, 6), bool)).max() == 0.0


def test_dt_three_four_five():
    m = np.zeros((6, 6), bool)
    m[0, 0] = True
    assert posterior.distance_transform(m)[3, 4] == 5.0


def test_dt_two_seeds():
    m = np.zeros((3, 10), bool)
    m[0, 0] = m[0, 9] = True
    assert posterior.distance_transform(m)[0, 5] == 4.0


def test_dt_empty_mask_sentinel_and_warning():
    with pytest.warns(posterior.EmptyMaskWarning):
        d = posterior.distance_transform(np.zeros((3, 4), bool))
    np.testing.assert_array_equal(d, 5.0)
    d, flags = posterior.distance_transform(np.zeros((2, 3, 4), bool), return_flag=True)
    assert flags.tolist() == [True, True]


@settings(max_examples=40, deadline=None)
@given(arrays(bool, st.tuples(st.integers(1, 12), st.integers(1, 12))))
def test_dt_matches_brute_force(mask):
    if not mask.any():
        mask[0, 0] = True
    np.testing.assert_allclose(posterior.distance_transform(mask), all_pairs_edt(mask), atol=1e-12)


def _params(alpha=0.3, gamma=1.0, tau=0.5):
    return posterior.init_params(np.random.default_rng(0), alpha=alpha, gamma=gamma, tau=tau,
                                 dtype=np.float64)


def test_prior_on_set_is_one():
    M = np.zeros((5, 5))
    M[2, 2] = 0.9
    d = posterior.geometric_prior(M, _params())
    assert d[2, 2] == 1.0


def test_prior_ln2_at_distance_one():
    M = np.zeros((5, 5))
    M[2, 2] = 0.9
    d = posterior.geometric_prior(M, _params(alpha=math.log(2)))
    assert abs(d[2, 3] - 0.5) < 1e-12


def test_prior_small_alpha_is_flat():
    p = _params()
    p["alpha"] = np.asarray(-60.0)  # softplus -> ~1e-26
    M = np.zeros((5, 5))
    M[0, 0] = 0.9
    np.testing.assert_allclose(posterior.geometric_prior(M, p), 1.0, atol=1e-12)


def _const_mlps(p, q=1.0, k=1.0):
    for name, v in (("q", q), ("k", k)):
        p[f"{name}_w1"][:] = 0
        p[f"{name}_b1"][:] = 0
        p[f"{name}_w2"][:] = 0
        p[f"{name}_b2"] = np.asarray(v)
    return p


def test_likelihood_unit():
    p = _const_mlps(_params())
    M = np.random.default_rng(1).uniform(size=(4, 4))
    np.testing.assert_allclose(posterior.attention_likelihood(M, M, p), 1.0, rtol=1e-12)


def test_likelihood_gamma_scaling(rng):
    p1 = _params(gamma=1.0)
    p2 = dict(p1, gamma=np.asarray(_inv_softplus(2.0)))
    M = rng.uniform(size=(4, 4))
    d = rng.uniform(size=(4, 4))
    np.testing.assert_allclose(posterior.attention_likelihood(M, d, p2),
                               posterior.attention_likelihood(M, d, p1) / 2, rtol=1e-12)


def test_likelihood_zero_weights():
    p = _const_mlps(_params(), 0.0, 0.0)
    assert np.abs(posterior.attention_likelihood(np.ones((3, 3)), np.ones((3, 3)), p)).max() == 0


def test_uniform_likelihood_gives_normalised_prior(rng):
    p = _const_mlps(_params(), 2.0, 1.5)
    M = rng.uniform(size=(8, 8))
    re = posterior.boundary_posterior(M, p)
    np.testing.assert_allclose(re.P_b, posterior.minmax_norm(posterior.geometric_prior(M, p)),
                               atol=1e-12)


def test_retain_enhance_endpoints(rng):
    p = _params()
    re = posterior.boundary_posterior(rng.uniform(size=(8, 8)), p)
    top = np.unravel_index(np.argmax(re.P_b), re.P_b.shape)
    low = np.unravel_index(np.argmin(re.P_b), re.P_b.shape)
    assert re.P_b[top] == 1.0 and re.P_b[low] == 0.0
    assert abs(re.R[top]) < 1e-12 and abs(re.E[top] - 1.2) < 1e-6
    assert abs(re.R[low] - 0.8) < 1e-6 and re.E[low] == 0.0


def test_minmax_constant_is_zero():
    assert posterior.minmax_norm(np.full((3, 3), 7.0)).max() == 0.0


def test_minmax_is_per_image(rng):
    x = rng.standard_normal((3, 5, 5))
    y = posterior.minmax_norm(x)
    assert np.allclose(y.min(axis=(1, 2)), 0) and np.allclose(y.max(axis=(1, 2)), 1)
