"""Boundary posterior P_b and its retain/enhance decoupling.

    d~  = exp(-alpha * DT(M > tau))            geometric prior
    L   = Q(M, d~) * K(M, d~) / gamma           attention likelihood
    P_b = minmax(d~ * L)                        per image, constant -> 0
    R   = mu_R * (1 - P_b),  E = mu_E * P_b

tau, alpha and gamma are stored unconstrained (``tau = sigmoid(raw)``,
``alpha = softplus(raw)``, ``gamma = softplus(raw)``).  The threshold is hard,
so no gradient reaches ``tau`` or ``M`` through the distance transform.
"""

import math
import warnings
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .tensor import DimensionError, sigmoid, softplus

HIDDEN = 8


class RetainEnhance(NamedTuple):
    P_b: np.ndarray
    R: np.ndarray
    E: np.ndarray


class EmptyMaskWarning(UserWarning):
    """Distance transform of a mask with no true pixel."""


def _inv_softplus(y):
    return math.log(math.expm1(y))


def init_params(rng, mu_R=0.8, mu_E=1.2, alpha=0.3, gamma=1.0, tau=0.5, dtype=np.float32):
    p = {
        "tau": np.asarray(math.log(tau / (1 - tau)), dtype=dtype),
        "alpha": np.asarray(_inv_softplus(alpha), dtype=dtype),
        "gamma": np.asarray(_inv_softplus(gamma), dtype=dtype),
        "mu_R": np.asarray(mu_R, dtype=dtype),
        "mu_E": np.asarray(mu_E, dtype=dtype),
    }
    for name in ("q", "k"):
        p[f"{name}_w1"] = (rng.standard_normal((HIDDEN, 2)) * 0.7).astype(dtype)
        p[f"{name}_b1"] = (rng.standard_normal(HIDDEN) * 0.1).astype(dtype)
        p[f"{name}_w2"] = (rng.standard_normal(HIDDEN) / np.sqrt(HIDDEN)).astype(dtype)
        p[f"{name}_b2"] = np.asarray(1.0, dtype=dtype)
    return p


# ---------------------------------------------------------------------------
# exact Euclidean distance transform


def distance_transform(mask, return_flag=False):
    """Exact Euclidean distance from each pixel to the nearest true pixel.

    A mask with no true pixel maps to the uniform sentinel sqrt(H^2 + W^2)
    and emits :class:`EmptyMaskWarning`; with ``return_flag`` the per-image
    sentinel flags are returned as a second value.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim < 2:
        raise DimensionError(f"expected (..., H, W), got {mask.shape}")
    H, W = mask.shape[-2:]
    flat = mask.reshape(-1, H, W)
    out = np.empty(flat.shape)
    flags = np.zeros(flat.shape[0], dtype=bool)
    for n in range(flat.shape[0]):
        if flat[n].any():
            out[n] = ndimage.distance_transform_edt(~flat[n])
        else:
            out[n] = math.hypot(H, W)
            flags[n] = True
    if flags.any() and not return_flag:
        warnings.warn("distance transform of an empty mask", EmptyMaskWarning, stacklevel=2)
    out = out.reshape(mask.shape)
    if return_flag:
        return out, flags.reshape(mask.shape[:-2])
    return out


# ---------------------------------------------------------------------------
# posterior


def geometric_prior(M, p):
    """exp(-alpha * DT(M > tau)) in (0, 1]."""
    return _prior(np.asarray(M), p)[0]


def _prior(M, p):
    tau = sigmoid(p["tau"])
    alpha = softplus(p["alpha"])
    dist, flags = distance_transform(M > tau, return_flag=True)
    dist = dist.astype(M.dtype)
    return np.exp(-alpha * dist), dist, flags


def _mlp(M, d, p, name):
    z = (p[f"{name}_w1"][:, 0, None, None] * M[..., None, :, :]
         + p[f"{name}_w1"][:, 1, None, None] * d[..., None, :, :]
         + p[f"{name}_b1"][:, None, None])
    hid = np.tanh(z)
    out = np.einsum("k,...khw->...hw", p[f"{name}_w2"], hid) + p[f"{name}_b2"]
    return out, hid


def _mlp_backward(M, d, hid, p, name, g):
    K = hid.shape[-3]
    hf = hid.reshape(-1, K, *hid.shape[-2:])
    gf = g.reshape(-1, *g.shape[-2:])
    gz = gf[:, None] * p[f"{name}_w2"][:, None, None] * (1 - hf * hf)
    Mf = M.reshape(gf.shape)
    df = d.reshape(gf.shape)
    grads = {
        f"{name}_b2": np.asarray(g.sum(), dtype=g.dtype),
        f"{name}_w2": np.einsum("nhw,nkhw->k", gf, hf),
        f"{name}_b1": gz.sum(axis=(0, 2, 3)),
        f"{name}_w1": np.stack([np.einsum("nkhw,nhw->k", gz, Mf),
                                np.einsum("nkhw,nhw->k", gz, df)], axis=1),
    }
    gM = np.einsum("nkhw,k->nhw", gz, p[f"{name}_w1"][:, 0]).reshape(M.shape)
    gd = np.einsum("nkhw,k->nhw", gz, p[f"{name}_w1"][:, 1]).reshape(M.shape)
    return gM, gd, grads


def attention_likelihood(M, d, p):
    """Q * K / gamma with Q, K from two independent per-pixel 2-8-1 tanh MLPs."""
    M = np.asarray(M)
    d = np.asarray(d, dtype=M.dtype)
    if M.shape != d.shape:
        raise DimensionError(f"M {M.shape} vs prior {d.shape}")
    Q, _ = _mlp(M, d, p, "q")
    K, _ = _mlp(M, d, p, "k")
    return Q * K / softplus(p["gamma"])


def minmax_norm(x):
    """Per-image min-max to [0, 1]; a constant image maps to zeros."""
    lo = x.min(axis=(-2, -1), keepdims=True)
    hi = x.max(axis=(-2, -1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (x - lo) / safe, 0.0).astype(x.dtype)


def _minmax_backward(x, y, g):
    H, W = x.shape[-2:]
    flat_x = x.reshape(-1, H * W)
    flat_y = y.reshape(-1, H * W)
    flat_g = g.reshape(-1, H * W)
    span = flat_x.max(axis=1) - flat_x.min(axis=1)
    live = span > 0
    safe = np.where(live, span, 1.0)[:, None]
    gx = flat_g / safe
    rows = np.arange(flat_x.shape[0])
    imin = flat_x.argmin(axis=1)
    imax = flat_x.argmax(axis=1)
    np.add.at(gx, (rows, imin), (flat_g * (flat_y - 1)).sum(axis=1) / safe[:, 0])
    np.add.at(gx, (rows, imax), -(flat_g * flat_y).sum(axis=1) / safe[:, 0])
    gx[~live] = 0.0
    return gx.reshape(x.shape)


def posterior_forward(M, p):
    M = np.asarray(M)
    dprior, dist, flags = _prior(M, p)
    Q, hq = _mlp(M, dprior, p, "q")
    K, hk = _mlp(M, dprior, p, "k")
    gamma = softplus(p["gamma"])
    L = Q * K / gamma
    prod = dprior * L
    P_b = minmax_norm(prod)
    R = p["mu_R"] * (1 - P_b)
    E = p["mu_E"] * P_b
    cache = (M, dprior, dist, Q, hq, K, hk, gamma, L, prod, P_b, p)
    return RetainEnhance(P_b, R, E), cache


def boundary_posterior(M, p):
    return posterior_forward(M, p)[0]


def posterior_backward(cache, gR, gE, gP_b=None):
    """Returns (grad_M, param_grads) given upstream grads of R, E (and P_b)."""
    M, dprior, dist, Q, hq, K, hk, gamma, L, prod, P_b, p = cache
    dt = M.dtype
    grads = {
        "mu_R": np.asarray((gR * (1 - P_b)).sum(), dtype=dt),
        "mu_E": np.asarray((gE * P_b).sum(), dtype=dt),
        "tau": np.zeros((), dtype=dt),
    }
    gP = -p["mu_R"] * gR + p["mu_E"] * gE
    if gP_b is not None:
        gP = gP + gP_b
    gprod = _minmax_backward(prod, P_b, gP)
    gd = gprod * L
    gL = gprod * dprior
    gQ = gL * K / gamma
    gK = gL * Q / gamma
    grads["gamma"] = np.asarray(-(gL * L).sum() / gamma * sigmoid(p["gamma"]), dtype=dt)
    gMq, gdq, gq = _mlp_backward(M, dprior, hq, p, "q", gQ)
    gMk, gdk, gk = _mlp_backward(M, dprior, hk, p, "k", gK)
    grads.update(gq)
    grads.update(gk)
    gd = gd + gdq + gdk
    # d~ = exp(-alpha * DT), alpha = softplus(raw)
    grads["alpha"] = np.asarray(-(gd * dist * dprior).sum() * sigmoid(p["alpha"]), dtype=dt)
    return gMq + gMk, grads
