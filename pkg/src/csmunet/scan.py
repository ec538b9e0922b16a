"""Selective state-space scan with boundary-modulated timestep and input projection.

Per position t and channel c, with diagonal state size N:

    delta_t = delta0_t * (1 - R_t)         B_t = B0_t * (1 + E_t)
    a_t     = exp(delta_t * A)             b_t = delta_t * B_t * x_t
    h_t     = a_t * h_{t-1} + b_t          y_t = <C_t, h_t> + D * x_t

``delta0 = softplus(W_delta x + b_delta)``, ``B0 = W_B x`` and ``C = W_C x`` are
per-token linear maps and ``A = -exp(A_log)``.  The recurrence is evaluated
either sequentially or by a work-efficient up-sweep/down-sweep tree over the
affine maps ``h -> a*h + b``.  Arrays carry the sequence on axis -3 of the
(..., L, C, N) state layout; tokens are (..., L, C).
"""

import math
from typing import NamedTuple, Optional

import numpy as np

from . import _kernels
from .tensor import sigmoid, softplus

DELTA_FLOOR = 1e-6


class ParameterError(ValueError):
    """A scan parameter violates its domain (e.g. non-positive timestep)."""


class ScanStateError(RuntimeError):
    """Backward pass requested without a forward cache."""


class ScanSequence(NamedTuple):
    tokens: np.ndarray
    R: Optional[np.ndarray] = None
    E: Optional[np.ndarray] = None


def init_params(rng, channels, state, dt_min=1e-3, dt_max=1e-1, dtype=np.float32):
    dt = np.exp(rng.uniform(math.log(dt_min), math.log(dt_max), channels))
    scale = 1.0 / math.sqrt(channels)
    return {
        "W_delta": (rng.standard_normal((channels, channels)) * scale * 0.1).astype(dtype),
        "b_delta": np.log(np.expm1(dt)).astype(dtype),
        "W_B": (rng.standard_normal((state, channels)) * scale).astype(dtype),
        "W_C": (rng.standard_normal((state, channels)) * scale).astype(dtype),
        "A_log": np.log(np.tile(np.arange(1, state + 1, dtype=np.float64), (channels, 1))).astype(dtype),
        "D": np.ones(channels, dtype=dtype),
    }


def state_matrix(p):
    return -np.exp(p["A_log"])


# ---------------------------------------------------------------------------
# discretization and modulation


def discretize_zoh(A, delta, B):
    """Abar = exp(delta * A) (diagonal A), Bbar = delta * B (simplified ZOH).

    ``A`` is (C, N), ``delta`` is (..., C) and ``B`` is (..., N); both outputs
    are (..., C, N).
    """
    A = np.asarray(A)
    delta = np.asarray(delta, dtype=A.dtype)
    if np.any(delta <= 0):
        raise ParameterError("timestep must be positive")
    Abar = np.exp(delta[..., None] * A)
    Bbar = delta[..., None] * np.asarray(B, dtype=A.dtype)[..., None, :]
    return Abar, Bbar


def modulate_params(delta0, B0, R=None, E=None):
    """delta = delta0 * (1 - R), B = B0 * (1 + E); R, E are one scalar per position.

    Positions with R >= 1 would give a non-positive timestep; their delta is
    floored at ``DELTA_FLOOR`` and reported in the returned mask.
    """
    clamped = np.zeros(delta0.shape[:-1], dtype=bool)
    delta = delta0
    B = B0
    if R is not None:
        clamped = R >= 1
        delta = np.where(clamped[..., None], DELTA_FLOOR, delta0 * (1 - R)[..., None]).astype(delta0.dtype)
    if E is not None:
        B = B0 * (1 + E)[..., None]
    return delta, B, clamped


# ---------------------------------------------------------------------------
# linear recurrence h_t = a_t h_{t-1} + b_t, h_0 = 0


def combine(earlier, later):
    """Compose affine maps: apply ``earlier`` then ``later``."""
    a1, b1 = earlier
    a2, b2 = later
    return a2 * a1, a2 * b1 + b2


def _sequential(a, b):
    h = np.empty_like(b)
    state = np.zeros_like(b[0])
    for t in range(a.shape[0]):
        state = a[t] * state + b[t]
        h[t] = state
    return h


def _blelloch(a, b):
    L = a.shape[0]
    n = 1 << max(L - 1, 0).bit_length()
    A = np.ones((n,) + a.shape[1:], dtype=a.dtype)
    Bv = np.zeros((n,) + b.shape[1:], dtype=b.dtype)
    A[:L] = a
    Bv[:L] = b
    d = 1
    while d < n:
        r = slice(2 * d - 1, n, 2 * d)
        l = slice(d - 1, n, 2 * d)
        Bv[r] = A[r] * Bv[l] + Bv[r]
        A[r] = A[r] * A[l]
        d *= 2
    A[n - 1] = 1
    Bv[n - 1] = 0
    d = n // 2
    while d >= 1:
        r = slice(2 * d - 1, n, 2 * d)
        l = slice(d - 1, n, 2 * d)
        tA = A[l].copy()
        tB = Bv[l].copy()
        A[l] = A[r]
        Bv[l] = Bv[r]
        Bv[r] = tA * Bv[r] + tB
        A[r] = tA * A[r]
        d //= 2
    # exclusive prefix applied to h_0 = 0 leaves its offset; finish with own step
    return a * Bv[:L] + b


def linear_recurrence(a, b, method="parallel", axis=-3, keep_precision=False):
    """All states of h_t = a_t * h_{t-1} + b_t with h_0 = 0 along ``axis``.

    The states are accumulated in float64 whatever the input dtype: in float32
    the rounding of long, slowly decaying recurrences grows with the effective
    window and the two evaluation orders drift apart by several ulps.  The
    result is cast back to the input dtype unless ``keep_precision``.
    """
    a = np.moveaxis(np.asarray(a), axis, 0)
    b = np.moveaxis(np.asarray(b), axis, 0)
    dtype = np.result_type(a, b)
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    if method in ("sequential", "fused"):
        h = _sequential(a64, b64)
    elif method == "parallel":
        h = _blelloch(a64, b64)
    else:
        raise ValueError(f"unknown scan method {method!r}")
    return np.moveaxis(h if keep_precision else h.astype(dtype), 0, axis)


def reverse_recurrence(a, g, method="parallel", axis=-3, keep_precision=False):
    """Adjoint states lam_t = g_t + a_{t+1} * lam_{t+1}, lam_{L+1} = 0."""
    a = np.moveaxis(a, axis, 0)
    g = np.moveaxis(g, axis, 0)
    a_next = np.zeros_like(a)
    a_next[:-1] = a[1:]
    lam = linear_recurrence(a_next[::-1], g[::-1], method, axis=0,
                            keep_precision=keep_precision)[::-1]
    return np.moveaxis(lam, 0, axis)


# ---------------------------------------------------------------------------
# core selective scan on already-projected parameters


def ssm_forward(x, delta, A, B, C, D=None, method="parallel"):
    """y for tokens x (..., L, C) given delta (..., L, C), B/C (..., L, N)."""
    if method == "fused":
        y, a = _kernels.fused_forward(x, delta, A, B, C)
        h = None
    else:
        a = np.exp(delta[..., None] * A)
        b = (delta * x)[..., None] * B[..., None, :]
        h = linear_recurrence(a, b, method, keep_precision=True)
        y = (h * C[..., None, :]).sum(axis=-1)
    if D is not None:
        y = y + D * x
    y = y.astype(x.dtype, copy=False)
    return y, (x, delta, A, B, C, D, a, h, method)


def ssm_backward(cache, gy):
    """Grads (x, delta, A, B, C, D) of the core scan."""
    x, delta, A, B, C, D, a, h, method = cache
    lead = tuple(range(x.ndim - 1))
    if method == "fused":
        gx, gdelta, gA, gB, gC = _kernels.fused_backward(x, delta, A, B, C, gy, a)
        gD = None
        if D is not None:
            gx = gx + gy * D
            gD = (gy * x).sum(axis=lead)
        return gx, gdelta, gA, gB, gC, gD
    gh = gy[..., None] * C[..., None, :]
    lam = reverse_recurrence(a, gh, method, keep_precision=True)
    h_prev = np.zeros_like(h)
    h_prev[..., 1:, :, :] = h[..., :-1, :, :]
    ga_a = lam * h_prev * a
    gA = (ga_a * delta[..., None]).sum(axis=lead)
    lamB = (lam * B[..., None, :]).sum(axis=-1)
    gdelta = (ga_a * A).sum(axis=-1) + lamB * x
    gx = lamB * delta
    gB = (lam * (delta * x)[..., None]).sum(axis=-2)
    gC = (gy[..., None] * h).sum(axis=-2)
    gD = None
    if D is not None:
        gx = gx + gy * D
        gD = (gy * x).sum(axis=lead).astype(x.dtype, copy=False)
    return tuple(g.astype(x.dtype, copy=False) for g in (gx, gdelta, gA, gB, gC)) + (gD,)


# ---------------------------------------------------------------------------
# token-level API


def project(tokens, p):
    """Per-token delta0, B0 and C."""
    pre = tokens @ p["W_delta"].T + p["b_delta"]
    return softplus(pre), tokens @ p["W_B"].T, tokens @ p["W_C"].T, pre


def scan_forward(seq, p, method="parallel"):
    tokens = np.asarray(seq.tokens)
    delta0, B0, Cm, pre = project(tokens, p)
    delta, B, clamped = modulate_params(delta0, B0, seq.R, seq.E)
    A = state_matrix(p).astype(tokens.dtype)
    y, core = ssm_forward(tokens, delta, A, B, Cm, p["D"], method)
    cache = {"seq": seq, "p": p, "delta0": delta0, "B0": B0, "pre": pre,
             "clamped": clamped, "A": A, "core": core}
    return y, cache


def selective_scan_seq(seq, p):
    return scan_forward(seq, p, "sequential")[0]


def selective_scan_parallel(seq, p):
    return scan_forward(seq, p, "parallel")[0]


def modulate_backward(delta0, B0, R, E, clamped, gdelta, gB):
    """Adjoint of :func:`modulate_params`: (g_delta0, g_B0, g_R, g_E)."""
    gR = gE = None
    if R is not None:
        live = ~clamped[..., None]
        gdelta0 = np.where(live, gdelta * (1 - R)[..., None], 0.0).astype(gdelta.dtype)
        gR = np.where(clamped, 0.0, -(gdelta * delta0).sum(axis=-1)).astype(gdelta.dtype)
    else:
        gdelta0 = gdelta
    if E is not None:
        gB0 = gB * (1 + E)[..., None]
        gE = (gB * B0).sum(axis=-1)
    else:
        gB0 = gB
    return gdelta0, gB0, gR, gE


def project_backward(tokens, p, pre, gdelta0, gB0, gC):
    """Adjoint of :func:`project`: (g_tokens, {W_delta, b_delta, W_B, W_C})."""
    gpre = gdelta0 * sigmoid(pre)
    flat = tokens.reshape(-1, tokens.shape[-1])
    grads = {
        "W_delta": gpre.reshape(-1, gpre.shape[-1]).T @ flat,
        "b_delta": gpre.reshape(-1, gpre.shape[-1]).sum(axis=0),
        "W_B": gB0.reshape(-1, gB0.shape[-1]).T @ flat,
        "W_C": gC.reshape(-1, gC.shape[-1]).T @ flat,
    }
    gtok = gpre @ p["W_delta"] + gB0 @ p["W_B"] + gC @ p["W_C"]
    return gtok, grads


def scan_backward(cache, grad_out):
    """Gradients for tokens, R, E and every entry of the parameter dict."""
    if cache is None:
        raise ScanStateError("scan_backward needs the cache from scan_forward")
    seq, p = cache["seq"], cache["p"]
    tokens = np.asarray(seq.tokens)
    gx, gdelta, gA, gB, gC, gD = ssm_backward(cache["core"], grad_out)
    gdelta0, gB0, gR, gE = modulate_backward(
        cache["delta0"], cache["B0"], seq.R, seq.E, cache["clamped"], gdelta, gB)
    gtok, out = project_backward(tokens, p, cache["pre"], gdelta0, gB0, gC)
    out["tokens"] = gx + gtok
    out["A_log"] = gA * cache["A"]
    out["D"] = gD
    if gR is not None:
        out["R"] = gR
    if gE is not None:
        out["E"] = gE
    return out
