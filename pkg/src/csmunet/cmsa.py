"""Channel state aggregation: channels as a bounded, grouped SSM sequence.

Each channel k of X (..., C, H, W) becomes a token u_k = W_tok [mean X_k, max X_k].
Channels are split into G contiguous groups; inside a group the shared SSM
runs along the channel index with a clipped transition

    a_k = min(exp(delta_k * A), lambda, Lambda)

so every one-step (hence every cumulative) decay stays at or below ``Lambda``.
With h_0 = 0 per group this gives ||h_k|| <= max_i ||Bbar_i|| ||u_i|| / (1 - Lambda).
The readout y_k = <C_k, h_k> feeds a sigmoid gate and X_hat = X * (1 + gate).

``A`` is unconstrained here (the clip is what keeps the recurrence stable);
``lambda = softplus(raw)`` and ``Lambda = 0.999 * sigmoid(raw)``.
"""

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import scan
from .tensor import sigmoid, softplus

LAMBDA_CAP = 0.999


class ConfigurationError(ValueError):
    """Inconsistent module configuration (e.g. groups not dividing channels)."""


class BoundednessError(AssertionError):
    """A hidden state exceeded the geometric-series bound."""


@dataclass
class CMSAConfig:
    enabled: bool = True
    groups: int = 4
    clip: bool = True
    method: str = "parallel"


class ScanTrace(NamedTuple):
    h: np.ndarray       # (..., G, C/G, d_m, N)
    beta: np.ndarray    # (..., G, C/G): ||Bbar_i|| * ||u_i||
    Lambda: float


class BoundReport(NamedTuple):
    max_ratio: float
    violations: list


def init_params(rng, d_model=8, state=4, lambda_init=1.0, Lambda_init=0.9, dtype=np.float32):
    ssm = scan.init_params(rng, d_model, state, dt_min=1e-2, dt_max=1e-1, dtype=dtype)
    A = -np.exp(ssm.pop("A_log"))
    ssm.pop("D")
    p = {f"ssm.{k}": v for k, v in ssm.items()}
    p["ssm.A"] = A.astype(dtype)
    p["tok_w"] = (rng.standard_normal((d_model, 2)) / math.sqrt(2)).astype(dtype)
    p["tok_b"] = np.zeros(d_model, dtype=dtype)
    p["lam"] = np.asarray(math.log(math.expm1(lambda_init)), dtype=dtype)
    q = Lambda_init / LAMBDA_CAP
    p["Lam"] = np.asarray(math.log(q / (1 - q)), dtype=dtype)
    p["out_w"] = (rng.standard_normal(d_model) / math.sqrt(d_model)).astype(dtype)
    p["out_b"] = np.zeros((), dtype=dtype)
    return p


def clip_bounds(p):
    return softplus(p["lam"]), LAMBDA_CAP * sigmoid(p["Lam"])


def _ssm(p):
    return {k[4:]: v for k, v in p.items() if k.startswith("ssm.")}


def channel_tokens(X, p):
    """Pooled (mean, max) descriptor per channel projected to width d_m."""
    X = np.asarray(X)
    pooled = np.stack([X.mean(axis=(-2, -1)), X.max(axis=(-2, -1))], axis=-1)
    return pooled @ p["tok_w"].T + p["tok_b"], pooled


def _group(z, G):
    C = z.shape[-2]
    if G <= 0 or C % G:
        raise ConfigurationError(f"{G} groups do not divide {C} channels")
    return z.reshape(*z.shape[:-2], G, C // G, z.shape[-1])


def _grouped_scan(u, p, cfg):
    ug = _group(u, cfg.groups)
    ssm = _ssm(p)
    delta, B, Cm, pre = scan.project(ug, ssm)
    A = ssm["A"]
    e = np.exp(np.minimum(delta[..., None] * A, 80.0))
    lam, Lam = clip_bounds(p)
    if cfg.clip:
        a = np.minimum(np.minimum(e, lam), Lam)
    else:
        a = e
    b = (delta * ug)[..., None] * B[..., None, :]
    h = scan.linear_recurrence(a, b, cfg.method)
    y = (h * Cm[..., None, :]).sum(axis=-1)
    beta = delta.max(axis=-1) * np.linalg.norm(B, axis=-1) * np.linalg.norm(ug, axis=-1)
    trace = ScanTrace(h, beta, float(Lam))
    cache = (ug, delta, B, Cm, pre, e, a, h, lam, Lam)
    return y.reshape(u.shape), trace, cache


def grouped_bounded_scan(tokens, p, cfg=None):
    """Per-channel outputs y_k (..., C, d_m) and the state trace."""
    cfg = cfg or CMSAConfig()
    y, trace, _ = _grouped_scan(np.asarray(tokens), p, cfg)
    return y, trace


def boundedness_check(trace, strict=True, rtol=1e-6):
    """Check ||h_k|| <= max_i beta_i / (1 - Lambda) in every group.

    Returns the largest observed ratio ||h_k|| / bound; raises
    :class:`BoundednessError` naming the offending (group, k) when ``strict``.
    """
    if not trace.Lambda < 1:
        raise ConfigurationError("bound needs Lambda < 1")
    hn = np.sqrt((trace.h.astype(np.float64) ** 2).sum(axis=(-2, -1)))
    bound = trace.beta.astype(np.float64).max(axis=-1, keepdims=True) / (1 - trace.Lambda)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(bound > 0, hn / bound, np.where(hn > 0, np.inf, 0.0))
    bad = np.argwhere(ratio > 1 + rtol)
    violations = [tuple(int(i) for i in idx[-2:]) for idx in bad]
    if violations and strict:
        raise BoundednessError(f"state bound violated at (group, k) = {violations[:5]}")
    return BoundReport(float(ratio.max()) if ratio.size else 0.0, violations)


def cmsa_forward_cached(X, p, cfg=None):
    cfg = cfg or CMSAConfig()
    X = np.asarray(X)
    if not cfg.enabled:
        return X, {"cfg": cfg}
    u, pooled = channel_tokens(X, p)
    y, trace, scan_cache = _grouped_scan(u, p, cfg)
    s = y @ p["out_w"] + p["out_b"]
    gate = sigmoid(s)
    out = X * (1 + gate)[..., None, None]
    cache = {"cfg": cfg, "X": X, "u": u, "pooled": pooled, "y": y, "gate": gate,
             "trace": trace, "scan": scan_cache}
    return out, cache


def cmsa_forward(X, p, cfg=None):
    """X_hat = X * (1 + sigmoid(out_proj(y_k))) per channel."""
    return cmsa_forward_cached(X, p, cfg)[0]


def cmsa_backward(cache, g, p):
    """Returns (grad_X, param_grads)."""
    cfg = cache["cfg"]
    if not cfg.enabled:
        return g, {k: np.zeros_like(v) for k, v in p.items()}
    X, u, pooled, y, gate = cache["X"], cache["u"], cache["pooled"], cache["y"], cache["gate"]
    dt = X.dtype
    gX = g * (1 + gate)[..., None, None]
    gs = (g * X).sum(axis=(-2, -1)) * gate * (1 - gate)
    grads = {
        "out_w": (gs[..., None] * y).reshape(-1, y.shape[-1]).sum(axis=0),
        "out_b": np.asarray(gs.sum(), dtype=dt),
    }
    gy = _group(gs[..., None] * p["out_w"], cfg.groups)
    ug, delta, B, Cm, pre, e, a, h, lam, Lam = cache["scan"]
    ssm = _ssm(p)
    A = ssm["A"]
    gh = gy[..., None] * Cm[..., None, :]
    lamda = scan.reverse_recurrence(a, gh, cfg.method)
    h_prev = np.zeros_like(h)
    h_prev[..., 1:, :, :] = h[..., :-1, :, :]
    ga = lamda * h_prev
    if cfg.clip:
        via_e = (e <= lam) & (e <= Lam)
        via_lam = ~via_e & (lam <= Lam)
        via_Lam = ~via_e & ~via_lam
        grads["lam"] = np.asarray((ga * via_lam).sum() * sigmoid(p["lam"]), dtype=dt)
        s_L = sigmoid(p["Lam"])
        grads["Lam"] = np.asarray((ga * via_Lam).sum() * LAMBDA_CAP * s_L * (1 - s_L), dtype=dt)
        ge = ga * via_e
    else:
        grads["lam"] = np.zeros((), dtype=dt)
        grads["Lam"] = np.zeros((), dtype=dt)
        ge = ga
    ge_e = ge * e
    lead = tuple(range(ug.ndim - 1))
    grads["ssm.A"] = (ge_e * delta[..., None]).sum(axis=lead)
    lamB = (lamda * B[..., None, :]).sum(axis=-1)
    gdelta = (ge_e * A).sum(axis=-1) + lamB * ug
    gu = lamB * delta
    gB = (lamda * (delta * ug)[..., None]).sum(axis=-2)
    gC = (gy[..., None] * h).sum(axis=-2)
    gtok, gproj = scan.project_backward(ug, ssm, pre, gdelta, gB, gC)
    grads.update({f"ssm.{k}": v for k, v in gproj.items()})
    gu = (gu + gtok).reshape(u.shape)
    grads["tok_w"] = gu.reshape(-1, gu.shape[-1]).T @ pooled.reshape(-1, 2)
    grads["tok_b"] = gu.reshape(-1, gu.shape[-1]).sum(axis=0)
    gpool = gu @ p["tok_w"]
    H, W = X.shape[-2:]
    gX = gX + (gpool[..., 0] / (H * W))[..., None, None]
    flat = X.reshape(-1, H * W)
    idx = flat.argmax(axis=1)
    gmax = np.zeros_like(flat)
    gmax[np.arange(flat.shape[0]), idx] = gpool[..., 1].reshape(-1)
    gX = gX + gmax.reshape(X.shape)
    return gX, grads
