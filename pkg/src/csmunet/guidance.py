"""Boundary guidance map from encoder/decoder feature misalignment.

    M = sigmoid(w_b * |Sobel(cos(F_e, F_d))| + w_f * P_fg)

where the cosine is taken per pixel across channels and ``P_fg`` comes from a
sigmoid pointwise head on ``concat[F_e; F_d]``.  All functions accept leading
batch axes: features are (..., C, H, W), maps are (..., H, W).
"""

import numpy as np

from .tensor import DimensionError, conv2d, conv2d_backward, sigmoid

COS_EPS = 1e-8

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


def init_params(rng, channels, dtype=np.float32):
    return {
        "w_b": np.asarray(1.0, dtype=dtype),
        "w_f": np.asarray(1.0, dtype=dtype),
        "fg_w": (rng.standard_normal((1, 2 * channels)) / np.sqrt(2 * channels)).astype(dtype),
        "fg_b": np.zeros(1, dtype=dtype),
    }


def _same_shape(F_e, F_d):
    if F_e.shape != F_d.shape:
        raise DimensionError(f"feature shapes differ: {F_e.shape} vs {F_d.shape}")


def cosine_map(F_e, F_d):
    """Per-pixel cosine similarity of channel vectors, in [-1, 1]."""
    return _cosine(np.asarray(F_e), np.asarray(F_d))[0]


def _cosine(F_e, F_d):
    _same_shape(F_e, F_d)
    na = np.sqrt((F_e * F_e).sum(axis=-3))
    nb = np.sqrt((F_d * F_d).sum(axis=-3))
    den = (na + COS_EPS) * (nb + COS_EPS)
    s = (F_e * F_d).sum(axis=-3) / den
    return s, (F_e, F_d, na, nb, den, s)


def _cosine_backward(cache, g):
    F_e, F_d, na, nb, den, s = cache
    # d s / d a = b / den - s * a / (|a| (|a| + eps)); a zero vector has s = 0
    da = na * (na + COS_EPS)
    db = nb * (nb + COS_EPS)
    ka = np.where(da > 0, g * s / np.where(da > 0, da, 1), 0)
    kb = np.where(db > 0, g * s / np.where(db > 0, db, 1), 0)
    ga = (g / den)[..., None, :, :] * F_d - ka[..., None, :, :] * F_e
    gb = (g / den)[..., None, :, :] * F_e - kb[..., None, :, :] * F_d
    return ga, gb


def _sobel(s):
    if s.shape[-1] < 3 or s.shape[-2] < 3:
        raise DimensionError(f"Sobel needs at least 3x3, got {s.shape[-2:]}")
    x = _edge_pad(s)[..., None, :, :]
    gx = conv2d(x, SOBEL_X[None].astype(s.dtype), "depthwise")[..., 0, 1:-1, 1:-1]
    gy = conv2d(x, SOBEL_Y[None].astype(s.dtype), "depthwise")[..., 0, 1:-1, 1:-1]
    mag = np.sqrt(gx * gx + gy * gy)
    return mag, (x, gx, gy, mag)


def _edge_pad(s):
    pad = [(0, 0)] * (s.ndim - 2) + [(1, 1), (1, 1)]
    return np.pad(s, pad, mode="edge")


def _edge_pad_adjoint(g):
    g = g.copy()
    g[..., 1, :] += g[..., 0, :]
    g[..., -2, :] += g[..., -1, :]
    g[..., :, 1] += g[..., :, 0]
    g[..., :, -2] += g[..., :, -1]
    return g[..., 1:-1, 1:-1]


def sobel_mag(s):
    """Gradient magnitude with 3x3 Sobel taps; borders replicate the edge pixel."""
    return _sobel(np.asarray(s))[0]


def _sobel_backward(cache, g):
    x, gx, gy, mag = cache
    safe = np.where(mag > 0, mag, 1.0)
    coef = np.where(mag > 0, g / safe, 0.0)
    pad = [(0, 0)] * (coef.ndim - 2) + [(1, 1), (1, 1)]
    kx = SOBEL_X[None].astype(x.dtype)
    ky = SOBEL_Y[None].astype(x.dtype)
    dx, _ = conv2d_backward(x, kx, np.pad(coef * gx, pad)[..., None, :, :], "depthwise")
    dy, _ = conv2d_backward(x, ky, np.pad(coef * gy, pad)[..., None, :, :], "depthwise")
    return _edge_pad_adjoint((dx + dy)[..., 0, :, :])


def _foreground(F_e, F_d, p):
    _same_shape(F_e, F_d)
    cat = np.concatenate([F_e, F_d], axis=-3)
    logit = conv2d(cat, p["fg_w"], "pointwise")[..., 0, :, :] + p["fg_b"][0]
    prob = sigmoid(logit)
    return prob, (cat, prob)


def foreground_prob(F_e, F_d, p):
    """sigmoid(fg_head(concat[F_e; F_d])), values in (0, 1)."""
    return _foreground(np.asarray(F_e), np.asarray(F_d), p)[0]


def guidance_forward(F_e, F_d, p):
    """Compute M and the cache needed by :func:`guidance_backward`."""
    F_e = np.asarray(F_e)
    F_d = np.asarray(F_d)
    s, cos_cache = _cosine(F_e, F_d)
    edge, sob_cache = _sobel(s)
    pfg, fg_cache = _foreground(F_e, F_d, p)
    M = sigmoid(p["w_b"] * edge + p["w_f"] * pfg)
    return M, (cos_cache, sob_cache, fg_cache, edge, pfg, M, p)


def build_guidance_map(F_e, F_d, p):
    return guidance_forward(F_e, F_d, p)[0]


def guidance_backward(cache, gM):
    """Returns (grad_F_e, grad_F_d, param_grads)."""
    cos_cache, sob_cache, fg_cache, edge, pfg, M, p = cache
    gz = gM * M * (1 - M)
    grads = {
        "w_b": np.asarray((gz * edge).sum(), dtype=M.dtype),
        "w_f": np.asarray((gz * pfg).sum(), dtype=M.dtype),
    }
    # foreground head
    cat, prob = fg_cache
    glogit = (gz * p["w_f"] * prob * (1 - prob))[..., None, :, :]
    gcat, grads["fg_w"] = conv2d_backward(cat, p["fg_w"], glogit, "pointwise")
    grads["fg_b"] = np.asarray([glogit.sum()], dtype=M.dtype)
    C = cat.shape[-3] // 2
    # cosine -> sobel path
    gs = _sobel_backward(sob_cache, gz * p["w_b"])
    ga, gb = _cosine_backward(cos_cache, gs)
    return ga + gcat[..., :C, :, :], gb + gcat[..., C:, :, :], grads
