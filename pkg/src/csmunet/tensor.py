"""Dense tensor kernels shared by every block.

Tensors are plain numpy arrays in (..., C, H, W) layout.  Runtime paths run in
float32, gradient checks in float64; every kernel preserves the input dtype.
"""

import numpy as np

from . import _kernels


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class OracleError(RuntimeError):
    """The finite-difference oracle hit a non-finite function value."""


def sigmoid(x):
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return np.exp(-np.logaddexp(np.zeros((), dtype=x.dtype), -x))


def softplus(x):
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    return np.logaddexp(np.zeros((), dtype=x.dtype), x).astype(x.dtype, copy=False)


def _broadcast_operand(a, b):
    """Align ``b`` to ``a``: exact shape, scalar, or per-channel vector."""
    b = np.asarray(b, dtype=a.dtype)
    if b.shape == a.shape or b.ndim == 0 or b.size == 1:
        return b.reshape(b.shape if b.shape == a.shape else ())
    if b.ndim == 1 and a.ndim >= 3 and a.shape[-3] == b.shape[0]:
        return b[:, None, None]
    raise DimensionError(f"cannot broadcast {b.shape} against {a.shape}")


_UNARY = {
    "sigmoid": sigmoid,
    "softplus": softplus,
    "exp": lambda a: np.exp(np.minimum(a, 80.0)),
    "tanh": np.tanh,
    "relu": lambda a: np.maximum(a, 0),
    "neg": np.negative,
}

_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "div": lambda a, b: a / np.where(b == 0, np.finfo(a.dtype).tiny, b),
    "max": np.maximum,
    "min": np.minimum,
}


def ew(op, a, b=None, lo=None, hi=None):
    """Elementwise operation ``op`` on ``a`` (and ``b`` for binary ops).

    ``clip`` takes ``lo``/``hi`` and returns ``min(max(a, lo), hi)``.
    """
    a = np.asarray(a)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    if op == "clip":
        out = a
        if lo is not None:
            out = np.maximum(out, lo)
        if hi is not None:
            out = np.minimum(out, hi)
        return out.astype(a.dtype, copy=False)
    if op in _UNARY:
        if b is not None:
            raise DimensionError(f"{op} is unary")
        return _UNARY[op](a).astype(a.dtype, copy=False)
    if op in _BINARY:
        if b is None:
            raise DimensionError(f"{op} needs two operands")
        return _BINARY[op](a, _broadcast_operand(a, b)).astype(a.dtype, copy=False)
    raise KeyError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# convolution


def _check_kernel(k, mode, channels):
    if mode == "depthwise":
        if k.ndim != 3 or k.shape[0] != channels:
            raise DimensionError(f"depthwise kernel {k.shape} vs {channels} channels")
    elif mode == "pointwise":
        if k.ndim != 2 or k.shape[1] != channels:
            raise DimensionError(f"pointwise kernel {k.shape} vs {channels} channels")
        return
    elif mode == "dense":
        if k.ndim != 4 or k.shape[1] != channels:
            raise DimensionError(f"dense kernel {k.shape} vs {channels} channels")
    else:
        raise ValueError(f"unknown conv mode {mode!r}")
    kh, kw = k.shape[-2:]
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"kernel must be odd and square, got {kh}x{kw}")


def _pad(x, p):
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, width)


def _im2col(x, k):
    """(..., C, H, W) -> (..., C*k*k, H*W) zero-padded patches."""
    *lead, C, H, W = x.shape
    p = k // 2
    xp = _pad(x, p)
    cols = np.empty((*lead, C, k * k, H, W), dtype=x.dtype)
    for u in range(k):
        for v in range(k):
            cols[..., u * k + v, :, :] = xp[..., u:u + H, v:v + W]
    return cols.reshape(*lead, C * k * k, H * W)


def _col2im(cols, shape, k):
    *lead, C, H, W = shape
    p = k // 2
    cols = cols.reshape(*lead, C, k * k, H, W)
    gp = np.zeros((*lead, C, H + 2 * p, W + 2 * p), dtype=cols.dtype)
    for u in range(k):
        for v in range(k):
            gp[..., u:u + H, v:v + W] += cols[..., u * k + v, :, :]
    return gp[..., p:p + H, p:p + W]


def conv2d(x, k, mode="depthwise"):
    """Same-padded 2-D cross-correlation.

    ``depthwise``: k is (C, k, k), one filter per channel.
    ``pointwise``: k is (C_out, C_in), a 1x1 channel mix.
    ``dense``: k is (C_out, C_in, k, k), full convolution (used by the toy net).
    """
    x = np.asarray(x)
    k = np.asarray(k, dtype=x.dtype)
    if x.ndim < 3:
        raise DimensionError(f"expected (..., C, H, W), got {x.shape}")
    *lead, C, H, W = x.shape
    _check_kernel(k, mode, C)
    if mode == "pointwise":
        out = np.matmul(k, x.reshape(*lead, C, H * W))
        return out.reshape(*lead, k.shape[0], H, W)
    if mode == "depthwise":
        ks = k.shape[-1]
        xp = _pad(x, ks // 2).reshape(-1, C, H + ks - 1, W + ks - 1)
        return _kernels.depthwise_forward(xp, k, H, W).reshape(x.shape)
    return conv2d_dense(x, k)[0]


def conv2d_dense(x, k):
    """Dense convolution that also returns its patch matrix for reuse in backward."""
    *lead, C, H, W = x.shape
    cols = _im2col(x, k.shape[-1])
    out = np.matmul(k.reshape(k.shape[0], -1), cols)
    return out.reshape(*lead, k.shape[0], H, W), cols


def _weight_grad(gf, xf):
    """sum_b gf[b] @ xf[b].T, keeping BLAS on transposed views (no copies)."""
    out = gf[0] @ xf[0].T
    for b in range(1, gf.shape[0]):
        out += gf[b] @ xf[b].T
    return out


def conv2d_backward(x, k, g, mode="depthwise", cols=None):
    """Adjoint of :func:`conv2d`: returns (grad_x, grad_k).

    ``cols`` may pass the patch matrix from :func:`conv2d_dense` to skip
    rebuilding it.
    """
    x = np.asarray(x)
    k = np.asarray(k, dtype=x.dtype)
    *lead, C, H, W = x.shape
    nb = int(np.prod(lead)) if lead else 1
    if mode == "pointwise":
        xf = x.reshape(nb, C, H * W)
        gf = g.reshape(nb, -1, H * W)
        gk = _weight_grad(gf, xf)
        gx = np.matmul(k.T, gf).reshape(x.shape)
        return gx, gk
    ks = k.shape[-1]
    p = ks // 2
    if mode == "depthwise":
        xp = _pad(x, p).reshape(nb, C, H + 2 * p, W + 2 * p)
        gxp, gk = _kernels.depthwise_backward(xp, k, g.reshape(nb, C, H, W))
        return gxp[..., p:p + H, p:p + W].reshape(x.shape), gk
    if cols is None:
        cols = _im2col(x, ks)
    cols = cols.reshape(nb, C * ks * ks, H * W)
    gf = g.reshape(nb, -1, H * W)
    gk = _weight_grad(gf, cols).reshape(k.shape)
    gcols = np.matmul(k.reshape(k.shape[0], -1).T, gf)
    gx = _col2im(gcols.reshape(*lead, C * ks * ks, H * W), x.shape, ks)
    return gx, gk


# ---------------------------------------------------------------------------
# gradient oracle


def finite_diff_grad(f, x, h=1e-3):
    """Central-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleError(f"non-finite value at element {i}")
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-12):
    """Norm-wise relative error between two gradient tensors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    den = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / den)
