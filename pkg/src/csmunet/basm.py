"""Boundary-aware state block fusing encoder and decoder features at a skip.

Data flow for features F_e, F_d of shape (..., C, H, W):

    x      = F_e + F_d                      (or a 1x1 mix of the concat)
    M      = guidance map                   (guidance.py)
    R, E   = boundary posterior of M        (posterior.py)
    F_ssm  = mean of 4 directional scans of x with delta/B modulated by R/E
    F_safs = Conv1x1(concat[DW3, DW5, DW7](x)) * (1 + M)
    F_out  = w_ssm * F_ssm + w_safs * F_safs + x,  (w_ssm, w_safs) = softmax(z / T)

Parameters live in one flat dict with prefixes ``guid.``, ``post.``, ``ssm.``,
``sasf.``, ``fuse.`` and (concat input only) ``mix.``.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels, guidance, posterior, scan
from .tensor import DimensionError, conv2d, conv2d_backward, sigmoid, softplus

DW_SIZES = (3, 5, 7)
DIRECTIONS = 4


@dataclass
class BASMConfig:
    enabled: bool = True
    modulation: bool = True
    se_fusion: bool = True
    fusion_input: str = "sum"
    method: str = "parallel"


def init_params(rng, channels, state=4, mu_R=0.8, mu_E=1.2, fusion_input="sum", dtype=np.float32):
    C = channels
    p = {}
    p.update({f"guid.{k}": v for k, v in guidance.init_params(rng, C, dtype).items()})
    p.update({f"post.{k}": v for k, v in posterior.init_params(rng, mu_R, mu_E, dtype=dtype).items()})
    p.update({f"ssm.{k}": v for k, v in scan.init_params(rng, C, state, dtype=dtype).items()})
    for k in DW_SIZES:
        p[f"sasf.dw{k}"] = (rng.standard_normal((C, k, k)) / k).astype(dtype)
    p["sasf.proj"] = (rng.standard_normal((C, 3 * C)) / math.sqrt(3 * C)).astype(dtype)
    for head in ("ssm", "safs"):
        p[f"fuse.{head}_w"] = (rng.standard_normal((1, 2 * C + 1)) * 0.1 / math.sqrt(2 * C + 1)).astype(dtype)
        p[f"fuse.{head}_b"] = np.zeros(1, dtype=dtype)
    p["fuse.T"] = np.asarray(math.log(math.expm1(1.0)), dtype=dtype)
    if fusion_input == "concat":
        eye = np.eye(C)
        p["mix.w"] = np.concatenate([eye, eye], axis=1).astype(dtype)
        p["mix.b"] = np.zeros(C, dtype=dtype)
    return p


def sub(p, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in p.items() if k.startswith(prefix + ".")}


def _prefixed(prefix, grads):
    return {f"{prefix}.{k}": v for k, v in grads.items()}


def _addto(acc, grads):
    for k, v in grads.items():
        acc[k] = acc[k] + v if k in acc else v


# ---------------------------------------------------------------------------
# SASF branch


def _sasf(x, M, p):
    convs = [conv2d(x, p[f"dw{k}"], "depthwise") for k in DW_SIZES]
    cat = np.concatenate(convs, axis=-3)
    z = conv2d(cat, p["proj"], "pointwise")
    gain = (1 + M)[..., None, :, :]
    return z * gain, (x, M, cat, z, gain)


def _sasf_backward(cache, g, p):
    x, M, cat, z, gain = cache
    gM = (g * z).sum(axis=-3)
    gcat, gproj = conv2d_backward(cat, p["proj"], g * gain, "pointwise")
    grads = {"proj": gproj}
    C = x.shape[-3]
    gx = np.zeros_like(x)
    for i, k in enumerate(DW_SIZES):
        gxi, grads[f"dw{k}"] = conv2d_backward(x, p[f"dw{k}"], gcat[..., i * C:(i + 1) * C, :, :], "depthwise")
        gx += gxi
    return gx, gM, grads


def sasf_branch(x, M, p):
    """Multi-scale depthwise branch gated by (1 + M); ``p`` has dw3/dw5/dw7/proj."""
    x = np.asarray(x)
    if M.shape != x.shape[:-3] + x.shape[-2:]:
        raise DimensionError(f"guidance {M.shape} vs features {x.shape}")
    return _sasf(x, M, p)[0]


# ---------------------------------------------------------------------------
# Mamba branch: four directional scans


def _to_seq(z, direction):
    """Grid (..., H, W, K) -> sequence (..., H*W, K) in the given scan order."""
    H, W, K = z.shape[-3:]
    if direction >= 2:
        z = np.swapaxes(z, -3, -2)
    s = z.reshape(*z.shape[:-3], H * W, K)
    return s[..., ::-1, :] if direction % 2 else s


def _from_seq(s, direction, H, W):
    K = s.shape[-1]
    if direction % 2:
        s = s[..., ::-1, :]
    if direction >= 2:
        return np.swapaxes(s.reshape(*s.shape[:-2], W, H, K), -3, -2)
    return s.reshape(*s.shape[:-2], H, W, K)


def _stack_dirs(z):
    return np.stack([_to_seq(z, d) for d in range(DIRECTIONS)])


def _unstack_sum(s, H, W):
    return sum(_from_seq(s[d], d, H, W) for d in range(DIRECTIONS))


def scan_orders(H, W):
    """(4, H*W) row-major positions visited by each direction (see ``_to_seq``)."""
    rows = np.arange(H * W)
    cols = rows.reshape(H, W).T.reshape(-1)
    return np.stack([rows, rows[::-1], cols, cols[::-1]])


def _mamba(x, R, E, p, method):
    H, W = x.shape[-2:]
    tok = np.moveaxis(x, -3, -1)
    delta0, B0, Cm, pre = scan.project(tok, p)
    delta, B, clamped = scan.modulate_params(delta0, B0, R, E)
    A = scan.state_matrix(p).astype(x.dtype)
    if method == "fused":
        # all directions share positions: scan in place instead of gathering copies
        flat = tok.shape[:-3] + (H * W,)
        seqs = [z.reshape(flat + z.shape[-1:]) for z in (tok, delta, B, Cm)]
        ysum, state = _kernels.multi_order_forward(*seqs[:2], A, *seqs[2:], scan_orders(H, W))
        y = ysum.reshape(tok.shape) / DIRECTIONS + p["D"] * tok
        core = (seqs, state)
    else:
        y4, core = scan.ssm_forward(_stack_dirs(tok), _stack_dirs(delta), A,
                                    _stack_dirs(B), _stack_dirs(Cm), p["D"], method)
        y = _unstack_sum(y4, H, W) / DIRECTIONS
    cache = (tok, R, E, delta0, B0, pre, clamped, A, core, H, W, method)
    return np.moveaxis(y, -1, -3), cache


def _mamba_backward(cache, g, p):
    tok, R, E, delta0, B0, pre, clamped, A, core, H, W, method = cache
    gt = np.moveaxis(g, -3, -1)
    if method == "fused":
        seqs, state = core
        gsum = (gt / DIRECTIONS).reshape(seqs[0].shape)
        gx, gdelta, gA, gB, gC = _kernels.multi_order_backward(*seqs[:2], A, *seqs[2:], gsum, state)
        gx, gdelta, gB, gC = (v.reshape(tok.shape[:-1] + v.shape[-1:]) for v in (gx, gdelta, gB, gC))
        gx = gx + gt * p["D"]
        gD = (gt * tok).reshape(-1, tok.shape[-1]).sum(axis=0)
    else:
        gx4, gdelta4, gA, gB4, gC4, gD = scan.ssm_backward(core, _stack_dirs(gt / DIRECTIONS))
        gx, gdelta, gB, gC = (_unstack_sum(v, H, W) for v in (gx4, gdelta4, gB4, gC4))
    gdelta0, gB0, gR, gE = scan.modulate_backward(delta0, B0, R, E, clamped, gdelta, gB)
    gtok, grads = scan.project_backward(tok, p, pre, gdelta0, gB0, gC)
    gtok = gtok + gx
    grads["A_log"] = gA * A
    grads["D"] = gD
    return np.moveaxis(gtok, -1, -3), gR, gE, grads


def mamba_branch(x, re, p, method="parallel"):
    """Mean of row/column, forward/backward modulated scans; ``re`` may be None."""
    x = np.asarray(x)
    R = E = None
    if re is not None:
        R, E = re.R, re.E
    return _mamba(x, R, E, p, method)[0]


# ---------------------------------------------------------------------------
# SE-style fusion


def _fusion(F_ssm, F_safs, M, x, p, se=True):
    cat = np.concatenate([F_ssm, F_safs, M[..., None, :, :]], axis=-3)
    z_s = conv2d(cat, p["ssm_w"], "pointwise")[..., 0, :, :] + p["ssm_b"][0]
    z_a = conv2d(cat, p["safs_w"], "pointwise")[..., 0, :, :] + p["safs_b"][0]
    T = softplus(p["T"])
    if se:
        w_s = sigmoid((z_s - z_a) / T)
    else:
        w_s = np.full_like(z_s, 0.5)
    w_a = 1 - w_s
    out = w_s[..., None, :, :] * F_ssm + w_a[..., None, :, :] * F_safs + x
    return out, (cat, z_s, z_a, T, w_s, F_ssm, F_safs, se)


def _fusion_backward(cache, g, p):
    cat, z_s, z_a, T, w_s, F_ssm, F_safs, se = cache
    dt = g.dtype
    ws = w_s[..., None, :, :]
    gF_ssm = g * ws
    gF_safs = g * (1 - ws)
    gx = g
    C = F_ssm.shape[-3]
    zero_head = {"ssm_w": np.zeros_like(p["ssm_w"]), "ssm_b": np.zeros_like(p["ssm_b"]),
                 "safs_w": np.zeros_like(p["safs_w"]), "safs_b": np.zeros_like(p["safs_b"]),
                 "T": np.zeros((), dtype=dt)}
    if not se:
        return gF_ssm, gF_safs, np.zeros_like(w_s), gx, zero_head
    gw = (g * (F_ssm - F_safs)).sum(axis=-3)
    gu = gw * w_s * (1 - w_s)
    gz_s = gu / T
    grads = {"T": np.asarray(-(gu * (z_s - z_a)).sum() / T * sigmoid(p["T"]), dtype=dt)}
    gcat = np.zeros_like(cat)
    for head, gz in (("ssm", gz_s), ("safs", -gz_s)):
        gci, grads[f"{head}_w"] = conv2d_backward(cat, p[f"{head}_w"], gz[..., None, :, :], "pointwise")
        grads[f"{head}_b"] = np.asarray([gz.sum()], dtype=dt)
        gcat += gci
    gF_ssm = gF_ssm + gcat[..., :C, :, :]
    gF_safs = gF_safs + gcat[..., C:2 * C, :, :]
    gM = gcat[..., 2 * C, :, :]
    return gF_ssm, gF_safs, gM, gx, grads


def fusion_weights(F_ssm, F_safs, M, p, se=True):
    """Per-pixel (w_ssm, w_safs); they sum to one."""
    _, cache = _fusion(F_ssm, F_safs, M, np.zeros_like(F_ssm), p, se)
    return cache[4], 1 - cache[4]


def se_fusion(F_ssm, F_safs, M, x_residual, p, se=True):
    return _fusion(F_ssm, F_safs, M, x_residual, p, se)[0]


# ---------------------------------------------------------------------------
# full block


def basm_forward_cached(F_e, F_d, p, cfg=None):
    """Block output and the cache consumed by :func:`basm_backward`."""
    cfg = cfg or BASMConfig()
    F_e = np.asarray(F_e)
    F_d = np.asarray(F_d)
    if F_e.shape != F_d.shape:
        raise DimensionError(f"F_e {F_e.shape} vs F_d {F_d.shape}")
    if cfg.fusion_input == "concat":
        cat_in = np.concatenate([F_e, F_d], axis=-3)
        x = conv2d(cat_in, p["mix.w"], "pointwise") + p["mix.b"][:, None, None]
    else:
        cat_in = None
        x = F_e + F_d
    if not cfg.enabled:
        return x, {"cfg": cfg, "cat_in": cat_in, "x": x}
    M, guid_cache = guidance.guidance_forward(F_e, F_d, sub(p, "guid"))
    re = post_cache = None
    if cfg.modulation:
        re, post_cache = posterior.posterior_forward(M, sub(p, "post"))
    R = E = None
    if re is not None:
        R, E = re.R, re.E
    F_ssm, mamba_cache = _mamba(x, R, E, sub(p, "ssm"), cfg.method)
    F_safs, sasf_cache = _sasf(x, M, sub(p, "sasf"))
    out, fuse_cache = _fusion(F_ssm, F_safs, M, x, sub(p, "fuse"), cfg.se_fusion)
    cache = {"cfg": cfg, "cat_in": cat_in, "x": x, "M": M, "re": re,
             "w_ssm": fuse_cache[4], "guid": guid_cache, "post": post_cache,
             "mamba": mamba_cache, "sasf": sasf_cache, "fuse": fuse_cache}
    return out, cache


def basm_forward(F_e, F_d, p, cfg=None):
    return basm_forward_cached(F_e, F_d, p, cfg)[0]


def basm_backward(cache, g, p):
    """Returns (grad_F_e, grad_F_d, param_grads) for the flat parameter dict."""
    cfg = cache["cfg"]
    grads = {}
    if cfg.enabled:
        gF_ssm, gF_safs, gM, gx, gfuse = _fusion_backward(cache["fuse"], g, sub(p, "fuse"))
        _addto(grads, _prefixed("fuse", gfuse))
        gx_s, gM_s, gsasf = _sasf_backward(cache["sasf"], gF_safs, sub(p, "sasf"))
        _addto(grads, _prefixed("sasf", gsasf))
        gx_m, gR, gE, gssm = _mamba_backward(cache["mamba"], gF_ssm, sub(p, "ssm"))
        _addto(grads, _prefixed("ssm", gssm))
        gx = gx + gx_s + gx_m
        gM = gM + gM_s
        if cfg.modulation:
            gM_p, gpost = posterior.posterior_backward(cache["post"], gR, gE)
            _addto(grads, _prefixed("post", gpost))
            gM = gM + gM_p
        gF_e, gF_d, gguid = guidance.guidance_backward(cache["guid"], gM)
        _addto(grads, _prefixed("guid", gguid))
    else:
        gx = g
        gF_e = np.zeros_like(g)
        gF_d = np.zeros_like(g)
    if cfg.fusion_input == "concat":
        gcat, grads["mix.w"] = conv2d_backward(cache["cat_in"], p["mix.w"], gx, "pointwise")
        lead = tuple(range(gx.ndim - 3))
        grads["mix.b"] = gx.sum(axis=lead + (-2, -1))
        C = gx.shape[-3]
        gF_e = gF_e + gcat[..., :C, :, :]
        gF_d = gF_d + gcat[..., C:, :, :]
    else:
        gF_e = gF_e + gx
        gF_d = gF_d + gx
    for k, v in p.items():
        if k not in grads:
            grads[k] = np.zeros_like(v)
    return gF_e, gF_d, grads
