"""Three-level toy U-Net with CMSA at the bottleneck and BASM at both skips.

    enc1 (w0, HxW) -> pool -> enc2 (w1, H/2) -> pool -> enc3 (w2, H/4) -> CMSA
    dec2 = block(BASM(enc2, up(b)))    dec1 = block(BASM(enc1, up(dec2)))
    heads: logits at H/4, H/2 and H (deep supervision)

Each encoder/decoder block is two 3x3 conv + ReLU layers; downsampling is 2x2
average pooling, upsampling is nearest-neighbour followed by a 1x1 projection.
With a module switched off the skip degenerates to ``enc + up`` and the
bottleneck passes through unchanged.
"""

import math

import numpy as np

from .. import basm, cmsa
from ..tensor import conv2d, conv2d_backward, conv2d_dense


def _he(rng, shape, fan_in):
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def init_params(cfg):
    """Parameter dict for ``cfg``; backbone init is independent of module switches."""
    ss = np.random.SeedSequence(cfg.seed)
    rb, r1, r2, rc = (np.random.default_rng(s) for s in ss.spawn(4))
    w0, w1, w2 = cfg.widths
    K = cfg.classes
    p = {}

    def block(name, cin, cout):
        p[f"{name}.c1.w"] = _he(rb, (cout, cin, 3, 3), cin * 9)
        p[f"{name}.c1.b"] = np.zeros(cout, np.float32)
        p[f"{name}.c2.w"] = _he(rb, (cout, cout, 3, 3), cout * 9)
        p[f"{name}.c2.b"] = np.zeros(cout, np.float32)

    block("enc1", 1, w0)
    block("enc2", w0, w1)
    block("enc3", w1, w2)
    for name, cin, cout in (("up2", w2, w1), ("up1", w1, w0)):
        p[f"{name}.w"] = _he(rb, (cout, cin), cin)
        p[f"{name}.b"] = np.zeros(cout, np.float32)
    block("dec2", w1, w1)
    block("dec1", w0, w0)
    for name, cin in (("head3", w2), ("head2", w1), ("head1", w0)):
        p[f"{name}.w"] = _he(rb, (K, cin), cin)
        p[f"{name}.b"] = np.zeros(K, np.float32)
    if cfg.basm_enabled:
        for name, rng, C in (("basm2", r2, w1), ("basm1", r1, w0)):
            bp = basm.init_params(rng, C, cfg.basm_state, cfg.mu_R, cfg.mu_E, cfg.basm_fusion_input)
            p.update({f"{name}.{k}": v for k, v in bp.items()})
    if cfg.cmsa_enabled:
        cp = cmsa.init_params(rc, cfg.cmsa_d_model, cfg.cmsa_state,
                              cfg.cmsa_lambda_init, cfg.cmsa_Lambda_init)
        p.update({f"cmsa.{k}": v for k, v in cp.items()})
    return p


def _sub(p, prefix):
    return basm.sub(p, prefix)


# ---------------------------------------------------------------------------
# layers


def _conv_relu(x, w, b):
    z, cols = conv2d_dense(x, w)
    z += b[:, None, None]
    return np.maximum(z, 0), (x, z, cols)


def _conv_relu_backward(cache, g, w):
    x, z, cols = cache
    gz = g * (z > 0)
    gx, gw = conv2d_backward(x, w, gz, "dense", cols=cols)
    return gx, gw, gz.sum(axis=(0, 2, 3))


def _block(x, p, name):
    h, c1 = _conv_relu(x, p[f"{name}.c1.w"], p[f"{name}.c1.b"])
    y, c2 = _conv_relu(h, p[f"{name}.c2.w"], p[f"{name}.c2.b"])
    return y, (c1, c2)


def _block_backward(cache, g, p, name, grads):
    c1, c2 = cache
    gh, grads[f"{name}.c2.w"], grads[f"{name}.c2.b"] = _conv_relu_backward(c2, g, p[f"{name}.c2.w"])
    gx, grads[f"{name}.c1.w"], grads[f"{name}.c1.b"] = _conv_relu_backward(c1, gh, p[f"{name}.c1.w"])
    return gx


def _pool(x):
    B, C, H, W = x.shape
    return x.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))


def _pool_backward(g):
    return np.repeat(np.repeat(g, 2, axis=2), 2, axis=3) / 4


def _up(x):
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def _up_backward(g):
    B, C, H, W = g.shape
    return g.reshape(B, C, H // 2, 2, W // 2, 2).sum(axis=(3, 5))


def _pw(x, p, name):
    return conv2d(x, p[f"{name}.w"], "pointwise") + p[f"{name}.b"][:, None, None]


def _pw_backward(x, g, p, name, grads):
    gx, grads[f"{name}.w"] = conv2d_backward(x, p[f"{name}.w"], g, "pointwise")
    grads[f"{name}.b"] = g.sum(axis=(0, 2, 3))
    return gx


# ---------------------------------------------------------------------------
# network


def forward(images, p, cfg):
    """Logits per supervision level, finest first, plus the backward cache."""
    x = np.asarray(images, dtype=p["enc1.c1.w"].dtype)
    bcfg = cfg.basm_config()
    ccfg = cfg.cmsa_config()
    c = {}
    e1, c["enc1"] = _block(x, p, "enc1")
    e2, c["enc2"] = _block(_pool(e1), p, "enc2")
    e3, c["enc3"] = _block(_pool(e2), p, "enc3")
    if cfg.cmsa_enabled:
        bott, c["cmsa"] = cmsa.cmsa_forward_cached(e3, _sub(p, "cmsa"), ccfg)
    else:
        bott = e3
    u2 = _up(bott)
    d2 = _pw(u2, p, "up2")
    if cfg.basm_enabled:
        s2, c["basm2"] = basm.basm_forward_cached(e2, d2, _sub(p, "basm2"), bcfg)
    else:
        s2 = e2 + d2
    dec2, c["dec2"] = _block(s2, p, "dec2")
    u1 = _up(dec2)
    d1 = _pw(u1, p, "up1")
    if cfg.basm_enabled:
        s1, c["basm1"] = basm.basm_forward_cached(e1, d1, _sub(p, "basm1"), bcfg)
    else:
        s1 = e1 + d1
    dec1, c["dec1"] = _block(s1, p, "dec1")
    logits = [_pw(dec1, p, "head1"), _pw(dec2, p, "head2"), _pw(bott, p, "head3")]
    c["act"] = {"bott": bott, "u2": u2, "u1": u1, "dec1": dec1, "dec2": dec2}
    return logits, c


def _merge(grads, prefix, sub_grads):
    for k, v in sub_grads.items():
        grads[f"{prefix}.{k}"] = v


def backward(cache, glogits, p, cfg):
    """Gradients for every parameter given per-level logit gradients."""
    c = cache
    a = c["act"]
    grads = {}
    g1, g2, g3 = glogits
    gdec1 = _pw_backward(a["dec1"], g1, p, "head1", grads)
    gdec2 = _pw_backward(a["dec2"], g2, p, "head2", grads)
    gbott = _pw_backward(a["bott"], g3, p, "head3", grads)
    gs1 = _block_backward(c["dec1"], gdec1, p, "dec1", grads)
    if cfg.basm_enabled:
        ge1, gd1, gb = basm.basm_backward(c["basm1"], gs1, _sub(p, "basm1"))
        _merge(grads, "basm1", gb)
    else:
        ge1, gd1 = gs1, gs1
    gdec2 = gdec2 + _up_backward(_pw_backward(a["u1"], gd1, p, "up1", grads))
    gs2 = _block_backward(c["dec2"], gdec2, p, "dec2", grads)
    if cfg.basm_enabled:
        ge2, gd2, gb = basm.basm_backward(c["basm2"], gs2, _sub(p, "basm2"))
        _merge(grads, "basm2", gb)
    else:
        ge2, gd2 = gs2, gs2
    gbott = gbott + _up_backward(_pw_backward(a["u2"], gd2, p, "up2", grads))
    if cfg.cmsa_enabled:
        ge3, gc = cmsa.cmsa_backward(c["cmsa"], gbott, _sub(p, "cmsa"))
        _merge(grads, "cmsa", gc)
    else:
        ge3 = gbott
    ge2 = ge2 + _pool_backward(_block_backward(c["enc3"], ge3, p, "enc3", grads))
    ge1 = ge1 + _pool_backward(_block_backward(c["enc2"], ge2, p, "enc2", grads))
    _block_backward(c["enc1"], ge1, p, "enc1", grads)
    return grads


def predict(images, p, cfg, batch=8):
    """Arg-max labels at full resolution."""
    out = []
    for i in range(0, len(images), batch):
        logits, _ = forward(images[i:i + batch], p, cfg)
        out.append(logits[0].argmax(axis=1))
    return np.concatenate(out) if out else np.zeros((0,) + images.shape[-2:], dtype=np.int64)


def param_count(p):
    return int(sum(v.size for v in p.values()))
