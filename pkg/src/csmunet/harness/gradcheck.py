"""Finite-difference audit of every hand-written adjoint (float64).

Each check builds a small random instance, contracts the module output with a
fixed random cotangent and compares the analytic gradient of every input and
parameter group against central differences.
"""

import math
from typing import NamedTuple

import numpy as np

from .. import basm, cmsa, scan
from ..tensor import finite_diff_grad, rel_error
from .loss import dice_ce_loss

STEP = 1e-6
TOL = 1e-4
# Central differences carry round-off of about eps * sum|terms| / STEP per
# element, where the terms are the summands of the contracted output.  A
# relative test cannot resolve gradients below that, so the norm used as the
# denominator is floored at noise / TOL (at least NORM_FLOOR).  This covers
# groups whose true gradient is exactly zero, e.g. the hard threshold.
NORM_FLOOR = 1e-7


def noise_floor(magnitude, size):
    noise = np.finfo(np.float64).eps * max(magnitude, 1.0) / STEP * math.sqrt(size)
    return max(NORM_FLOOR, noise / TOL)


class Row(NamedTuple):
    module: str
    group: str
    rel_error: float
    grad_norm: float

    @property
    def ok(self):
        return self.rel_error <= TOL


def _compare(module, analytic, f, values, magnitude):
    rows = []
    for name, x in values.items():
        num = finite_diff_grad(f(name), x, STEP)
        floor = noise_floor(magnitude, np.size(x))
        rows.append(Row(module, name, rel_error(analytic[name], num, floor=floor),
                        float(np.linalg.norm(analytic[name]))))
    return rows


def _param_loss(fwd, p, inputs, go):
    """Factory: name -> function of that tensor with everything else fixed."""
    def make(name):
        def f(v):
            q = dict(p)
            kw = dict(inputs)
            if name in kw:
                kw[name] = v
            else:
                q[name] = v
            return float((fwd(q, **kw) * go).sum())
        return f
    return make


def check_scan(rng):
    C, N, L = 3, 4, 9
    p = scan.init_params(rng, C, N, dtype=np.float64)
    p["W_delta"] = rng.standard_normal((C, C)) * 0.5
    p["D"] = rng.standard_normal(C)
    tokens = rng.standard_normal((2, L, C))
    R = rng.uniform(0.0, 0.9, (2, L))
    E = rng.uniform(0.0, 1.2, (2, L))
    go = rng.standard_normal((2, L, C))
    seq = scan.ScanSequence(tokens, R, E)
    _, cache = scan.scan_forward(seq, p, "parallel")
    g = scan.scan_backward(cache, go)

    def fwd(q, tokens, R, E):
        return scan.scan_forward(scan.ScanSequence(tokens, R, E), q, "parallel")[0]
    inputs = {"tokens": tokens, "R": R, "E": E}
    mag = np.abs(fwd(p, **inputs) * go).sum()
    return _compare("scan", g, _param_loss(fwd, p, inputs, go), {**inputs, **p}, mag)


BASM_VARIANTS = {
    "full": basm.BASMConfig(),
    "concat": basm.BASMConfig(fusion_input="concat"),
    "no-se": basm.BASMConfig(se_fusion=False),
    "no-mod": basm.BASMConfig(modulation=False),
}


def check_basm(rng, variant="full"):
    cfg = BASM_VARIANTS[variant]
    C, H, W = 3, 6, 5
    p = basm.init_params(rng, C, state=3, fusion_input=cfg.fusion_input, dtype=np.float64)
    p["ssm.W_delta"] = rng.standard_normal((C, C)) * 0.5
    F_e = rng.standard_normal((2, C, H, W))
    F_d = rng.standard_normal((2, C, H, W))
    go = rng.standard_normal((2, C, H, W))
    # put the threshold inside the range of M so the distance field is non-trivial
    _, c0 = basm.basm_forward_cached(F_e, F_d, p, cfg)
    med = float(np.median(c0["M"]))
    p["post.tau"] = np.asarray(math.log(med / (1 - med)) + 1e-4)
    _, cache = basm.basm_forward_cached(F_e, F_d, p, cfg)
    gF_e, gF_d, g = basm.basm_backward(cache, go, p)
    g = {**g, "F_e": gF_e, "F_d": gF_d}

    def fwd(q, F_e, F_d):
        return basm.basm_forward(F_e, F_d, q, cfg)
    inputs = {"F_e": F_e, "F_d": F_d}
    mag = np.abs(fwd(p, **inputs) * go).sum()
    return _compare(f"basm[{variant}]", g, _param_loss(fwd, p, inputs, go), {**inputs, **p}, mag)


# (Lambda_init, lambda_init): one regime per branch of the min(exp(dA), lambda, Lambda)
CMSA_REGIMES = {"Lambda-active": (0.5, 2.0), "lambda-active": (0.95, 0.3), "mixed": (0.9, 1.0)}


def check_cmsa(rng, regime="mixed"):
    Lam0, lam0 = CMSA_REGIMES[regime]
    p = cmsa.init_params(rng, d_model=5, state=3, lambda_init=lam0, Lambda_init=Lam0,
                         dtype=np.float64)
    p["ssm.W_delta"] = rng.standard_normal(p["ssm.W_delta"].shape)
    p["ssm.A"] = rng.standard_normal(p["ssm.A"].shape)
    cfg = cmsa.CMSAConfig(groups=4)
    X = rng.standard_normal((2, 8, 4, 4))
    go = rng.standard_normal(X.shape)
    _, cache = cmsa.cmsa_forward_cached(X, p, cfg)
    gX, g = cmsa.cmsa_backward(cache, go, p)
    g = {**g, "X": gX}

    def fwd(q, X):
        return cmsa.cmsa_forward(X, q, cfg)
    mag = np.abs(fwd(p, X) * go).sum()
    return _compare(f"cmsa[{regime}]", g, _param_loss(fwd, p, {"X": X}, go), {"X": X, **p}, mag)


def check_loss(rng):
    zs = [rng.standard_normal((2, 4, 8, 8)), rng.standard_normal((2, 4, 4, 4))]
    gt = rng.integers(0, 4, (2, 8, 8))
    weights = (1.0, 0.5)
    _, grads = dice_ce_loss(zs, gt, weights)
    rows = []
    for i in range(len(zs)):
        def f(z, i=i):
            zz = list(zs)
            zz[i] = z
            return dice_ce_loss(zz, gt, weights)[0]
        num = finite_diff_grad(f, zs[i], STEP)
        floor = noise_floor(abs(f(zs[i])), zs[i].size)
        rows.append(Row("loss", f"logits[{i}]", rel_error(grads[i], num, floor=floor),
                        float(np.linalg.norm(grads[i]))))
    return rows


def run_all(seed=0):
    rng = np.random.default_rng(seed)
    rows = check_scan(rng)
    for v in BASM_VARIANTS:
        rows += check_basm(rng, v)
    for r in CMSA_REGIMES:
        rows += check_cmsa(rng, r)
    rows += check_loss(rng)
    return rows
