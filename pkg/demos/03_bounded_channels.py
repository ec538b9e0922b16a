"""Why the channel scan clips its transitions.

Scans 256 channel tokens with a transition slightly above one.  Unclipped,
the state grows geometrically; with the clip the state norm stays below the
geometric-series bound max_i ||Bbar_i u_i|| / (1 - Lambda).

    python3 demos/03_bounded_channels.py
"""

import numpy as np

from csmunet import cmsa

rng = np.random.default_rng(0)
p = cmsa.init_params(rng, d_model=3, state=2, Lambda_init=0.9, dtype=np.float64)
p["ssm.A"] = np.full_like(p["ssm.A"], 0.02)
p["ssm.b_delta"] = np.full_like(p["ssm.b_delta"], 0.5)
tokens = np.abs(rng.standard_normal((256, 3)))

for clip in (False, True):
    cfg = cmsa.CMSAConfig(groups=1, clip=clip, method="sequential")
    _, trace = cmsa.grouped_bounded_scan(tokens, p, cfg)
    norms = np.sqrt((trace.h ** 2).sum(axis=(-2, -1)))[0]
    bound = trace.beta.max() / (1 - trace.Lambda)
    report = cmsa.boundedness_check(trace, strict=False)
    print(f"clip={clip!s:5}: ||h|| at k=16,64,255 -> {norms[16]:.3g}, {norms[64]:.3g}, {norms[255]:.3g}; "
          f"bound {bound:.3g}; violations {len(report.violations)}")
