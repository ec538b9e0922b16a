"""How retain/enhance weights bend a selective scan.

A single-channel sequence with a pulse is scanned three times: unmodulated,
with R = 0.8 everywhere except a short "boundary" stretch, and with the same
retain map plus a doubled input gain at the boundary.  Lower timesteps mean
slower forgetting, so the pulse survives longer where R is high.

    python3 demos/02_modulated_scan.py
"""

import numpy as np

from csmunet import scan

L = 40
x = np.zeros((L, 1))
x[5] = 1.0
x[22] = 1.0                        # a second pulse inside the boundary stretch
delta0 = np.full((L, 1), 0.5)
A = np.array([[-1.0]])
B0 = np.ones((L, 1))
C = np.ones((L, 1))

P_b = np.zeros(L)
P_b[20:25] = 1.0                   # the "boundary"
R = 0.8 * (1 - P_b)
E = 1.0 * P_b

for label, r, e in (("plain", None, None), ("retain", R, None), ("retain+enhance", R, E)):
    delta, B, _ = scan.modulate_params(delta0, B0, r, e)
    y, _ = scan.ssm_forward(x, delta, A, B, C, method="sequential")
    print(f"{label:>15s}: y[6]={y[6, 0]:.4f}  y[19]={y[19, 0]:.4f}  y[23]={y[23, 0]:.4f}  y[30]={y[30, 0]:.6f}")

ratio = (delta0[0, 0] * 1.0) / (delta0[0, 0] * 0.2)
print(f"timestep ratio boundary/interior with mu_R = 0.8: {ratio:.1f}")
