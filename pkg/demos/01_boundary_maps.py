"""Where does a boundary-aware block look?

Builds one synthetic image, turns it into two crude feature stacks (raw
intensities and a blurred copy stand in for encoder and decoder features),
and pushes them through guidance and posterior.  The maps land as PGMs in
``demo_out/boundary`` so they can be opened in any image viewer.

    python3 demos/01_boundary_maps.py
"""

from pathlib import Path

import numpy as np
from scipy import ndimage

from csmunet import guidance, io, posterior
from csmunet.harness.data import synth_image

out = Path("demo_out/boundary")
out.mkdir(parents=True, exist_ok=True)

rng = np.random.default_rng(3)
image, mask = synth_image(rng)
print("classes present:", sorted(int(c) for c in np.unique(mask) if c))

# two feature stacks that disagree mostly at edges
F_e = np.stack([image, image ** 2, np.ones_like(image)])
F_d = np.stack([ndimage.gaussian_filter(c, 2.0) for c in F_e])

p = guidance.init_params(rng, 3, np.float64)
p["w_b"] = np.asarray(40.0)        # lean on the edge evidence for this demo
p["w_f"] = np.asarray(0.0)
M = guidance.build_guidance_map(F_e, F_d, p)

post = posterior.init_params(rng, dtype=np.float64)
post["tau"] = np.asarray(np.log(np.median(M) / (1 - np.median(M))))
re = posterior.boundary_posterior(M, post)

edge = mask != ndimage.grey_erosion(mask, size=3)
print(f"mean P_b on true object edges {re.P_b[edge].mean():.3f}, elsewhere {re.P_b[~edge].mean():.3f}")
print(f"retain R ranges over [{re.R.min():.2f}, {re.R.max():.2f}], enhance E over [{re.E.min():.2f}, {re.E.max():.2f}]")

io.write_pgm(out / "image.pgm", io.to_gray8(image))
io.write_pgm(out / "M.pgm", io.to_gray8(M))
io.write_pgm(out / "P_b.pgm", io.to_gray8(re.P_b))
print("wrote", ", ".join(sorted(p.name for p in out.glob("*.pgm"))), "to", out)
