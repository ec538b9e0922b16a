"""Synthetic low-contrast hollow-organ proxies.

Each image holds one to three non-overlapping objects on a noisy flat
background, at most one per class:

    1  filled ellipse
    2  closed thin ring, wall 1-2 px
    3  open C-shaped ring, wall 3-4 px, with a 60-110 degree gap

Objects are brighter than the background by 0.1-0.2.  Image ``i`` of a dataset
is drawn from its own seed stream ``(seed, i)``, so generation is deterministic
and prefix-stable in ``n_images``.
"""

import math
from pathlib import Path

import numpy as np

from ..io import read_pgm, to_gray8, write_pgm

CLASSES = 4


def _ellipse(yy, xx, cy, cx, rng):
    a, b = rng.uniform(4.0, 9.0, 2)
    th = rng.uniform(0, math.pi)
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(th) + dy * math.sin(th)
    v = -dx * math.sin(th) + dy * math.cos(th)
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0, max(a, b)


def _ring(yy, xx, cy, cx, rng):
    r = rng.uniform(6.0, 11.0)
    wall = int(rng.integers(1, 3))
    d = np.hypot(yy - cy, xx - cx)
    return (d <= r) & (d > r - wall), r


def _c_ring(yy, xx, cy, cx, rng):
    r = rng.uniform(6.0, 11.0)
    wall = int(rng.integers(3, 5))
    gap = math.radians(rng.uniform(60.0, 110.0))
    start = rng.uniform(-math.pi, math.pi)
    d = np.hypot(yy - cy, xx - cx)
    ang = np.angle(np.exp(1j * (np.arctan2(yy - cy, xx - cx) - start)))
    return (d <= r) & (d > r - wall) & (np.abs(ang) > gap / 2), r


_SHAPES = {1: _ellipse, 2: _ring, 3: _c_ring}


def synth_image(rng, size=64, noise=0.03):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    bg = rng.uniform(0.2, 0.4)
    image = np.full((size, size), bg)
    mask = np.zeros((size, size), dtype=np.int64)
    count = int(rng.integers(1, 4))
    classes = sorted(rng.choice([1, 2, 3], size=count, replace=False).tolist())
    placed = []
    for c in classes:
        for _ in range(50):
            extent = 12.0
            cy, cx = rng.uniform(extent + 1, size - extent - 2, 2)
            if all(math.hypot(cy - py, cx - px) > extent + pe + 2 for py, px, pe in placed):
                break
        else:
            continue
        shape, radius = _SHAPES[c](yy, xx, cy, cx, rng)
        shape &= mask == 0
        if not shape.any():
            continue
        placed.append((cy, cx, radius))
        mask[shape] = c
        image[shape] = bg + rng.uniform(0.1, 0.2)
    image = image + rng.normal(0.0, noise, image.shape)
    return image.astype(np.float32), mask


def synth_dataset(seed, n_images, size=64, noise=0.03):
    """Images (n, 1, H, W) float32 and label masks (n, H, W) int64."""
    images = np.zeros((n_images, 1, size, size), dtype=np.float32)
    masks = np.zeros((n_images, size, size), dtype=np.int64)
    for i in range(n_images):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        images[i, 0], masks[i] = synth_image(rng, size, noise)
    return images, masks


def save_dataset(directory, images, masks):
    """Write ``imgNNNN.pgm`` / ``maskNNNN.pgm`` pairs (mask pixels are labels)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, (img, m) in enumerate(zip(images, masks)):
        write_pgm(directory / f"img{i:04d}.pgm", to_gray8(img[0]))
        write_pgm(directory / f"mask{i:04d}.pgm", m.astype(np.uint8))


def load_dataset(directory):
    directory = Path(directory)
    paths = sorted(directory.glob("img*.pgm"))
    if not paths:
        raise FileNotFoundError(f"no img*.pgm files in {directory}")
    images, masks = [], []
    for p in paths:
        images.append(read_pgm(p).astype(np.float32) / 255.0)
        masks.append(read_pgm(directory / p.name.replace("img", "mask")).astype(np.int64))
    return np.stack(images)[:, None], np.stack(masks)
