"""Dice + cross-entropy with deep supervision.

For each level l with logits Z_l (B, K, h, w) and labels downsampled by
nearest neighbour (``gt[:, ::s, ::s]``):

    CE_l   = mean over pixels of -log softmax(Z_l)[gt]
    Dice_l = 1 - mean over (image, class) of (2 sum(p*y) + eps) / (sum p + sum y + eps)

and the total is sum_l w_l * (dice_weight * Dice_l + ce_weight * CE_l).
"""

import numpy as np

from ..cmsa import ConfigurationError

DICE_EPS = 1e-5


def softmax(z, axis=1):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def downsample_labels(gt, size):
    gt = np.asarray(gt)
    s = gt.shape[-1] // size
    return gt[..., ::s, ::s]


def _level(z, y, dice_w, ce_w):
    B, K, H, W = z.shape
    p = softmax(z)
    onehot = (y[:, None] == np.arange(K)[None, :, None, None]).astype(z.dtype)
    n = B * H * W
    logp = np.log(np.clip(p, np.finfo(z.dtype).tiny, None))
    ce = -(onehot * logp).sum() / n
    inter = (p * onehot).sum(axis=(2, 3))
    denom = p.sum(axis=(2, 3)) + onehot.sum(axis=(2, 3)) + DICE_EPS
    num = 2 * inter + DICE_EPS
    dice = 1 - (num / denom).mean()
    # d/dp of the dice term, then through the softmax Jacobian
    m = B * K
    gp = -(2 * onehot / denom[..., None, None] - (num / denom**2)[..., None, None]) / m
    gz_dice = p * (gp - (gp * p).sum(axis=1, keepdims=True))
    gz_ce = (p - onehot) / n
    loss = dice_w * dice + ce_w * ce
    return loss, dice_w * gz_dice + ce_w * gz_ce, float(dice), float(ce)


def dice_ce_loss(logits, gt, weights, dice_weight=1.0, ce_weight=1.0, return_parts=False):
    """Weighted deep-supervision loss and the gradient for each logits tensor."""
    if len(logits) != len(weights):
        raise ConfigurationError(f"{len(weights)} loss weights for {len(logits)} supervision levels")
    total = 0.0
    grads, parts = [], []
    for z, w in zip(logits, weights):
        y = downsample_labels(gt, z.shape[-1])
        loss, gz, d, c = _level(z, y, dice_weight, ce_weight)
        total += w * loss
        grads.append((w * gz).astype(z.dtype))
        parts.append({"dice": d, "ce": c})
    return (total, grads, parts) if return_parts else (total, grads)
