"""Overlap and surface-distance metrics for 2-D label masks.

Conventions (fixed so numbers are reproducible):

* a class absent from both masks scores dice = iou = 1;
* boundary pixels are foreground pixels with a 4-neighbour outside the object
  (the image edge counts as outside);
* HD95 and ASD pool the directed distances of both directions before taking
  the linear-interpolated 95th percentile / the mean;
* one empty boundary set against a non-empty one yields the image diagonal
  (in physical units) as a flagged sentinel; two empty sets give (0, 0).
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


def dice_iou(pred, gt, c):
    P = np.asarray(pred) == c
    G = np.asarray(gt) == c
    inter = int(np.count_nonzero(P & G))
    sp = int(np.count_nonzero(P))
    sg = int(np.count_nonzero(G))
    if sp + sg == 0:
        return 1.0, 1.0
    return 2.0 * inter / (sp + sg), inter / (sp + sg - inter)


def boundary(mask):
    mask = np.asarray(mask, dtype=bool)
    padded = np.pad(mask, 1)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:])
    return mask & ~interior


def surface_distances(pred, gt, c, spacing=(1.0, 1.0)):
    """Pooled directed boundary distances, or None if either boundary is empty."""
    bp = boundary(np.asarray(pred) == c)
    bg = boundary(np.asarray(gt) == c)
    if not bp.any() or not bg.any():
        return None
    d_pg = ndimage.distance_transform_edt(~bg, sampling=spacing)[bp]
    d_gp = ndimage.distance_transform_edt(~bp, sampling=spacing)[bg]
    return np.concatenate([d_pg, d_gp])


def hd95_asd(pred, gt, c, spacing=(1.0, 1.0), return_flag=False):
    pred = np.asarray(pred)
    bp_any = boundary(pred == c).any()
    bg_any = boundary(np.asarray(gt) == c).any()
    flag = False
    if not bp_any and not bg_any:
        result = (0.0, 0.0)
    elif not bp_any or not bg_any:
        H, W = pred.shape
        diag = math.hypot(H * spacing[0], W * spacing[1])
        result = (diag, diag)
        flag = True
    else:
        d = surface_distances(pred, gt, c, spacing)
        result = (float(np.percentile(d, 95)), float(d.mean()))
    return (*result, flag) if return_flag else result


@dataclass
class SegMetrics:
    dice: list = field(default_factory=list)
    iou: list = field(default_factory=list)
    hd95: list = field(default_factory=list)
    asd: list = field(default_factory=list)

    @property
    def mDice(self):
        return float(np.mean(self.dice)) if self.dice else float("nan")

    @property
    def mIoU(self):
        return float(np.mean(self.iou)) if self.iou else float("nan")


def image_metrics(pred, gt, num_classes, spacing=(1.0, 1.0)):
    """Per foreground class (1..num_classes-1) metrics for one image."""
    m = SegMetrics()
    for c in range(1, num_classes):
        d, i = dice_iou(pred, gt, c)
        h, a = hd95_asd(pred, gt, c, spacing)
        m.dice.append(d)
        m.iou.append(i)
        m.hd95.append(h)
        m.asd.append(a)
    return m


def metric_records(image_id, pred, gt, num_classes, spacing=(1.0, 1.0)):
    """JSON-lines records {image, class, dice, iou, hd95, asd}."""
    m = image_metrics(pred, gt, num_classes, spacing)
    return [
        {"image": image_id, "class": c, "dice": m.dice[c - 1], "iou": m.iou[c - 1],
         "hd95": m.hd95[c - 1], "asd": m.asd[c - 1]}
        for c in range(1, num_classes)
    ]


def dataset_scores(preds, gts, num_classes):
    """Per-class Dice/IoU from overlap counts pooled over all images.

    Returns (per_class_dice, per_class_iou, mDice, mIoU) over foreground classes.
    """
    preds = np.asarray(preds)
    gts = np.asarray(gts)
    dice, iou = [], []
    for c in range(1, num_classes):
        P = preds == c
        G = gts == c
        inter = np.count_nonzero(P & G)
        sp = np.count_nonzero(P)
        sg = np.count_nonzero(G)
        if sp + sg == 0:
            dice.append(1.0)
            iou.append(1.0)
        else:
            dice.append(2.0 * inter / (sp + sg))
            iou.append(inter / (sp + sg - inter))
    return dice, iou, float(np.mean(dice)), float(np.mean(iou))
