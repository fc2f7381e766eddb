"""Multi-class Dice, optionally restricted to structure masks.

All masked metrics are S-class segment Dice scores evaluated on the mask's
voxels only, never binary structure Dice: they measure how well voxels of
a structure are assigned to their segments.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class MetricsReport:
    """Masked Dice summary; a metric is None when its mask is empty."""

    dice_o: float | None = None
    dice_b: float | None = None
    dice_a: float | None = None
    dice_v: float | None = None
    dice_inter: float | None = None
    dice_intra: float | None = None
    per_class: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "dice_o": self.dice_o,
            "dice_b": self.dice_b,
            "dice_a": self.dice_a,
            "dice_v": self.dice_v,
            "dice_inter": self.dice_inter,
            "dice_intra": self.dice_intra,
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
        }


def dice_per_class(gt, pred, mask=None):
    """Per-class Dice over mask voxels plus the macro average.

    Classes absent from both grids inside the mask are excluded from the
    macro; a class present in exactly one contributes 0. Returns
    ``({}, None)`` for an empty mask.
    """
    if tuple(gt.extent) != tuple(pred.extent):
        raise ValueError(f"extent mismatch: gt {gt.extent} vs pred {pred.extent}")
    k = max(gt.num_classes, pred.num_classes)
    if mask is None:
        y = gt.data.ravel()
        p = pred.data.ravel()
    else:
        mask = np.asarray(mask).astype(bool)
        if mask.shape != gt.data.shape:
            raise ValueError(f"mask shape {mask.shape} != grid shape {gt.data.shape}")
        y = gt.data[mask]
        p = pred.data[mask]
    if y.size == 0:
        return {}, None

    cy = np.bincount(y, minlength=k)
    cp = np.bincount(p, minlength=k)
    agree = y == p
    inter = np.bincount(y[agree], minlength=k)

    per_class = {}
    for s in range(1, k):
        denom = int(cy[s]) + int(cp[s])
        if denom == 0:
            continue
        per_class[s] = 2.0 * int(inter[s]) / denom
    if not per_class:
        return per_class, None
    return per_class, float(np.mean(list(per_class.values())))


def evaluate(pred, phantom):
    """Structure-masked Dice report of a prediction against a phantom's truth.

    The prediction must already be at the ground-truth extent (reconstruct
    there first).
    """
    gt = phantom.segments
    if tuple(pred.extent) != tuple(gt.extent):
        raise ValueError(
            f"prediction extent {pred.extent} != ground truth extent {gt.extent}")
    masks = {
        "dice_o": phantom.lung_mask.data > 0,
        "dice_b": phantom.bronchus_labels.data > 0,
        "dice_a": phantom.artery_labels.data > 0,
        "dice_v": phantom.vein_labels.data > 0,
        "dice_inter": phantom.vein_kind.data == 2,
        "dice_intra": phantom.vein_kind.data == 1,
    }
    report = MetricsReport()
    for name, mask in masks.items():
        per_class, macro = dice_per_class(gt, pred, mask)
        setattr(report, name, macro)
        if name == "dice_o":
            report.per_class = per_class
    return report
