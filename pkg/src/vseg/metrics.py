"""Evaluation metrics over predicted label volumes.

Region-level metrics binarize prediction and truth by membership in a
named set of class codes, then report exact-count overlap statistics.
A denominator of zero makes a metric undefined; undefined is reported
as None, never silently as 0 or 1.
"""

from dataclasses import dataclass, field

import numpy as np


def default_region_map(class_count=5):
    """Named evaluation regions.

    whole: every foreground class together.  For the five-label layout
    (0 background, 1 necrosis, 2 edema, 3 non-enhancing, 4 enhancing)
    two more regions are defined: core excludes the edema class, and
    enhanced is the enhancing class alone.
    """
    regions = {"whole": tuple(range(1, class_count))}
    if class_count == 5:
        regions["core"] = (1, 3, 4)
        regions["enhanced"] = (4,)
    return regions


@dataclass
class RegionMetrics:
    dice: float | None
    precision: float | None
    sensitivity: float | None
    specificity: float | None
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0


def _ratio(num, den):
    return None if den == 0 else num / den


def confusion_metrics(pred, truth, region_classes):
    """Exact confusion counts and derived ratios for one region."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    region = np.asarray(sorted(region_classes))
    pm = np.isin(pred, region)
    tm = np.isin(truth, region)
    tp = int(np.sum(pm & tm))
    fp = int(np.sum(pm & ~tm))
    fn = int(np.sum(~pm & tm))
    tn = int(np.sum(~pm & ~tm))
    return RegionMetrics(
        dice=_ratio(2 * tp, 2 * tp + fp + fn),
        precision=_ratio(tp, tp + fp),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        tp=tp, fp=fp, fn=fn, tn=tn,
    )


def evaluate_regions(pred, truth, regions=None, class_count=None):
    """confusion_metrics for every named region."""
    if regions is None:
        if class_count is None:
            class_count = int(max(pred.max(), truth.max())) + 1
        regions = default_region_map(class_count)
    return {name: confusion_metrics(pred, truth, cls) for name, cls in regions.items()}


def mean_region_metrics(rows):
    """Field-wise mean over RegionMetrics, skipping undefined entries.

    If a field is undefined in every row the mean is undefined too.
    """
    def avg(vals):
        vals = [v for v in vals if v is not None]
        return None if not vals else float(np.mean(vals))

    return RegionMetrics(
        dice=avg([r.dice for r in rows]),
        precision=avg([r.precision for r in rows]),
        sensitivity=avg([r.sensitivity for r in rows]),
        specificity=avg([r.specificity for r in rows]),
    )


def class_frequencies(label_volumes, class_count):
    """Mean per-class voxel fraction across a dataset of label volumes."""
    if not label_volumes:
        raise ValueError("empty dataset")
    total = np.zeros(class_count, dtype=np.float64)
    for lab in label_volumes:
        lab = np.asarray(lab)
        if lab.max() >= class_count:
            raise ValueError(f"label {lab.max()} outside class count {class_count}")
        counts = np.bincount(lab.ravel(), minlength=class_count)
        total += counts / lab.size
    return total / len(label_volumes)


def multiclass_jaccard_reference(pred, truth):
    """Reference agreement score on raw label codes.

    sum(min(p, t)) / sum(max(p, t)) over voxels, reading the integer
    class codes as magnitudes.  Reported for comparison only; it is not
    differentiable and is never used as a training objective.  Two
    all-background volumes agree perfectly and score 1.
    """
    pred = np.asarray(pred, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    num = float(np.minimum(pred, truth).sum())
    den = float(np.maximum(pred, truth).sum())
    return 1.0 if den == 0 else num / den
