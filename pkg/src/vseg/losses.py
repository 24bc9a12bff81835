"""Overlap losses on per-class probability volumes.

Classes are scored one against all: the network emits an independent
sigmoid probability volume per class, and the loss sums a per-class
overlap distance.  Targets arrive as integer label volumes and are
one-hot encoded on the fly.
"""

import numpy as np

SMOOTH_EPS = 1e-7


def one_hot(labels, cls, dtype=np.float64):
    """Binary mask of one class code, as floats matching the probs."""
    return (np.asarray(labels) == cls).astype(dtype)


def foreground_classes(class_count):
    return tuple(range(1, class_count))


def jaccard(p, t, eps=SMOOTH_EPS):
    """Smoothed soft overlap-over-union of two volumes.

    inter / (sum(p^2) + sum(t^2) - inter), with eps added to both the
    numerator and denominator so two empty volumes score a perfect 1.
    """
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    inter = float(np.sum(p * t))
    denom = float(np.sum(p * p)) + float(np.sum(t * t)) - inter
    return (inter + eps) / (denom + eps)


def dice(p, t, eps=SMOOTH_EPS):
    """Smoothed soft dice; algebraically equal to 2j/(1+j) for the
    jaccard value j above, smoothing included."""
    p = np.asarray(p, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {t.shape}")
    inter = float(np.sum(p * t))
    denom = float(np.sum(p * p)) + float(np.sum(t * t))
    return (2.0 * inter + 2.0 * eps) / (denom + 2.0 * eps)


def jaccard_loss(probs, labels, classes=None, eps=SMOOTH_EPS):
    """Sum over classes of (1 - jaccard), plus the per-class terms.

    `probs` is (class_count, d, h, w); `classes` defaults to all
    foreground classes.  Each term lies in [0, 1].
    """
    probs = np.asarray(probs)
    if classes is None:
        classes = foreground_classes(probs.shape[0])
    per_class = {}
    for c in classes:
        if not 0 <= c < probs.shape[0]:
            raise ValueError(f"class {c} outside score volume with {probs.shape[0]} classes")
        per_class[c] = 1.0 - jaccard(probs[c], one_hot(labels, c), eps)
    return float(sum(per_class.values())), per_class


def jaccard_loss_grad(probs, labels, classes=None, eps=SMOOTH_EPS):
    """Gradient of jaccard_loss w.r.t. the probability volumes.

    With i = sum(p*t), d = sum(p^2) + sum(t^2) - i:

        d(jaccard)/dp_k = (t_k * (d + eps) - (i + eps) * (2 p_k - t_k)) / (d + eps)^2

    and the loss contribution is its negation.  Classes outside the
    requested set get zero gradient.
    """
    probs = np.asarray(probs)
    if classes is None:
        classes = foreground_classes(probs.shape[0])
    grad = np.zeros_like(probs, dtype=np.float64)
    for c in classes:
        p = probs[c].astype(np.float64, copy=False)
        t = one_hot(labels, c)
        inter = np.sum(p * t)
        denom = np.sum(p * p) + np.sum(t * t) - inter + eps
        dj = (t * denom - (inter + eps) * (2.0 * p - t)) / (denom * denom)
        grad[c] = -dj
    return grad.astype(probs.dtype, copy=False)


def cross_entropy(probs, labels, eps=SMOOTH_EPS):
    """Mean over voxels of -log p_true, probabilities clamped away from
    0 and 1.  The per-class volumes are read directly as probabilities;
    only the true class of each voxel contributes."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if labels.shape != probs.shape[1:]:
        raise ValueError(f"label shape {labels.shape} vs scores {probs.shape[1:]}")
    if labels.max() >= probs.shape[0]:
        raise ValueError(f"label {labels.max()} outside {probs.shape[0]} classes")
    flat = probs.reshape(probs.shape[0], -1)
    p_true = flat[labels.ravel(), np.arange(labels.size)]
    p_true = np.clip(p_true.astype(np.float64), eps, 1.0 - eps)
    return float(np.mean(-np.log(p_true)))


def cross_entropy_grad(probs, labels, eps=SMOOTH_EPS):
    """Gradient of cross_entropy w.r.t. the probability volumes: zero
    everywhere except each voxel's true class, where it is -1/(n * p);
    clamped voxels contribute zero."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    n = labels.size
    grad = np.zeros_like(probs, dtype=np.float64)
    flat_g = grad.reshape(probs.shape[0], -1)
    flat_p = probs.reshape(probs.shape[0], -1).astype(np.float64)
    cols = np.arange(n)
    p_true = flat_p[labels.ravel(), cols]
    live = (p_true > eps) & (p_true < 1.0 - eps)
    vals = np.where(live, -1.0 / (n * np.clip(p_true, eps, 1.0 - eps)), 0.0)
    flat_g[labels.ravel(), cols] = vals
    return grad.astype(probs.dtype, copy=False)
