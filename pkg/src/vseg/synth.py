"""Synthetic labeled-volume generators.

Three families: random ellipsoid blobs per class ("spheres"), a narrow
tube containing nested bone/joint chains with strongly imbalanced class
frequencies ("hand-like"), and healthy mirrored variants of existing
volumes.  All take a numpy Generator and are bit-reproducible for a
fixed seed.  Images are channels-first float32, labels uint8.
"""

import numpy as np

from .augment import mirror_hemisphere

BACKGROUND = 0


def _coordinate_grid(shape):
    return np.meshgrid(*(np.arange(n, dtype=np.float64) for n in shape), indexing="ij")


def _ellipsoid_mask(shape, center, semi_axes):
    zz, yy, xx = _coordinate_grid(shape)
    terms = (
        ((zz - center[0]) / semi_axes[0]) ** 2
        + ((yy - center[1]) / semi_axes[1]) ** 2
        + ((xx - center[2]) / semi_axes[2]) ** 2
    )
    return terms <= 1.0


def _render_image(labels, class_means, channels, rng, noise=0.05):
    shape = labels.shape
    image = np.zeros((channels,) + shape, dtype=np.float64)
    for cls, mean in enumerate(class_means):
        mask = labels == cls
        for c in range(channels):
            # each channel sees the same anatomy at slightly shifted contrast
            image[c][mask] += mean * (1.0 + 0.1 * c)
    image += rng.normal(0.0, noise, size=image.shape)
    return image.astype(np.float32)


def spheres_volume(rng, shape=(32, 32, 32), class_count=3, channels=1, blobs_per_class=2):
    """Random ellipsoids for every foreground class; later classes
    overwrite earlier ones where they overlap."""
    if class_count < 2:
        raise ValueError("need at least background plus one foreground class")
    labels = np.zeros(shape, dtype=np.uint8)
    for cls in range(1, class_count):
        for _ in range(blobs_per_class):
            center = [rng.uniform(0.2 * n, 0.8 * n) for n in shape]
            semi = [rng.uniform(0.08 * n, 0.18 * n) for n in shape]
            labels[_ellipsoid_mask(shape, center, semi)] = cls
    means = [0.1] + [0.35 + 0.5 * cls / (class_count - 1) for cls in range(1, class_count)]
    return _render_image(labels, means, channels, rng), labels


def sphere_volume(rng, shape=(16, 16, 16), channels=1):
    """One bright ball on a dark background: the 2-class overfit target."""
    center = [(n - 1) / 2.0 + rng.uniform(-1.0, 1.0) for n in shape]
    radius = 0.30 * min(shape)
    labels = np.zeros(shape, dtype=np.uint8)
    labels[_ellipsoid_mask(shape, center, (radius,) * 3)] = 1
    return _render_image(labels, [0.1, 0.9], channels, rng, noise=0.02), labels


def hand_like_volume(rng, shape=(32, 32, 24), channels=1):
    """A finger-like column: a tissue sheath around a bone/joint core.

    Four classes with strongly imbalanced frequencies patterned on hand
    anatomy: the sheath (class 1) covers a few percent of the volume;
    short bone segments (2) and thin joint disks (3) alternate along
    the interior core and each stay well under 0.1% of the voxels.
    """
    labels = np.zeros(shape, dtype=np.uint8)
    d, h, w = shape
    # a gently drifting center line along the first axis
    z = np.arange(d, dtype=np.float64)
    y0, x0 = rng.uniform(0.4 * h, 0.6 * h), rng.uniform(0.4 * w, 0.6 * w)
    drift_y = rng.uniform(-0.08, 0.08)
    drift_x = rng.uniform(-0.08, 0.08)
    cy = y0 + drift_y * (z - d / 2.0)
    cx = x0 + drift_x * (z - d / 2.0)

    _, yy, xx = _coordinate_grid(shape)
    radial_sq = (yy - cy[:, None, None]) ** 2 + (xx - cx[:, None, None]) ** 2
    inside = np.zeros(d, dtype=bool)
    inside[2:d - 2] = True
    inside = inside[:, None, None]
    sheath = (radial_sq <= 3.6**2) & (radial_sq > 1.8**2) & inside
    labels[sheath] = 1

    core = (radial_sq <= 1.0) & inside
    zs = np.arange(d)[:, None, None] * np.ones(shape, dtype=np.int64)
    for zc in (0.28 * d, 0.58 * d):
        z0 = int(round(zc + rng.uniform(-0.6, 0.6)))
        labels[core & (zs >= z0) & (zs < z0 + 2)] = 2
    joint_core = (radial_sq <= 1.44) & inside
    for zc in (0.44 * d, 0.74 * d):
        z0 = int(round(zc + rng.uniform(-0.6, 0.6)))
        labels[joint_core & (zs == z0)] = 3
    means = [0.05, 0.35, 0.85, 1.15]
    return _render_image(labels, means, channels, rng), labels


def healthy_mirror_from(image, labels):
    """Mirror the first foreground-free hemisphere onto the other half.

    Scans axes then halves in a fixed order and uses the first half
    with no foreground; errors if every half contains foreground.
    """
    labels = np.asarray(labels)
    for axis in range(3):
        n = labels.shape[axis]
        split = (n + 1) // 2
        moved = np.moveaxis(labels, axis, 0)
        if not moved[:split].any():
            return mirror_hemisphere(image, labels, axis, "low")
        if not moved[n - split:].any():
            return mirror_hemisphere(image, labels, axis, "high")
    raise ValueError("every hemisphere contains foreground; nothing to mirror")
