"""Training-time geometric transforms, preprocessing crops and
downsampling, and hemisphere mirroring.

All functions treat images as channels-first float volumes and labels
as integer code volumes of the same spatial shape, and apply the same
geometry to both.  Images are resampled trilinearly, labels by nearest
neighbor; voxels that fall outside the source domain become 0 (image)
and background (labels).
"""

from dataclasses import dataclass

import numpy as np

from .tensor_ops import resample_nearest, resample_trilinear

KINDS = ("identity", "flip", "rotate")
PLANES = ((0, 1), (0, 2), (1, 2))

# right-angle trig leaves coordinates a few ulps off the lattice; such
# positions still count as inside the domain
DOMAIN_TOL = 1e-6


@dataclass
class TransformDraw:
    kind: str
    axis: int = None  # flip: spatial axis 0..2
    plane: tuple = None  # rotate: unordered spatial axis pair
    angle: float = None  # rotate: radians

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.kind == "flip" and self.axis not in (0, 1, 2):
            raise ValueError("flip needs a spatial axis 0, 1 or 2")
        if self.kind == "rotate":
            if tuple(sorted(self.plane)) not in PLANES:
                raise ValueError("rotation plane must be two distinct spatial axes")
            self.plane = tuple(sorted(self.plane))


def draw_transform(rng):
    """Uniform over the three kinds; flip axis, rotation plane and
    angle in [0, 2pi) uniform within their kind."""
    kind = KINDS[rng.integers(3)]
    if kind == "flip":
        return TransformDraw("flip", axis=int(rng.integers(3)))
    if kind == "rotate":
        plane = PLANES[rng.integers(3)]
        return TransformDraw("rotate", plane=plane, angle=float(rng.uniform(0.0, 2.0 * np.pi)))
    return TransformDraw("identity")


def _check_pair(image, labels):
    image = np.asarray(image)
    labels = np.asarray(labels)
    if image.ndim != 4:
        raise ValueError(f"image must be (channels, d, h, w), got {image.shape}")
    if labels.shape != image.shape[1:]:
        raise ValueError(
            f"labels {labels.shape} not congruent with image {image.shape}"
        )
    return image, labels


def _rotated_source_coords(shape, plane, angle):
    """Inverse-rotation source coordinates for every output voxel in the
    plane, about the volume center."""
    a, b = plane
    na, nb = shape[a], shape[b]
    ca, cb = (na - 1) / 2.0, (nb - 1) / 2.0
    u = np.arange(na, dtype=np.float64)[:, None] - ca
    v = np.arange(nb, dtype=np.float64)[None, :] - cb
    cos, sin = np.cos(angle), np.sin(angle)
    # inverse rotation: R(-angle) applied to centered output coordinates
    src_a = ca + cos * u + sin * v
    src_b = cb - sin * u + cos * v
    return src_a, src_b


def _plane_last(vol, plane, spatial_offset):
    a, b = (p + spatial_offset for p in plane)
    moved = np.moveaxis(vol, (a, b), (-2, -1))
    return moved, (a, b)


def _rotate_image(image, plane, angle):
    src_a, src_b = _rotated_source_coords(image.shape[1:], plane, angle)
    na, nb = src_a.shape
    inside = (
        (src_a >= -DOMAIN_TOL) & (src_a <= na - 1 + DOMAIN_TOL)
        & (src_b >= -DOMAIN_TOL) & (src_b <= nb - 1 + DOMAIN_TOL)
    )
    sa = np.clip(src_a, 0.0, na - 1)
    sb = np.clip(src_b, 0.0, nb - 1)
    i0 = np.clip(np.floor(sa).astype(np.int64), 0, max(na - 2, 0))
    j0 = np.clip(np.floor(sb).astype(np.int64), 0, max(nb - 2, 0))
    fa = sa - i0
    fb = sb - j0
    i1 = np.minimum(i0 + 1, na - 1)
    j1 = np.minimum(j0 + 1, nb - 1)

    moved, _ = _plane_last(image, plane, 1)
    out = (
        moved[..., i0, j0] * ((1 - fa) * (1 - fb))
        + moved[..., i0, j1] * ((1 - fa) * fb)
        + moved[..., i1, j0] * (fa * (1 - fb))
        + moved[..., i1, j1] * (fa * fb)
    )
    out = (out * inside).astype(image.dtype, copy=False)
    a, b = (p + 1 for p in plane)
    return np.ascontiguousarray(np.moveaxis(out, (-2, -1), (a, b)))


def _rotate_labels(labels, plane, angle):
    src_a, src_b = _rotated_source_coords(labels.shape, plane, angle)
    na, nb = src_a.shape
    ra = np.floor(src_a + 0.5).astype(np.int64)
    rb = np.floor(src_b + 0.5).astype(np.int64)
    inside = (ra >= 0) & (ra <= na - 1) & (rb >= 0) & (rb <= nb - 1)
    ra = np.clip(ra, 0, na - 1)
    rb = np.clip(rb, 0, nb - 1)
    moved, _ = _plane_last(labels, plane, 0)
    out = np.where(inside, moved[..., ra, rb], 0).astype(labels.dtype, copy=False)
    a, b = plane
    return np.ascontiguousarray(np.moveaxis(out, (-2, -1), (a, b)))


def apply(t, image, labels):
    """Apply one drawn transform to an image/label pair coherently."""
    image, labels = _check_pair(image, labels)
    if t.kind == "identity":
        return image, labels
    if t.kind == "flip":
        return (
            np.ascontiguousarray(np.flip(image, axis=1 + t.axis)),
            np.ascontiguousarray(np.flip(labels, axis=t.axis)),
        )
    return (
        _rotate_image(image, t.plane, t.angle),
        _rotate_labels(labels, t.plane, t.angle),
    )


def crop(v, offsets, extents):
    """Exact index-slicing crop of the spatial axes.

    Works on (d, h, w) label volumes and (channels, d, h, w) images;
    the window must lie inside the volume.
    """
    v = np.asarray(v)
    if v.ndim not in (3, 4):
        raise ValueError(f"expected 3 or 4 axes, got {v.shape}")
    offsets = tuple(int(o) for o in offsets)
    extents = tuple(int(e) for e in extents)
    if len(offsets) != 3 or len(extents) != 3:
        raise ValueError("need three offsets and three extents")
    spatial = v.shape[-3:]
    for o, e, n in zip(offsets, extents, spatial):
        if o < 0 or e < 1 or o + e > n:
            raise ValueError(
                f"crop window {offsets}+{extents} out of bounds for {spatial}"
            )
    sl = tuple(slice(o, o + e) for o, e in zip(offsets, extents))
    if v.ndim == 4:
        sl = (slice(None),) + sl
    return np.ascontiguousarray(v[sl])


def _down_shape(spatial, factor):
    factor = int(factor)
    if factor < 1:
        raise ValueError("factor must be >= 1")
    return tuple(max(1, n // factor) for n in spatial)


def downsample_image(v, factor):
    """Shrink every spatial extent by an integer factor (floor), values
    interpolated trilinearly."""
    v = np.asarray(v)
    return resample_trilinear(v, _down_shape(v.shape[-3:], factor))


def downsample_labels(v, factor):
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"labels must be (d, h, w), got {v.shape}")
    return resample_nearest(v, _down_shape(v.shape, factor))


def mirror_hemisphere(image, labels, axis, source_half):
    """Reflect the foreground-free half onto the other half.

    `source_half` is "low" (indices up to and including the mid layer)
    or "high".  The chosen half must contain no foreground labels; for
    odd extents the central layer belongs to both halves and maps to
    itself.  Returns the mirrored image and an all-background label
    volume.
    """
    image, labels = _check_pair(image, labels)
    if axis not in (0, 1, 2):
        raise ValueError("axis must be a spatial axis 0, 1 or 2")
    if source_half not in ("low", "high"):
        raise ValueError("source_half must be 'low' or 'high'")
    n = labels.shape[axis]
    split = (n + 1) // 2  # low half = [0, split), includes mid layer when odd
    lab_moved = np.moveaxis(labels, axis, 0)
    half = lab_moved[:split] if source_half == "low" else lab_moved[n - split:]
    bad = int(np.count_nonzero(half))
    if bad:
        raise ValueError(
            f"source half contains {bad} foreground voxel(s) along axis {axis}"
        )
    idx = np.arange(n)
    reflect = n - 1 - idx
    # source-half layers stay put, the other half reads its mirror image
    if source_half == "low":
        take = np.where(idx < split, idx, reflect)
    else:
        take = np.where(idx >= n - split, idx, reflect)
    img_moved = np.moveaxis(image, 1 + axis, 1)
    mirrored = np.ascontiguousarray(np.moveaxis(img_moved[:, take], 1, 1 + axis))
    return mirrored, np.zeros_like(labels)
