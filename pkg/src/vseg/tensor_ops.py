"""Dense array utilities shared by the whole engine.

Everything here operates on plain numpy arrays.  Convention: image
volumes are (channels, depth, height, width), label volumes are
(depth, height, width) with small non-negative integer codes.
"""

import numpy as np

_ELEMENTWISE = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
    "max": np.maximum,
    "min": np.minimum,
}

_REDUCE = {
    "sum": np.sum,
    "mean": np.mean,
    "max": np.amax,
}


def elementwise(op, a, b):
    """Apply a named binary op to two arrays of identical shape.

    `b` may also be a scalar, which broadcasts against `a`.  Any other
    shape mismatch is rejected.
    """
    if op not in _ELEMENTWISE:
        raise ValueError(f"unknown elementwise op {op!r}")
    a = np.asarray(a)
    if np.isscalar(b) or np.ndim(b) == 0:
        return _ELEMENTWISE[op](a, b)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return _ELEMENTWISE[op](a, b)


def reduce(op, a, axes=None, keepdims=False):
    """Reduce over the given axes (all axes when axes is None)."""
    if op not in _REDUCE:
        raise ValueError(f"unknown reduce op {op!r}")
    a = np.asarray(a)
    if axes is not None:
        axes = tuple(axes) if not np.isscalar(axes) else (axes,)
        for ax in axes:
            if not -a.ndim <= ax < a.ndim:
                raise ValueError(f"axis {ax} out of range for rank {a.ndim}")
    return _REDUCE[op](a, axis=axes, keepdims=keepdims)


def _axis_coords(n_in, n_out):
    """Source coordinates for resampling one axis.

    Uses the corner-aligned mapping j * (n_in - 1) / (n_out - 1); a
    single output sample falls on the input center.
    """
    if n_out < 1 or n_in < 1:
        raise ValueError("extents must be positive")
    if n_out == 1:
        return np.array([(n_in - 1) / 2.0])
    return np.arange(n_out, dtype=np.float64) * ((n_in - 1) / (n_out - 1))


def _interp_prep(n_in, n_out):
    """Per-axis base indices and fractional weights for linear sampling."""
    c = _axis_coords(n_in, n_out)
    if n_in == 1:
        i0 = np.zeros(n_out, dtype=np.int64)
        f = np.zeros(n_out, dtype=np.float64)
    else:
        i0 = np.clip(np.floor(c).astype(np.int64), 0, n_in - 2)
        f = c - i0
    return i0, f


def resample_trilinear(v, out_shape):
    """Trilinearly resample the spatial extents of an image volume.

    `v` is (D, H, W) or (C, D, H, W); `out_shape` the target spatial
    extents.  Corner samples map to corner samples.  The result keeps
    the input dtype.  Arithmetic per output voxel accumulates the eight
    corner terms in fixed (z, y, x) order so the computation is
    reproducible down to the bit.
    """
    v = np.asarray(v)
    squeeze = v.ndim == 3
    if squeeze:
        v = v[None]
    if v.ndim != 4:
        raise ValueError(f"expected rank 3 or 4 volume, got rank {v.ndim}")
    if len(out_shape) != 3:
        raise ValueError("out_shape must have three extents")
    (z0, fz), (y0, fy), (x0, fx) = (
        _interp_prep(v.shape[1 + i], out_shape[i]) for i in range(3)
    )
    nd, nh, nw = v.shape[1:]
    acc = None
    for dz in (0, 1):
        wz = (fz if dz else 1.0 - fz)[:, None, None]
        iz = np.minimum(z0 + dz, nd - 1)
        for dy in (0, 1):
            wy = (fy if dy else 1.0 - fy)[None, :, None]
            iy = np.minimum(y0 + dy, nh - 1)
            for dx in (0, 1):
                wx = (fx if dx else 1.0 - fx)[None, None, :]
                ix = np.minimum(x0 + dx, nw - 1)
                corner = v[:, iz[:, None, None], iy[None, :, None], ix[None, None, :]]
                term = corner * (wz * wy * wx)
                acc = term if acc is None else acc + term
    out = acc.astype(v.dtype, copy=False)
    return out[0] if squeeze else out


def resample_nearest(v, out_shape):
    """Nearest-neighbor resample of a label volume (D, H, W).

    Uses the same corner-aligned coordinates as the trilinear variant,
    rounding half-up per axis.  Output values are a subset of the input
    values by construction.
    """
    v = np.asarray(v)
    if v.ndim != 3:
        raise ValueError(f"expected rank 3 label volume, got rank {v.ndim}")
    if len(out_shape) != 3:
        raise ValueError("out_shape must have three extents")
    idx = []
    for ax in range(3):
        c = _axis_coords(v.shape[ax], out_shape[ax])
        idx.append(np.clip(np.floor(c + 0.5).astype(np.int64), 0, v.shape[ax] - 1))
    return v[idx[0][:, None, None], idx[1][None, :, None], idx[2][None, None, :]]


def interp_matrix(n_in, n_out):
    """Dense (n_out, n_in) linear-interpolation matrix for one axis.

    Row j holds the two corner weights for output sample j.  Multiplying
    by its transpose gives the adjoint, which is what gradient
    propagation through a trilinear upsampling needs.
    """
    i0, f = _interp_prep(n_in, n_out)
    m = np.zeros((n_out, n_in), dtype=np.float64)
    rows = np.arange(n_out)
    np.add.at(m, (rows, i0), 1.0 - f)
    np.add.at(m, (rows, np.minimum(i0 + 1, n_in - 1)), f)
    return m


def resample_trilinear_adjoint(g, in_shape):
    """Adjoint of `resample_trilinear` as a linear map.

    Routes an upstream gradient on the resampled grid (C, d, h, w) back
    to a gradient on the source grid (C,) + in_shape.  Satisfies
    <resample(x), g> == <x, adjoint(g)> up to rounding.
    """
    g = np.asarray(g)
    squeeze = g.ndim == 3
    if squeeze:
        g = g[None]
    out = g
    for ax in range(3):
        m = interp_matrix(in_shape[ax], g.shape[1 + ax])
        out = np.moveaxis(np.tensordot(m.T, out, axes=(1, 1 + ax)), 0, 1 + ax)
    out = out.astype(g.dtype, copy=False)
    return out[0] if squeeze else out
