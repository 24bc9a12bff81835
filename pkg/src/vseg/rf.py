"""Receptive-field bookkeeping.

Walks the main path and accumulates, for every unit with a spatial
kernel, how many input voxels along one axis can influence a single
output voxel.  A stride-2 unit widens the sampling step for everything
after it; a deconvolution narrows it again.

The accumulated numbers are the classical jump-arithmetic values, which
assume symmetrically aligned windows at every grid change.  The
repeat-based upsampler is not symmetric (each fine voxel copies
coarse voxel index//2), so once two upsampling stages interact the
exact support becomes phase dependent and can differ from the
accumulated value by a few voxels.  `measure_support` reports the
implementation's true support via a backward pass on an impulse;
tests pin both numbers.
"""

from dataclasses import dataclass

import numpy as np

from .network import arch_layout


@dataclass
class FieldRow:
    ordinal: int  # 1-based position on the main path, 1x1x1 units included
    name: str
    kind: str
    features: int
    in_denominator: int  # input grid extent = volume extent / this
    out_denominator: int
    field: int  # accumulated input voxels visible along one axis
    in_shape: tuple = None  # spatial, set when the trace is given extents
    out_shape: tuple = None


def receptive_field_trace(spec, input_shape=None):
    """One row per main-path unit with a spatial kernel.

    The 1x1x1 reducers occupy an ordinal but add nothing to the field
    and are left out of the listing.  With `input_shape` (three spatial
    extents, each divisible by 8) every row also carries its input and
    output extents.
    """
    if input_shape is not None:
        input_shape = tuple(int(n) for n in input_shape)
        if len(input_shape) != 3:
            raise ValueError("input_shape needs three spatial extents")
        for n in input_shape:
            if n < 8 or n % 8:
                raise ValueError(f"extents must divide by 8, got {input_shape}")
    rows = []
    field = 1
    jump = 1  # input voxels between adjacent samples at the current grid
    denom = 1
    for ordinal, u in enumerate(arch_layout(spec), start=1):
        in_denom = denom
        if u.kind == "deconv":
            jump //= 2
            denom //= 2
        field += jump * (u.ksize - 1)
        if u.kind == "down":
            jump *= 2
            denom *= 2
        if u.ksize > 1:
            shapes = {}
            if input_shape is not None:
                shapes = dict(
                    in_shape=tuple(n // in_denom for n in input_shape),
                    out_shape=tuple(n // denom for n in input_shape),
                )
            rows.append(
                FieldRow(ordinal, u.name, u.kind, u.cout, in_denom, denom, field, **shapes)
            )
    return rows


def _extent_cell(row):
    if row.out_shape is not None:
        return "x".join(str(n) for n in row.out_shape)
    return "1" if row.out_denominator == 1 else f"1/{row.out_denominator}"


def render_text(rows):
    """Aligned table of the trace."""
    header = ["unit", "name", "kind", "features", "extent", "field"]
    lines = [header]
    for r in rows:
        lines.append(
            [str(r.ordinal), r.name, r.kind, str(r.features), _extent_cell(r), str(r.field)]
        )
    widths = [max(len(row[i]) for row in lines) for i in range(len(header))]
    return "\n".join(
        "  ".join(cell.rjust(w) for cell, w in zip(row, widths)) for row in lines
    )


def render_csv(rows):
    lines = ["unit,name,kind,features,scale_denominator,field"]
    for r in rows:
        lines.append(
            f"{r.ordinal},{r.name},{r.kind},{r.features},{r.out_denominator},{r.field}"
        )
    return "\n".join(lines)


def measure_support(net, x, unit_name, axis=0, position=None):
    """Span of input voxels along `axis` that receive gradient from one
    output voxel of `unit_name`.

    Runs an inference-mode pass (the normalizers are then per-voxel maps
    and cannot widen the support), injects a unit gradient at one voxel
    of the first feature channel (the center of the unit's grid unless
    `position` picks another index along `axis`), and measures the
    extent of nonzero input gradient.
    """
    out = net.forward(x, mode="infer", keep_cache=True)
    h = net._cache[unit_name][2]
    g = np.zeros_like(h)
    idx = [n // 2 for n in h.shape[1:]]
    if position is not None:
        idx[axis] = position
    g[(0,) + tuple(idx)] = 1.0
    _, input_grad = net.backward(np.zeros_like(out.scores), inject={unit_name: g})
    other = tuple(i for i in range(input_grad.ndim) if i != 1 + axis)
    nz = np.flatnonzero(np.abs(input_grad).max(axis=other) > 0.0)
    return int(nz[-1] - nz[0] + 1) if nz.size else 0
