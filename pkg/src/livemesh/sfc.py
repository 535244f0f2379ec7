"""Space-filling-curve key ring over delay space.

Maps 2-D delay coordinates onto a one-dimensional ring of 4^order keys
using a closed, locality-preserving curve (a cyclic Hilbert variant:
four rotated sub-curves joined into a Hamiltonian cycle of the grid).
Ring distance between keys then tracks delay-space distance, which is
what lets the anycast table replace a hashed identifier ring.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import _kernels
from .coords import DelayCoord

CurveKey = int


@dataclass(frozen=True)
class CurveSpec:
    """Curve order plus the delay-space rectangle it covers."""

    order: int
    min_x: float
    min_y: float
    max_x: float
    max_y: float

    def __post_init__(self) -> None:
        if self.order < 1:
            raise ValueError("order must be >= 1")
        if not (self.max_x > self.min_x and self.max_y > self.min_y):
            raise ValueError("bounds must have positive extent on both axes")

    @property
    def side(self) -> int:
        return 1 << self.order

    @property
    def n_keys(self) -> int:
        return 1 << (2 * self.order)

    @property
    def cell_width(self) -> float:
        return (self.max_x - self.min_x) / self.side

    @property
    def cell_height(self) -> float:
        return (self.max_y - self.min_y) / self.side

    @cached_property
    def _key_centers(self) -> np.ndarray:
        """(n_keys, 2) array of cell centers in key order; oracle helper."""
        pts = np.empty((self.n_keys, 2))
        for k in range(self.n_keys):
            cx, cy = _kernels.curve_point(self.order, k)
            pts[k, 0] = self.min_x + (cx + 0.5) * self.cell_width
            pts[k, 1] = self.min_y + (cy + 0.5) * self.cell_height
        return pts


def cell_of(c: DelayCoord, spec: CurveSpec) -> tuple[int, int]:
    """Grid cell containing c; out-of-bounds coordinates clamp to the edge."""
    side = spec.side
    cx = int((c.x - spec.min_x) / spec.cell_width)
    cy = int((c.y - spec.min_y) / spec.cell_height)
    return min(max(cx, 0), side - 1), min(max(cy, 0), side - 1)


def coord_to_key(c: DelayCoord, spec: CurveSpec) -> CurveKey:
    cx, cy = cell_of(c, spec)
    return _kernels.curve_index(spec.order, cx, cy)


def key_to_coord(k: CurveKey, spec: CurveSpec) -> DelayCoord:
    """Center of cell k. Inverse of coord_to_key on cell centers."""
    if not (0 <= k < spec.n_keys):
        raise ValueError(f"key {k} out of range [0, {spec.n_keys})")
    cx, cy = _kernels.curve_point(spec.order, k)
    return DelayCoord(
        spec.min_x + (cx + 0.5) * spec.cell_width,
        spec.min_y + (cy + 0.5) * spec.cell_height,
    )


def ring_distance(a: CurveKey, b: CurveKey, spec: CurveSpec) -> int:
    n = spec.n_keys
    if not (0 <= a < n and 0 <= b < n):
        raise ValueError("keys out of range for spec")
    d = abs(a - b)
    return min(d, n - d)


def cw_offset(frm: CurveKey, to: CurveKey, spec: CurveSpec) -> int:
    """Steps clockwise (increasing key, wrapping) from one key to another."""
    return (to - frm) % spec.n_keys
