"""Sound Lipschitz bounds for the residual of a transformed pixel.

On the grid cell ``[k, k+1] x [l, l+1]`` the bilinear surface has x-partial
``(1-fy) (p[k+1,l] - p[k,l]) + fy (p[k+1,l+1] - p[k,l+1])``, a convex
combination of two pixel differences, so its magnitude is bounded by the
larger of the two.  Over a coordinate box we take the maximum over every cell
the box touches (closed intersection, so the Clarke gradient at grid lines is
covered).  The chain rule then bounds the parameter derivative of the
residual ``r = g - A.k - B``::

    |dr/dk_i| <= Lx * sup|dX/dk_i| + Ly * sup|dY/dk_i| + |A_i|
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .image import as_pixels, padded, transform_batch
from .transforms import Interval, ParamBox, as_spec, coord_derivative_enclosure, coord_enclosure

# Outward padding of coordinate enclosures so rounding can never drop a cell.
COORD_PAD = 1e-9


class _RangeMax2D:
    """O(1) rectangle-max queries over a ``(c, R, C)`` table (2-d sparse table)."""

    def __init__(self, table: np.ndarray):
        c, R, C = table.shape
        self.R, self.C = R, C
        self.la = int(np.floor(np.log2(R))) + 1
        self.lb = int(np.floor(np.log2(C))) + 1
        st = np.zeros((self.la, self.lb, R, C, c))
        st[0, 0] = np.moveaxis(table, 0, -1)
        for b in range(1, self.lb):
            w = 1 << (b - 1)
            st[0, b, :, : C - w] = np.maximum(st[0, b - 1, :, : C - w], st[0, b - 1, :, w:])
        for a in range(1, self.la):
            h = 1 << (a - 1)
            st[a, :, : R - h] = np.maximum(st[a - 1, :, : R - h], st[a - 1, :, h:])
        self.st = st

    def query(self, r0, r1, c0, c1) -> np.ndarray:
        """Max over rows ``r0..r1`` and columns ``c0..c1`` (inclusive, clipped).

        Empty ranges give 0.  Result shape is ``r0.shape + (c,)``.
        """
        empty = ((r1 < 0) | (c1 < 0) | (r0 > self.R - 1) | (c0 > self.C - 1)
                 | (r0 > r1) | (c0 > c1))
        r0 = np.clip(r0, 0, self.R - 1)
        r1c = np.clip(r1, 0, self.R - 1)
        c0 = np.clip(c0, 0, self.C - 1)
        c1c = np.clip(c1, 0, self.C - 1)
        r1c = np.maximum(r1c, r0)
        c1c = np.maximum(c1c, c0)
        a = np.floor(np.log2(r1c - r0 + 1)).astype(np.intp)
        b = np.floor(np.log2(c1c - c0 + 1)).astype(np.intp)
        ra = r1c - (1 << a) + 1
        cb = c1c - (1 << b) + 1
        st = self.st
        out = np.maximum(np.maximum(st[a, b, r0, c0], st[a, b, ra, c0]),
                         np.maximum(st[a, b, r0, cb], st[a, b, ra, cb]))
        out[empty] = 0.0
        return out


class GradientTable:
    """Per-cell bounds on the bilinear partials of one image, with range queries.

    Cell ``(k, l)`` for ``k in 0..n`` and ``l in 0..m`` spans
    ``[k, k+1] x [l, l+1]`` in 1-based coordinates; pixels off the grid are 0.
    """

    def __init__(self, img):
        px = as_pixels(img)
        self.n, self.m = px.shape[1], px.shape[2]
        P = padded(px)                                 # (c, n+2, m+2)
        ddx = np.abs(np.diff(P, axis=1))               # (c, n+1, m+2): |p[k+1,l] - p[k,l]|
        ddy = np.abs(np.diff(P, axis=2))               # (c, n+2, m+1)
        self.cell_dx = np.maximum(ddx[:, :, :-1], ddx[:, :, 1:])   # (c, n+1, m+1)
        self.cell_dy = np.maximum(ddy[:, :-1, :], ddy[:, 1:, :])
        self._qx = _RangeMax2D(self.cell_dx)
        self._qy = _RangeMax2D(self.cell_dy)

    def _cells(self, lo, hi):
        # closed box [lo, hi] touches cells k with k <= hi and k + 1 >= lo
        return np.ceil(lo).astype(np.intp) - 1, np.floor(hi).astype(np.intp)

    def query(self, xlo, xhi, ylo, yhi):
        """Bounds ``(Lx, Ly)`` with shape ``xlo.shape + (c,)``."""
        k0, k1 = self._cells(np.asarray(xlo), np.asarray(xhi))
        l0, l1 = self._cells(np.asarray(ylo), np.asarray(yhi))
        return self._qx.query(k0, k1, l0, l1), self._qy.query(k0, k1, l0, l1)


def interp_gradient_bound(img, xbox: Interval, ybox: Interval):
    """Bounds on ``|dI/dx|`` and ``|dI/dy|`` over a coordinate box.

    Returns two arrays of shape ``(c,) + box_shape``.
    """
    xlo, xhi = np.asarray(xbox.lo, float), np.asarray(xbox.hi, float)
    ylo, yhi = np.asarray(ybox.lo, float), np.asarray(ybox.hi, float)
    if not all(np.all(np.isfinite(v)) for v in (xlo, xhi, ylo, yhi)):
        raise InvalidInputError("coordinate box must be finite")
    Lx, Ly = GradientTable(img).query(xlo, xhi, ylo, yhi)
    return np.moveaxis(Lx, -1, 0), np.moveaxis(Ly, -1, 0)


def lipschitz_grid(table: GradientTable, spec, lo, hi, dim: int, A_dim=None) -> np.ndarray:
    """Residual Lipschitz bound along ``dim`` for a batch of boxes.

    ``lo``/``hi`` have shape ``(S, d)``; ``A_dim`` (``(c, n, m)``) is the slope
    of the affine bound along ``dim``.  Returns ``(S, c, n, m)``.
    """
    shape = (table.n, table.m)
    xl, xh, yl, yh = coord_enclosure(spec, lo, hi, shape)
    Lx, Ly = table.query(xl - COORD_PAD, xh + COORD_PAD, yl - COORD_PAD, yh + COORD_PAD)  # (S, n, m, c)
    dxl, dxh, dyl, dyh = coord_derivative_enclosure(spec, lo, hi, shape, dim)
    sx = np.maximum(np.abs(dxl), np.abs(dxh))[..., None]
    sy = np.maximum(np.abs(dyl), np.abs(dyh))[..., None]
    L = np.moveaxis(Lx * sx + Ly * sy, -1, -3)
    if A_dim is not None:
        L = L + np.abs(A_dim)
    return L


@dataclass(frozen=True, eq=False)
class LipschitzBound:
    """Per-pixel bound ``values`` (``(c, n, m)``) valid on ``box`` along ``dim``."""

    values: np.ndarray
    box: ParamBox
    dim: int

    @property
    def max(self) -> float:
        return float(self.values.max())


def residual_lipschitz(img, spec, A, box: ParamBox, dim: int) -> LipschitzBound:
    """Sound bound on ``|dr/dk_dim|`` over ``box`` for the residual with slopes ``A``.

    ``A`` has shape ``(d, c, n, m)`` (or None for the bare transformed pixel).
    """
    spec = as_spec(spec)
    table = GradientTable(img)
    A_dim = None if A is None else np.asarray(A)[dim]
    L = lipschitz_grid(table, spec, box.lower[None], box.upper[None], dim, A_dim)[0]
    return LipschitzBound(L, box, dim)


def empirical_lipschitz(img, spec, A, B, box: ParamBox, dim: int, samples: int, at=None) -> np.ndarray:
    """Largest difference quotient of the residual between consecutive samples.

    The other coordinates are held at ``at`` (default: box centre).  This is a
    lower bound on the true Lipschitz constant along ``dim``.
    """
    if samples < 2:
        raise InvalidInputError("need at least two samples")
    base = box.center if at is None else np.asarray(at, dtype=np.float64)
    t = np.linspace(box.lower[dim], box.upper[dim], samples)
    params = np.repeat(base[None], samples, axis=0)
    params[:, dim] = t
    g = transform_batch(img, spec, params)
    if A is not None:
        g = g - np.tensordot(params, A, axes=(1, 0))
    dt = np.diff(t)
    if np.all(dt == 0):
        return np.zeros(g.shape[1:])
    q = np.abs(np.diff(g, axis=0)) / dt[:, None, None, None]
    return q.max(axis=0)
