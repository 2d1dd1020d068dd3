"""Inverse geometric maps, parameter boxes and interval enclosures.

Coordinates are 1-based pixel centres: row ``i`` in ``1..n``, column ``j`` in
``1..m``.  Every map is applied about the image centre ``(n/2, m/2)``::

    rotation     (theta, rad)   [ox, oy] -> [ cos*ox + sin*oy, -sin*ox + cos*oy]
    translation  (v1, v2, px)   (i, j)   -> (i - v1, j - v2)
    scaling      (s, percent)   [ox, oy] -> [ox, oy] / (1 + s/100)
    shearing     (s, percent)   [ox, oy] -> [ox - (s/100) * oy, oy]

where ``(ox, oy) = (i - n/2, j - m/2)`` and the centre is added back after the
map.  Translation is unaffected by the centring.

All vectorized helpers take parameters with a trailing axis of length ``d``
and return arrays shaped ``params.shape[:-1] + (n, m)``.
"""
from __future__ import annotations

import enum
import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import InvalidInputError, SingularityError

TWO_PI = 2.0 * math.pi


class Kind(str, enum.Enum):
    ROTATION = "rotation"
    TRANSLATION = "translation"
    SCALING = "scaling"
    SHEARING = "shearing"


_DIMS = {Kind.ROTATION: 1, Kind.TRANSLATION: 2, Kind.SCALING: 1, Kind.SHEARING: 1}
_UNITS = {
    Kind.ROTATION: "radian",
    Kind.TRANSLATION: "pixel",
    Kind.SCALING: "percent (factor = 1 + s/100)",
    Kind.SHEARING: "percent (shear coefficient = s/100)",
}


@dataclass(frozen=True)
class TransformSpec:
    """A transformation family; parameters are always in internal units."""

    kind: Kind

    def __post_init__(self):
        try:
            kind = Kind(self.kind)
        except ValueError:
            raise InvalidInputError(f"unknown transform kind {self.kind!r}") from None
        object.__setattr__(self, "kind", kind)

    @property
    def dim(self) -> int:
        return _DIMS[self.kind]

    @property
    def units(self) -> str:
        return _UNITS[self.kind]

    @property
    def identity(self) -> np.ndarray:
        return np.zeros(self.dim)

    def describe(self) -> dict:
        return {"kind": self.kind.value, "dim": self.dim, "units": self.units}


@dataclass(frozen=True)
class Interval:
    lo: float | np.ndarray
    hi: float | np.ndarray

    def __post_init__(self):
        if np.any(np.asarray(self.lo) > np.asarray(self.hi)):
            raise InvalidInputError("interval with lo > hi")

    def contains(self, value, tol: float = 0.0) -> bool:
        v = np.asarray(value)
        return bool(np.all((v >= np.asarray(self.lo) - tol) & (v <= np.asarray(self.hi) + tol)))

    @property
    def width(self):
        return np.asarray(self.hi) - np.asarray(self.lo)


@dataclass(frozen=True)
class ParamBox:
    """Axis-aligned box ``[lower, upper]`` in parameter space."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64)).copy()
        hi = np.atleast_1d(np.asarray(self.upper, dtype=np.float64)).copy()
        if lo.shape != hi.shape or lo.ndim != 1:
            raise InvalidInputError("box bounds must be 1-d and of equal length")
        if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
            raise InvalidInputError("box bounds must be finite")
        if np.any(lo > hi):
            raise InvalidInputError(f"box lower {lo} exceeds upper {hi}")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def point(cls, value) -> "ParamBox":
        v = np.atleast_1d(np.asarray(value, dtype=np.float64))
        return cls(v, v)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def is_point(self) -> bool:
        return bool(np.all(self.width == 0))

    def corners(self) -> np.ndarray:
        pts = [np.array(c) for c in itertools.product(*zip(self.lower, self.upper))]
        return np.unique(np.array(pts), axis=0)

    def contains(self, params, tol: float = 0.0) -> bool:
        p = np.asarray(params, dtype=np.float64)
        return bool(np.all((p >= self.lower - tol) & (p <= self.upper + tol)))

    def to_dict(self) -> dict:
        return {"lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamBox":
        return cls(d["lower"], d["upper"])


def as_spec(spec) -> TransformSpec:
    return spec if isinstance(spec, TransformSpec) else TransformSpec(spec)


def _check_params(spec: TransformSpec, params: np.ndarray) -> np.ndarray:
    p = np.asarray(params, dtype=np.float64)
    if p.ndim == 0:
        p = p[None]
    if p.shape[-1] != spec.dim:
        raise InvalidInputError(f"{spec.kind.value} takes {spec.dim} parameter(s), got shape {p.shape}")
    if not np.all(np.isfinite(p)):
        raise InvalidInputError("non-finite transformation parameter")
    return p


def _offsets(shape: Sequence[int]):
    n, m = shape
    i = np.arange(1, n + 1, dtype=np.float64)[:, None]
    j = np.arange(1, m + 1, dtype=np.float64)[None, :]
    return n / 2.0, m / 2.0, np.broadcast_to(i - n / 2.0, (n, m)), np.broadcast_to(j - m / 2.0, (n, m))


def _scale_factor(s):
    lam = 1.0 + np.asarray(s) / 100.0
    if np.any(lam == 0):
        raise SingularityError("scaling factor 1 + s/100 is zero")
    return lam


def _trig(a, b, theta):
    # a*cos(theta) + b*sin(theta); shared by maps and enclosures so that
    # point-box enclosures reproduce inverse_map bit for bit.
    return a * np.cos(theta) + b * np.sin(theta)


def _map_offsets(spec: TransformSpec, p: np.ndarray, cx, cy, ox, oy):
    """Map centre offsets: ``p`` has shape (..., d); returns arrays (..., n, m)."""
    ex = (slice(None),) * (p.ndim - 1) + (None, None)
    if spec.kind is Kind.ROTATION:
        t = p[..., 0][ex]
        return cx + _trig(ox, oy, t), cy + _trig(oy, -ox, t)
    if spec.kind is Kind.TRANSLATION:
        return cx + ox - p[..., 0][ex], cy + oy - p[..., 1][ex]
    if spec.kind is Kind.SCALING:
        lam = _scale_factor(p[..., 0])[ex]
        return cx + ox / lam, cy + oy / lam
    mu = (p[..., 0] / 100.0)[ex]
    return cx + (ox - mu * oy), cy + oy + 0.0 * mu


def inverse_coords(spec, params, shape: Sequence[int]):
    """Source coordinates ``(X, Y)`` for every output pixel.

    ``params`` has shape ``(..., d)``; the result arrays have shape
    ``(..., n, m)``.
    """
    spec = as_spec(spec)
    p = _check_params(spec, params)
    cx, cy, ox, oy = _offsets(shape)
    return _map_offsets(spec, p, cx, cy, ox, oy)


def inverse_map(spec, params, i, j, shape: Sequence[int]) -> tuple[float, float]:
    """Source coordinate of output pixel ``(i, j)`` (1-based) under ``params``."""
    spec = as_spec(spec)
    p = _check_params(spec, params)
    if p.ndim != 1:
        raise InvalidInputError("inverse_map takes a single parameter vector")
    n, m = shape
    cx, cy = n / 2.0, m / 2.0
    ox = np.array([[float(i) - cx]])
    oy = np.array([[float(j) - cy]])
    x, y = _map_offsets(spec, p, cx, cy, ox, oy)
    return float(x[0, 0]), float(y[0, 0])


# ---------------------------------------------------------------------------
# enclosures


def _has_point(lo, hi, phase):
    """True where ``phase + 2*pi*k`` lies in ``[lo, hi]`` for some integer k."""
    k = np.ceil((lo - phase) / TWO_PI)
    return phase + TWO_PI * k <= hi


def _trig_range(a, b, lo, hi):
    """Range of ``a*cos(t) + b*sin(t)`` over ``t`` in ``[lo, hi]``.

    Endpoint values are exact evaluations; an interior extremum ``+-R`` is
    added when the box spans the corresponding critical angle.
    """
    f_lo = _trig(a, b, lo)
    f_hi = _trig(a, b, hi)
    r = np.hypot(a, b)
    phi = np.arctan2(b, a)
    rmax = _has_point(lo, hi, phi)
    rmin = _has_point(lo, hi, phi + math.pi)
    out_lo = np.where(rmin, -r, np.minimum(f_lo, f_hi))
    out_hi = np.where(rmax, r, np.maximum(f_lo, f_hi))
    return out_lo, out_hi


def _box_arrays(spec: TransformSpec, lo, hi):
    lo = _check_params(spec, lo)
    hi = _check_params(spec, hi)
    if lo.shape != hi.shape:
        raise InvalidInputError("box bound shapes differ")
    if np.any(lo > hi):
        raise InvalidInputError("box lower exceeds upper")
    if spec.kind is Kind.SCALING:
        f_lo = 1.0 + lo[..., 0] / 100.0
        f_hi = 1.0 + hi[..., 0] / 100.0
        if np.any(f_lo * f_hi <= 0):
            raise SingularityError("scaling box contains the zero factor s = -100")
    return lo, hi


def coord_enclosure(spec, lo, hi, shape: Sequence[int]):
    """Vectorized enclosure of the source coordinates over boxes.

    ``lo`` and ``hi`` have shape ``(..., d)``.  Returns ``(xlo, xhi, ylo, yhi)``
    with shape ``(..., n, m)`` each.
    """
    spec = as_spec(spec)
    lo, hi = _box_arrays(spec, lo, hi)
    cx, cy, ox, oy = _offsets(shape)
    ex = (slice(None),) * (lo.ndim - 1) + (None, None)
    if spec.kind is Kind.ROTATION:
        tl, th = lo[..., 0][ex], hi[..., 0][ex]
        xl, xh = _trig_range(ox, oy, tl, th)
        yl, yh = _trig_range(oy, -ox, tl, th)
        return cx + xl, cx + xh, cy + yl, cy + yh
    # remaining kinds are monotone in each parameter on a valid box: endpoints suffice
    x0, y0 = _map_offsets(spec, lo, cx, cy, ox, oy)
    x1, y1 = _map_offsets(spec, hi, cx, cy, ox, oy)
    if spec.kind is Kind.TRANSLATION:
        return x1, x0, y1, y0
    return np.minimum(x0, x1), np.maximum(x0, x1), np.minimum(y0, y1), np.maximum(y0, y1)


def coord_derivative_enclosure(spec, lo, hi, shape: Sequence[int], dim: int):
    """Enclosure of ``(dX/dk_dim, dY/dk_dim)`` over boxes; same layout as :func:`coord_enclosure`."""
    spec = as_spec(spec)
    lo, hi = _box_arrays(spec, lo, hi)
    if not 0 <= dim < spec.dim:
        raise InvalidInputError(f"dim {dim} out of range for {spec.kind.value}")
    cx, cy, ox, oy = _offsets(shape)
    ex = (slice(None),) * (lo.ndim - 1) + (None, None)
    full = lo.shape[:-1] + (shape[0], shape[1])
    if spec.kind is Kind.ROTATION:
        tl, th = lo[..., 0][ex], hi[..., 0][ex]
        # d/dt (ox cos + oy sin) = oy cos - ox sin ; d/dt (oy cos - ox sin) = -ox cos - oy sin
        dxl, dxh = _trig_range(oy, -ox, tl, th)
        dyl, dyh = _trig_range(-ox, -oy, tl, th)
        return dxl, dxh, dyl, dyh
    if spec.kind is Kind.TRANSLATION:
        dx = -1.0 if dim == 0 else 0.0
        dy = -1.0 if dim == 1 else 0.0
        return (np.full(full, dx), np.full(full, dx), np.full(full, dy), np.full(full, dy))
    if spec.kind is Kind.SCALING:
        lam_lo = (1.0 + lo[..., 0] / 100.0)[ex]
        lam_hi = (1.0 + hi[..., 0] / 100.0)[ex]
        inv2_lo = np.minimum(1.0 / lam_lo**2, 1.0 / lam_hi**2)
        inv2_hi = np.maximum(1.0 / lam_lo**2, 1.0 / lam_hi**2)
        cx_ = -ox / 100.0
        cy_ = -oy / 100.0
        return (np.minimum(cx_ * inv2_lo, cx_ * inv2_hi), np.maximum(cx_ * inv2_lo, cx_ * inv2_hi),
                np.minimum(cy_ * inv2_lo, cy_ * inv2_hi), np.maximum(cy_ * inv2_lo, cy_ * inv2_hi))
    d = np.broadcast_to(-oy / 100.0, full)
    z = np.zeros(full)
    return d, d, z, z


def _check_pixel(i, j, shape):
    if not (1 <= i <= shape[0] and 1 <= j <= shape[1]):
        raise InvalidInputError(f"pixel ({i}, {j}) outside a {shape[0]}x{shape[1]} grid")


def inverse_map_enclosure(spec, box: ParamBox, i, j, shape: Sequence[int]) -> tuple[Interval, Interval]:
    """Intervals containing ``inverse_map(spec, k, i, j)`` for every ``k`` in ``box``."""
    _check_pixel(i, j, shape)
    xl, xh, yl, yh = coord_enclosure(spec, box.lower, box.upper, shape)
    return (Interval(float(xl[i - 1, j - 1]), float(xh[i - 1, j - 1])),
            Interval(float(yl[i - 1, j - 1]), float(yh[i - 1, j - 1])))


def inverse_map_derivative_enclosure(spec, box: ParamBox, i, j, shape: Sequence[int], dim: int):
    """Intervals containing the partial derivatives of the inverse map along ``dim``."""
    _check_pixel(i, j, shape)
    xl, xh, yl, yh = coord_derivative_enclosure(spec, box.lower, box.upper, shape, dim)
    return (Interval(float(xl[i - 1, j - 1]), float(xh[i - 1, j - 1])),
            Interval(float(yl[i - 1, j - 1]), float(yh[i - 1, j - 1])))


def to_internal(kind, values, radians: bool = False) -> np.ndarray:
    """Convert user-facing parameter values (degrees for rotation) to internal units."""
    spec = as_spec(kind)
    v = np.asarray(values, dtype=np.float64)
    if spec.kind is Kind.ROTATION and not radians:
        return np.deg2rad(v)
    return v


def from_internal(kind, values, radians: bool = False) -> np.ndarray:
    spec = as_spec(kind)
    v = np.asarray(values, dtype=np.float64)
    if spec.kind is Kind.ROTATION and not radians:
        return np.rad2deg(v)
    return v
