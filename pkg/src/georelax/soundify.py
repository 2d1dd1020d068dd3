"""Meshed Lipschitz corrections that make sampled affine bounds sound.

The box is cut into a uniform mesh.  On each cell the residual is evaluated
at the centre ``c`` and, with ``L_i`` bounding ``|dr/dk_i|`` on the cell,

    r(k) >= r(c) - sum_i L_i * halfwidth_i

for every ``k`` in the cell.  The lower correction is the minimum of that
certificate over cells (clamped to ``<= 0``); the upper one is symmetric.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import InvalidInputError, ResourceError
from .image import as_pixels, transform_batch
from .lipschitz import GradientTable, lipschitz_grid
from .transforms import ParamBox, TransformSpec, as_spec
from .unsound import AffineBoundPair, SampleSet, affine_eval, bound_multid, sample_params

DEFAULT_CELL_BUDGET = 10**6
# cells processed per chunk, scaled by pixel count
_CHUNK_ELEMS = 1 << 21


def choose_subdivisions(L_max: float, width: float, epsilon: float) -> int:
    """Smallest ``N >= 1`` with ``N >= L_max * width / (2 epsilon)``, computed exactly."""
    if not (epsilon > 0 and math.isfinite(epsilon)):
        raise InvalidInputError(f"epsilon must be positive, got {epsilon}")
    if not (width > 0 and math.isfinite(width)):
        raise InvalidInputError(f"width must be positive, got {width}")
    if not (L_max >= 0 and math.isfinite(L_max)):
        raise InvalidInputError(f"L_max must be finite and non-negative, got {L_max}")
    q = Fraction(L_max) * Fraction(width) / (2 * Fraction(epsilon))
    return max(1, math.ceil(q))


def _mesh_axes(box: ParamBox, N: int):
    """Per-dimension cell edges; zero-width dimensions get a single degenerate cell."""
    axes = []
    for lo, hi in zip(box.lower, box.upper):
        if hi > lo:
            e = lo + (hi - lo) * np.arange(N + 1) / N
            e[-1] = hi
        else:
            e = np.array([lo, hi])
        axes.append(e)
    return axes


def _cell_count(box: ParamBox, N: int) -> int:
    active = int(np.count_nonzero(box.width > 0))
    return N**active


def _iter_cells(axes, step: int):
    """Yield ``(lo, hi)`` arrays of shape ``(S, d)`` covering the Cartesian mesh."""
    sizes = [len(e) - 1 for e in axes]
    total = int(np.prod(sizes))
    for s in range(0, total, step):
        idx = np.unravel_index(np.arange(s, min(total, s + step)), sizes)
        lo = np.stack([axes[k][i] for k, i in enumerate(idx)], axis=1)
        hi = np.stack([axes[k][i + 1] for k, i in enumerate(idx)], axis=1)
        yield lo, hi


def _cell_terms(px, spec, A, B, box: ParamBox, N: int, sign: str, per_cell: bool,
                budget: int, table: GradientTable | None = None):
    """Yield ``(centres, certificate)`` per chunk of mesh cells.

    The certificate is ``r(c) - sum_i L_i h_i`` for the lower residual and
    ``r(c) + sum_i L_i h_i`` for the upper one, shape ``(S, c, n, m)``.
    """
    if sign not in ("lower", "upper"):
        raise InvalidInputError(f"sign must be 'lower' or 'upper', got {sign!r}")
    if N < 1:
        raise InvalidInputError(f"N must be >= 1, got {N}")
    if _cell_count(box, N) > budget:
        raise ResourceError(f"{_cell_count(box, N)} mesh cells exceed the budget of {budget}")
    table = table or GradientTable(px)
    active = [k for k in range(box.dim) if box.width[k] > 0]
    if not per_cell:
        whole = [lipschitz_grid(table, spec, box.lower[None], box.upper[None], k, A[k])[0]
                 for k in active]
    step = max(1, _CHUNK_ELEMS // px.size)
    for lo, hi in _iter_cells(_mesh_axes(box, N), step):
        centre = 0.5 * (lo + hi)
        half = 0.5 * (hi - lo)
        r = transform_batch(px, spec, centre) - affine_eval(centre, A, B)
        slack = np.zeros_like(r)
        for n_k, k in enumerate(active):
            L = lipschitz_grid(table, spec, lo, hi, k, A[k]) if per_cell else whole[n_k][None]
            slack += L * half[:, k, None, None, None]
        yield centre, (r - slack if sign == "lower" else r + slack)


def cell_certificates(img, spec, A, B, box: ParamBox, N: int, sign: str = "lower",
                      per_cell: bool = True, budget: int = DEFAULT_CELL_BUDGET):
    """All mesh-cell centres ``(S, d)`` and their certificates ``(S, c, n, m)``."""
    parts = list(_cell_terms(as_pixels(img), as_spec(spec), np.asarray(A, float), np.asarray(B, float),
                             box, N, sign, per_cell, budget))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def _correction(img, spec, A, B, box: ParamBox, N: int, sign: str, per_cell: bool,
                budget: int, table: GradientTable | None = None) -> np.ndarray:
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    best = None
    for _, cert in _cell_terms(as_pixels(img), as_spec(spec), A, B, box, N, sign, per_cell, budget, table):
        if sign == "lower":
            cand = cert.min(axis=0)
            best = cand if best is None else np.minimum(best, cand)
        else:
            cand = cert.max(axis=0)
            best = cand if best is None else np.maximum(best, cand)
    return np.minimum(best, 0.0) if sign == "lower" else np.maximum(best, 0.0)


def correction_1d(img, spec, A, B, box: ParamBox, N: int, sign: str = "lower",
                  per_cell: bool = True) -> np.ndarray:
    """Correction for a one-parameter box split into ``N`` equal sub-intervals."""
    if box.dim != 1:
        raise InvalidInputError("correction_1d needs a one-dimensional box")
    return _correction(img, spec, A, B, box, N, sign, per_cell, DEFAULT_CELL_BUDGET)


def correction_multid(img, spec, A, B, box: ParamBox, N: int, sign: str = "lower",
                      per_cell: bool = True, budget: int = DEFAULT_CELL_BUDGET) -> np.ndarray:
    """Correction over an ``N^d`` mesh; with ``per_cell=False`` whole-box constants are used."""
    return _correction(img, spec, A, B, box, N, sign, per_cell, budget)


@dataclass(frozen=True, eq=False)
class LinearRelaxation:
    """Sound affine enclosure of every transformed pixel over ``box``."""

    bounds: AffineBoundPair
    delta_low: np.ndarray
    delta_up: np.ndarray
    box: ParamBox
    spec: TransformSpec
    provenance: dict = field(default_factory=dict)

    def lower(self, params) -> np.ndarray:
        return self.bounds.lower(params) + self.delta_low

    def upper(self, params) -> np.ndarray:
        return self.bounds.upper(params) + self.delta_up

    @property
    def shape(self) -> tuple:
        return self.delta_low.shape

    def concretize(self):
        """Per-pixel intervals ``(lo, hi)`` implied by the relaxation over the box."""
        lo = self.box.lower[:, None, None, None]
        hi = self.box.upper[:, None, None, None]
        Al, Au = self.bounds.A_low, self.bounds.A_up
        low = self.bounds.B_low + np.minimum(Al * lo, Al * hi).sum(axis=0) + self.delta_low
        up = self.bounds.B_up + np.maximum(Au * lo, Au * hi).sum(axis=0) + self.delta_up
        return low, up

    def to_dict(self) -> dict:
        b = self.bounds
        return {
            "transform": self.spec.kind.value,
            "box": self.box.to_dict(),
            "shape": list(self.shape),
            "A_low": b.A_low.tolist(), "B_low": b.B_low.tolist(),
            "A_up": b.A_up.tolist(), "B_up": b.B_up.tolist(),
            "delta_low": self.delta_low.tolist(), "delta_up": self.delta_up.tolist(),
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LinearRelaxation":
        arr = lambda k: np.asarray(d[k], dtype=np.float64)  # noqa: E731
        bounds = AffineBoundPair(arr("A_low"), arr("B_low"), arr("A_up"), arr("B_up"))
        return cls(bounds, arr("delta_low"), arr("delta_up"), ParamBox.from_dict(d["box"]),
                   as_spec(d["transform"]), dict(d.get("provenance", {})))


def _fit_active(px, spec, box: ParamBox, P: int, zero_slopes: bool) -> AffineBoundPair:
    """Sampled bounds on the non-degenerate dimensions, embedded with zero slope elsewhere."""
    active = np.flatnonzero(box.width > 0)
    sub = ParamBox(box.lower[active], box.upper[active])
    sub_params = sample_params(sub, P)
    params = np.repeat(box.lower[None], sub_params.shape[0], axis=0)
    params[:, active] = sub_params
    images = transform_batch(px, spec, params)
    full = (box.dim,) + images.shape[1:]
    if zero_slopes:
        z = np.zeros(full)
        return AffineBoundPair(z, images.min(axis=0), z.copy(), images.max(axis=0))
    fit = bound_multid(SampleSet(sub_params, images, sub))
    A_low, A_up = np.zeros(full), np.zeros(full)
    A_low[active] = fit.A_low
    A_up[active] = fit.A_up
    # intercepts are relative to the active coordinates; inactive ones carry zero slope
    return AffineBoundPair(A_low, fit.B_low, A_up, fit.B_up)


def build_relaxation(img, spec, box: ParamBox, P: int = 10, N: int | None = None,
                     epsilon: float | None = None, per_cell: bool = True,
                     zero_slopes: bool = False, budget: int = DEFAULT_CELL_BUDGET) -> LinearRelaxation:
    """Sample, fit optimal affine bounds, then correct them on an ``N``-mesh.

    Exactly one of ``N`` and ``epsilon`` must be given.  With ``epsilon`` the
    mesh size is the smallest one whose worst-case certificate loss, using
    whole-box Lipschitz constants, is at most ``epsilon`` for every pixel.
    """
    if (N is None) == (epsilon is None):
        raise InvalidInputError("give exactly one of N and epsilon")
    spec = as_spec(spec)
    if box.dim != spec.dim:
        raise InvalidInputError(f"{spec.kind.value} needs a {spec.dim}-d box, got {box.dim}")
    px = as_pixels(img)
    prov = {"P": int(P), "per_cell": bool(per_cell), "zero_slopes": bool(zero_slopes)}
    if box.is_point:
        g0 = transform_batch(px, spec, box.lower[None])[0]
        z = np.zeros((box.dim,) + g0.shape)
        bounds = AffineBoundPair(z, g0.copy(), z.copy(), g0.copy())
        zero = np.zeros_like(g0)
        prov["N"] = 1 if N is None else int(N)
        return LinearRelaxation(bounds, zero, zero.copy(), box, spec, prov)

    bounds = _fit_active(px, spec, box, P, zero_slopes)
    table = GradientTable(px)
    if N is None:
        total = np.zeros(px.shape)
        for k in np.flatnonzero(box.width > 0):
            L = np.maximum(
                lipschitz_grid(table, spec, box.lower[None], box.upper[None], k, bounds.A_low[k])[0],
                lipschitz_grid(table, spec, box.lower[None], box.upper[None], k, bounds.A_up[k])[0])
            total = total + L * box.width[k]
        if box.dim == 1:
            N = choose_subdivisions(float(total.max()) / box.width[0], float(box.width[0]), epsilon)
        else:
            N = choose_subdivisions(float(total.max()), 1.0, epsilon)
        prov["epsilon"] = float(epsilon)
    prov["N"] = int(N)
    d_low = _correction(px, spec, bounds.A_low, bounds.B_low, box, N, "lower", per_cell, budget, table)
    d_up = _correction(px, spec, bounds.A_up, bounds.B_up, box, N, "upper", per_cell, budget, table)
    return LinearRelaxation(bounds, d_low, d_up, box, spec, prov)


@dataclass(frozen=True)
class SoundnessReport:
    samples: int
    violations: int
    worst: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.violations == 0

    def to_dict(self) -> dict:
        return {"samples": self.samples, "violations": self.violations,
                "worst": self.worst, "tolerance": self.tolerance, "ok": self.ok}


def soundness_points(box: ParamBox, samples: int, seed: int = 0) -> np.ndarray:
    """Dense evaluation points: a uniform grid for ``d = 1``, corners plus Sobol points otherwise."""
    if samples < 1:
        raise InvalidInputError("samples must be >= 1")
    if box.dim == 1:
        num = max(samples, 2) if box.width[0] > 0 else 1
        return np.linspace(box.lower[0], box.upper[0], num)[:, None]
    from scipy.stats import qmc

    corners = box.corners()
    rest = max(samples - corners.shape[0], 1)
    m = max(0, math.ceil(math.log2(rest)))
    u = qmc.Sobol(d=box.dim, scramble=True, seed=seed).random_base2(m)[:rest]
    return np.vstack([corners, box.lower + u * box.width])


def check_soundness(relax: LinearRelaxation, img, spec=None, samples: int = 100_000,
                    tol: float = 1e-9, seed: int = 0) -> SoundnessReport:
    """Count pixel-sample pairs where the transformed pixel leaves the relaxation by more than ``tol``."""
    spec = relax.spec if spec is None else as_spec(spec)
    px = as_pixels(img)
    pts = soundness_points(relax.box, samples, seed)
    step = max(1, _CHUNK_ELEMS // px.size)
    count, worst = 0, 0.0
    for s in range(0, pts.shape[0], step):
        p = pts[s:s + step]
        g = transform_batch(px, spec, p)
        v = np.maximum(relax.lower(p) - g, g - relax.upper(p))
        count += int(np.count_nonzero(v > tol))
        worst = max(worst, float(v.max()))
    return SoundnessReport(int(pts.shape[0]), count, worst, tol)
