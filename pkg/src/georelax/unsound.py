"""Optimal affine bounds through sampled transformed images.

For every pixel independently we solve

    minimise    mean_p  r(k_p)
    subject to  r(k_p) >= 0   for every sample p,

with the lower residual ``r(k) = g(k) - A.k - B``.  An optimum always passes
through samples, so the search is restricted to those candidates:

* ``d = 1``: for each anchor sample the feasible slopes form an interval
  bounded by the chord slopes to the samples on each side; the objective is
  linear in the slope so the best endpoint is read off the sign of
  ``theta_p - mean(theta)``.
* ``d >= 2``: every affinely independent ``(d+1)``-subset defines a plane;
  only subsets whose simplex contains the sample mean can be optimal, and
  among those the best feasible plane is kept.

Upper bounds are lower bounds of ``-g`` with the sign flipped back.
All routines are tensorized over pixels.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ShapeError
from .image import as_pixels, transform_batch
from .transforms import ParamBox

FEAS_TOL = 1e-12
TIE_TOL = 1e-12
# elements per chunk of the (anchor, sample, pixel) tensors
_CHUNK = 1 << 22


@dataclass(frozen=True, eq=False)
class SampleSet:
    """Sampled parameters ``(P, d)`` and the images ``(P, c, n, m)`` they produce."""

    params: np.ndarray
    images: np.ndarray
    box: ParamBox | None = None

    def __post_init__(self):
        p = np.asarray(self.params, dtype=np.float64)
        if p.ndim == 1:
            p = p[:, None]
        v = np.asarray(self.images, dtype=np.float64)
        if v.shape[0] != p.shape[0]:
            raise ShapeError(f"{p.shape[0]} params but {v.shape[0]} images")
        object.__setattr__(self, "params", p)
        object.__setattr__(self, "images", v)

    @classmethod
    def from_box(cls, img, spec, box: ParamBox, P: int) -> "SampleSet":
        params = sample_params(box, P)
        return cls(params, transform_batch(img, spec, params), box)

    @property
    def dim(self) -> int:
        return self.params.shape[1]

    def __len__(self):
        return self.params.shape[0]


@dataclass(frozen=True, eq=False)
class AffineBoundPair:
    """Per-pixel affine bounds in the parameter.

    ``A_low``/``A_up`` have shape ``(d, c, n, m)``, ``B_low``/``B_up`` ``(c, n, m)``.
    """

    A_low: np.ndarray
    B_low: np.ndarray
    A_up: np.ndarray
    B_up: np.ndarray

    def lower(self, params) -> np.ndarray:
        return affine_eval(params, self.A_low, self.B_low)

    def upper(self, params) -> np.ndarray:
        return affine_eval(params, self.A_up, self.B_up)


def affine_eval(params, A, B) -> np.ndarray:
    """``sum_i k_i A_i + B`` for params of shape ``(d,)`` or ``(S, d)``."""
    p = np.asarray(params, dtype=np.float64)
    if p.ndim == 1:
        return np.tensordot(p, A, axes=(0, 0)) + B
    return np.tensordot(p, A, axes=(1, 0)) + B


def sample_params(box: ParamBox, P: int) -> np.ndarray:
    """``P`` distinct parameter vectors inside ``box``, shape ``(P, d)``.

    One dimension: ``P`` evenly spaced values including both endpoints.
    Several dimensions: a ``ceil(P**(1/d))``-per-axis grid truncated to ``P``
    points, with the origin corner and its ``d`` adjacent corners first so any
    ``P >= d + 1`` prefix is affinely independent.
    """
    d = box.dim
    if P < d + 1:
        raise InvalidInputError(f"need at least d+1 = {d + 1} samples, got {P}")
    if np.any(box.width <= 0):
        raise InvalidInputError("cannot draw distinct samples from a box with a zero-width side")
    if d == 1:
        return np.linspace(box.lower[0], box.upper[0], P)[:, None]
    k = max(2, math.ceil(round(P ** (1.0 / d), 12)))
    axes = [np.linspace(box.lower[i], box.upper[i], k) for i in range(d)]
    grid = list(itertools.product(range(k), repeat=d))
    first = [tuple(0 for _ in range(d))]
    first += [tuple(k - 1 if a == i else 0 for a in range(d)) for i in range(d)]
    corners = [t for t in itertools.product((0, k - 1), repeat=d) if t not in first]
    order = first + corners + [t for t in grid if t not in first and t not in corners]
    pts = np.array([[axes[i][t[i]] for i in range(d)] for t in order[:P]])
    return pts


def residual(samples_or_params, A, B, sign: str = "lower", values=None) -> np.ndarray:
    """Lower residual ``g - (A.k + B)`` or upper residual ``(A.k + B) - g``.

    Accepts a :class:`SampleSet`, or params with explicit ``values``.
    """
    if isinstance(samples_or_params, SampleSet):
        params, values = samples_or_params.params, samples_or_params.images
    else:
        params = samples_or_params
        if values is None:
            raise InvalidInputError("values are required when passing raw params")
    bound = affine_eval(params, A, B)
    values = np.asarray(values, dtype=np.float64)
    if bound.shape != values.shape:
        raise ShapeError(f"bound shape {bound.shape} vs values {values.shape}")
    if sign == "lower":
        return values - bound
    if sign == "upper":
        return bound - values
    raise InvalidInputError(f"sign must be 'lower' or 'upper', got {sign!r}")


def objective(samples: SampleSet, A, B, sign: str = "lower") -> np.ndarray:
    """Mean sample residual per pixel."""
    return residual(samples, A, B, sign).mean(axis=0)


def _dedup(params: np.ndarray, values: np.ndarray):
    _, idx = np.unique(params, axis=0, return_index=True)
    idx = np.sort(idx)
    return params[idx], values[idx]


def _pick_first_min(obj: np.ndarray) -> np.ndarray:
    """Index of the first candidate within TIE_TOL of the minimum along axis 0."""
    best = obj.min(axis=0)
    return np.argmax(obj <= best + TIE_TOL, axis=0)


def _lower_1d(theta: np.ndarray, G: np.ndarray):
    """Optimal lower line for samples ``theta`` (P,) and values ``G`` (P, ...)."""
    theta, G = _dedup(theta.reshape(-1, 1), G)
    theta = theta[:, 0]
    order = np.argsort(theta, kind="stable")
    theta, G = theta[order], G[order]
    P = theta.shape[0]
    if P < 2:
        raise InvalidInputError("need at least two distinct parameter values")
    pix = G.shape[1:]
    Gf = G.reshape(P, -1)
    mean_t = theta.mean()
    dt = theta[None, :] - theta[:, None]                     # [p, k] = theta_k - theta_p
    best_obj = np.full(Gf.shape[1], np.inf)
    best_A = np.zeros(Gf.shape[1])
    best_B = Gf.min(axis=0).copy()
    step = max(1, _CHUNK // (P * max(1, Gf.shape[1])))
    with np.errstate(divide="ignore", invalid="ignore"):
        for s in range(0, P, step):
            a = np.arange(s, min(P, s + step))
            dg = Gf[None, :, :] - Gf[a][:, None, :]            # [p, k, pix]
            d = dt[a][:, :, None]
            slope = dg / d
            hi = np.where(d > 0, slope, np.inf).min(axis=1)   # A <= chord slope to the right
            lo = np.where(d < 0, slope, -np.inf).max(axis=1)  # A >= chord slope to the left
            # objective = mean(g) - g_p + A * (theta_p - mean): pick the cheaper endpoint
            coef = (theta[a] - mean_t)[:, None]
            prefer_lo = np.where(coef > 0, True, np.where(coef < 0, False, np.abs(lo) <= np.abs(hi)))
            A = np.where(prefer_lo, np.where(np.isfinite(lo), lo, hi), np.where(np.isfinite(hi), hi, lo))
            r = dg - A[:, None, :] * d
            feasible = r.min(axis=1) >= -FEAS_TOL
            obj = np.where(feasible, r.mean(axis=1), np.inf)
            pick = _pick_first_min(obj)
            cols = np.arange(obj.shape[1])
            cand = obj[pick, cols]
            better = cand < best_obj - TIE_TOL
            best_obj = np.where(better, cand, best_obj)
            Ap = A[pick, cols]
            best_A = np.where(better, Ap, best_A)
            best_B = np.where(better, Gf[a[pick], cols] - Ap * theta[a[pick]], best_B)
    # constant pixels: exact
    const = np.all(Gf == Gf[:1], axis=0)
    best_A = np.where(const, 0.0, best_A)
    best_B = np.where(const, Gf[0], best_B)
    return best_A.reshape(pix), best_B.reshape(pix)


def _lower_multid(K: np.ndarray, G: np.ndarray):
    """Optimal lower plane over ``(d+1)``-subsets of samples.

    A basis can only be optimal if its simplex contains the sample mean; its
    objective is then ``mean(g) - sum_k lam_k g_k`` with ``lam`` the
    barycentric weights of the mean.  The optimum is the smallest such value
    (LP duality); the first feasible basis attaining it is kept.
    """
    K, G = _dedup(K, G)
    P, d = K.shape
    if P < d + 1:
        raise InvalidInputError(f"need at least {d + 1} distinct samples, got {P}")
    pix = G.shape[1:]
    Gf = G.reshape(P, -1)
    npix = Gf.shape[1]
    subsets = np.array(list(itertools.combinations(range(P), d + 1)), dtype=np.intp)
    # drop affinely dependent subsets: K_sub = k_p - k_last for the first d members
    Ks = K[subsets[:, :d]] - K[subsets[:, d]][:, None, :]
    scale = np.prod(np.linalg.norm(Ks, axis=2), axis=1)
    det = np.linalg.det(Ks)
    ok = np.abs(det) > 1e-10 * np.maximum(scale, 1e-300)
    if not np.any(ok):
        raise InvalidInputError("no affinely independent subset of d+1 samples")
    subsets, Ks = subsets[ok], Ks[ok]
    mean = K.mean(axis=0)
    bary = np.linalg.solve(np.swapaxes(Ks, 1, 2), (mean - K[subsets[:, d]])[:, :, None])[:, :, 0]
    lam = np.concatenate([bary, 1.0 - bary.sum(axis=1, keepdims=True)], axis=1)
    inside = lam.min(axis=1) >= -1e-9
    subsets, Ks, lam = subsets[inside], Ks[inside], np.maximum(lam[inside], 0.0)
    S = subsets.shape[0]
    step = max(1, _CHUNK // (8 * max(1, npix)))

    def plane_value(s0, s1):
        # value at the mean of the plane through each subset, per pixel
        return np.einsum("sk,skq->sq", lam[s0:s1], Gf[subsets[s0:s1]])

    # every such value bounds the optimum from above (weak duality) and the optimum attains it
    best = np.full(npix, np.inf)
    for s0 in range(0, S, step):
        best = np.minimum(best, plane_value(s0, s0 + step).min(axis=0))
    tie = TIE_TOL * (1.0 + np.abs(best))

    best_A = np.zeros((d, npix))
    done = np.zeros(npix, dtype=bool)
    for s0 in range(0, S, step):
        if done.all():
            break
        mask = (plane_value(s0, s0 + step) <= best + tie) & ~done
        while mask.any():
            # a few candidates per unresolved pixel at a time, in subset order
            take = mask & (np.cumsum(mask, axis=0) <= 4)
            si, qi = np.nonzero(take)
            mask &= ~take
            sub = subsets[s0 + si]
            Gd = Gf[sub[:, :d], qi[:, None]] - Gf[sub[:, d], qi][:, None]
            A = np.linalg.solve(Ks[s0 + si], Gd[:, :, None])[:, :, 0]      # (pairs, d)
            B = Gf[sub[:, d], qi] - np.einsum("pd,pd->p", K[sub[:, d]], A)
            r = Gf[:, qi].T - A @ K.T - B[:, None]                       # (pairs, P)
            good = r.min(axis=1) >= -FEAS_TOL
            order = np.lexsort((si, ~good))                               # feasible first, then subset order
            q_first, first = np.unique(qi[order], return_index=True)
            pick = order[first]
            win = good[pick] & ~done[q_first]
            best_A[:, q_first[win]] = A[pick[win]].T
            done[q_first[win]] = True
            mask &= ~done
    # no candidate survived numerically: the flat plane through the sample minimum is feasible
    best_A[:, ~done] = 0.0
    # tightest intercept for the winning slopes; equals the candidate's own
    # intercept up to rounding and touches a sample exactly
    B = np.min(Gf - K @ best_A, axis=0)
    return best_A.reshape((d,) + pix), B.reshape(pix)


def _params_values(samples: SampleSet):
    return samples.params, samples.images


def lower_bound_1d(samples: SampleSet):
    """Optimal lower line; returns ``A_low`` of shape ``(1, c, n, m)`` and ``B_low``."""
    params, G = _params_values(samples)
    if params.shape[1] != 1:
        raise InvalidInputError("lower_bound_1d needs one-dimensional parameters")
    A, B = _lower_1d(params[:, 0], G)
    return A[None], B


def upper_bound_1d(samples: SampleSet):
    params, G = _params_values(samples)
    if params.shape[1] != 1:
        raise InvalidInputError("upper_bound_1d needs one-dimensional parameters")
    A, B = _lower_1d(params[:, 0], -G)
    return -A[None], -B


def bound_multid(samples: SampleSet) -> AffineBoundPair:
    """Optimal lower and upper affine bounds for any parameter dimension."""
    params, G = _params_values(samples)
    if params.shape[1] == 1:
        A_low, B_low = lower_bound_1d(samples)
        A_up, B_up = upper_bound_1d(samples)
        return AffineBoundPair(A_low, B_low, A_up, B_up)
    A_low, B_low = _lower_multid(params, G)
    A_up, B_up = _lower_multid(params, -G)
    return AffineBoundPair(A_low, B_low, -A_up, -B_up)


def fit_bounds(samples: SampleSet) -> AffineBoundPair:
    return bound_multid(samples)
