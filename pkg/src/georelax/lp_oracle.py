"""Brute-force vertex enumeration for the sampled bound problem.

Deliberately shares no helpers with :mod:`georelax.unsound`: every basic
solution is the intersection of ``d + 1`` active constraints
``k_p . a + b = g_p``, obtained by solving the square system for the stacked
unknown ``z = (a, b)``.  Used only as a correctness oracle.
"""
from __future__ import annotations

from itertools import combinations

import numpy as np

from .errors import InvalidInputError


def _solve_lower(params: np.ndarray, values: np.ndarray, tol: float):
    P, d = params.shape
    flat = values.reshape(P, -1)
    rows = np.hstack([params, np.ones((P, 1))])          # constraint rows (k_p, 1)
    best = np.full(flat.shape[1], np.inf)
    z_best = np.zeros((d + 1, flat.shape[1]))
    z_best[d] = flat.min(axis=0)
    found = False
    for subset in combinations(range(P), d + 1):
        M = rows[list(subset)]
        if np.linalg.matrix_rank(M) < d + 1:
            continue
        found = True
        z = np.linalg.solve(M, flat[list(subset)])      # (d+1, pix)
        slack = flat - rows @ z                          # g - (k.a + b)
        ok = slack.min(axis=0) >= -tol
        val = np.where(ok, slack.sum(axis=0) / P, np.inf)
        take = val < best
        best = np.where(take, val, best)
        z_best[:, take] = z[:, take]
    if not found:
        raise InvalidInputError("no d+1 affinely independent samples")
    pix = values.shape[1:]
    return z_best[:d].reshape((d,) + pix), z_best[d].reshape(pix), best.reshape(pix)


def lp_oracle(samples, sign: str = "lower", tol: float = 1e-12):
    """Exact optimum of the sampled problem by enumerating basic solutions.

    Returns ``(A, B, objective)`` with ``A`` of shape ``(d, c, n, m)``.
    """
    params = np.asarray(samples.params, dtype=np.float64)
    values = np.asarray(samples.images, dtype=np.float64)
    params, keep = np.unique(params, axis=0, return_index=True)
    values = values[keep]
    if params.shape[0] < params.shape[1] + 1:
        raise InvalidInputError("too few distinct samples")
    if sign == "lower":
        return _solve_lower(params, values, tol)
    if sign == "upper":
        a, b, obj = _solve_lower(params, -values, tol)
        return -a, -b, obj
    raise InvalidInputError(f"sign must be 'lower' or 'upper', got {sign!r}")
