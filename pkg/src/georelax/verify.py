"""Bound propagation over a geometric relaxation.

The relaxation acts as a symbolic first layer: every network input pixel is
enclosed by two affine functions of the transform parameters.  Interval
propagation concretizes it up front; the backward linear pass keeps the
parameters symbolic until the very end, so the output bounds are affine in
the parameters and only then minimised over the box.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, ShapeError
from .network import AFFINE, Flatten, Network, ReLU
from .soundify import LinearRelaxation


@dataclass(frozen=True, eq=False)
class ParamLinearForm:
    """Affine lower/upper bounds ``slope @ k + intercept`` for ``K`` outputs (slopes ``(K, d)``)."""

    slope_low: np.ndarray
    icpt_low: np.ndarray
    slope_up: np.ndarray
    icpt_up: np.ndarray

    def lower(self, params) -> np.ndarray:
        return np.asarray(params, float) @ self.slope_low.T + self.icpt_low

    def upper(self, params) -> np.ndarray:
        return np.asarray(params, float) @ self.slope_up.T + self.icpt_up

    def concretize(self, box):
        lo, hi = box.lower, box.upper
        low = self.icpt_low + np.minimum(self.slope_low * lo, self.slope_low * hi).sum(axis=1)
        up = self.icpt_up + np.maximum(self.slope_up * lo, self.slope_up * hi).sum(axis=1)
        return low, up


@dataclass(frozen=True, eq=False)
class BoundResult:
    """Per-class output intervals, with optional direct bounds on ``f_label - f_i``."""

    lower: np.ndarray
    upper: np.ndarray
    method: str
    forms: ParamLinearForm | None = None
    label: int | None = None
    diff_lower: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def margin(self) -> float | None:
        return None if self.label is None else robustness_margin(self, self.label)


def robustness_margin(bounds: BoundResult, label: int) -> float:
    """``min_{i != label} (lower f_label - upper f_i)``; positive means certified.

    When the result also carries sound lower bounds on the differences
    ``f_label - f_i`` for the same label, the better of the two is used.
    """
    k = len(bounds.lower)
    if k < 2:
        raise InvalidInputError("robustness margin needs at least two classes")
    if not 0 <= label < k:
        raise InvalidInputError(f"label {label} out of range for {k} classes")
    others = np.arange(k) != label
    margin = float(bounds.lower[label] - np.max(bounds.upper[others]))
    if bounds.diff_lower is not None and bounds.label == label:
        margin = max(margin, float(np.min(bounds.diff_lower[others])))
    return margin


def _check_input(net: Network, relax: LinearRelaxation):
    if tuple(relax.shape) != net.input_shape:
        raise ShapeError(f"relaxation shape {tuple(relax.shape)} does not match network input {net.input_shape}")


def interval_pass(net: Network, lo: np.ndarray, hi: np.ndarray):
    """Interval bounds at the output of every layer; entry 0 is the input box."""
    out = [(lo, hi)]
    for layer in net.layers:
        lo, hi = out[-1]
        if isinstance(layer, AFFINE):
            mid = layer.forward(((lo + hi) / 2)[None])[0]
            rad = layer.linear(((hi - lo) / 2)[None], absolute=True)[0]
            out.append((mid - rad, mid + rad))
        elif isinstance(layer, ReLU):
            out.append((np.maximum(lo, 0.0), np.maximum(hi, 0.0)))
        elif isinstance(layer, Flatten):
            out.append((lo.reshape(-1), hi.reshape(-1)))
        else:  # pragma: no cover
            raise InvalidInputError(f"unsupported layer {layer!r}")
    return out


def ibp_forward(net: Network, relax: LinearRelaxation, label: int | None = None) -> BoundResult:
    _check_input(net, relax)
    lo, hi = relax.concretize()
    layers = interval_pass(net, lo, hi)
    return BoundResult(layers[-1][0], layers[-1][1], "ibp", label=label)


def relu_relaxation(l: np.ndarray, u: np.ndarray):
    """Slopes and intercepts of the linear ReLU bounds given pre-activation ``[l, u]``.

    Returns ``(lower_slope, upper_slope, upper_intercept)``; the lower line
    passes through the origin.  Unstable neurons use the chord above and slope
    1 below when ``u >= -l``, else slope 0.
    """
    active = l >= 0
    unstable = (l < 0) & (u > 0)
    denom = np.where(unstable, u - l, 1.0)
    up_s = np.where(active, 1.0, np.where(unstable, u / denom, 0.0))
    up_b = np.where(unstable, -l * u / denom, 0.0)
    low_s = np.where(active, 1.0, np.where(unstable, (u >= -l).astype(float), 0.0))
    return low_s, up_s, up_b


def _backward(net: Network, upto: int, C: np.ndarray, pre: list):
    """Linear bounds of ``C @ z_upto`` in terms of the network input.

    ``z_upto`` is the output of layer ``upto - 1``; ``pre[j]`` holds interval
    bounds on the input of layer ``j``.  Returns input-space coefficient
    tensors and constants for the lower and upper bound.
    """
    K = C.shape[0]
    lam_l = C.reshape((K,) + net.shapes[upto]).astype(np.float64)
    lam_u = lam_l.copy()
    c_l = np.zeros(K)
    c_u = np.zeros(K)
    for j in range(upto - 1, -1, -1):
        layer = net.layers[j]
        in_shape = net.shapes[j]
        if isinstance(layer, AFFINE):
            c_l += layer.bias_term(lam_l.reshape(K, -1))
            c_u += layer.bias_term(lam_u.reshape(K, -1))
            lam_l = layer.transpose(lam_l, in_shape)
            lam_u = layer.transpose(lam_u, in_shape)
        elif isinstance(layer, ReLU):
            l, u = pre[j]
            a, s, t = relu_relaxation(l, u)
            pos_l, neg_l = np.maximum(lam_l, 0), np.minimum(lam_l, 0)
            pos_u, neg_u = np.maximum(lam_u, 0), np.minimum(lam_u, 0)
            c_l += (neg_l * t).reshape(K, -1).sum(axis=1)
            c_u += (pos_u * t).reshape(K, -1).sum(axis=1)
            lam_l = pos_l * a + neg_l * s
            lam_u = pos_u * s + neg_u * a
        elif isinstance(layer, Flatten):
            lam_l = lam_l.reshape((K,) + tuple(in_shape))
            lam_u = lam_u.reshape((K,) + tuple(in_shape))
        else:  # pragma: no cover
            raise InvalidInputError(f"unsupported layer {layer!r}")
    return lam_l.reshape(K, -1), c_l, lam_u.reshape(K, -1), c_u


def _through_relaxation(relax: LinearRelaxation, lam_l, c_l, lam_u, c_u) -> ParamLinearForm:
    """Substitute the geometric input layer, choosing the bound by coefficient sign."""
    b = relax.bounds
    d = relax.box.dim
    A_lo = b.A_low.reshape(d, -1)
    A_hi = b.A_up.reshape(d, -1)
    off_lo = (b.B_low + relax.delta_low).reshape(-1)
    off_hi = (b.B_up + relax.delta_up).reshape(-1)
    pl, nl = np.maximum(lam_l, 0), np.minimum(lam_l, 0)
    pu, nu = np.maximum(lam_u, 0), np.minimum(lam_u, 0)
    return ParamLinearForm(
        slope_low=pl @ A_lo.T + nl @ A_hi.T,
        icpt_low=pl @ off_lo + nl @ off_hi + c_l,
        slope_up=pu @ A_hi.T + nu @ A_lo.T,
        icpt_up=pu @ off_hi + nu @ off_lo + c_u,
    )


def _linear_bounds(net, relax, upto, C, pre):
    form = _through_relaxation(relax, *_backward(net, upto, C, pre))
    lo, hi = form.concretize(relax.box)
    return form, lo, hi


def preactivation_bounds(net: Network, relax: LinearRelaxation, intermediate: str = "ibp"):
    """Interval bounds on the input of every layer, from IBP or backward passes."""
    if intermediate not in ("ibp", "crown"):
        raise InvalidInputError(f"intermediate must be 'ibp' or 'crown', got {intermediate!r}")
    lo, hi = relax.concretize()
    pre = interval_pass(net, lo, hi)
    if intermediate == "ibp":
        return pre
    pre = list(pre)
    for j, layer in enumerate(net.layers):
        if not isinstance(layer, ReLU):
            continue
        size = int(np.prod(net.shapes[j]))
        _, l, u = _linear_bounds(net, relax, j, np.eye(size), pre)
        il, iu = pre[j]
        l = np.maximum(l.reshape(il.shape), il)
        u = np.minimum(u.reshape(iu.shape), iu)
        # backward passes only read bounds at ReLU inputs, and earlier ones are final here
        pre[j] = (l, u)
    return pre


def crown_backward(net: Network, relax: LinearRelaxation, label: int | None = None,
                   intermediate: str = "ibp") -> BoundResult:
    """Backward linear bound propagation with the relaxation as first layer.

    Intermediate ReLU bounds come from interval propagation (``"ibp"``) or
    from a backward pass per layer (``"crown"``).  The final intervals are
    intersected with the interval-propagation ones, so they are never wider.
    With a ``label`` the differences ``f_label - f_i`` are bounded directly.
    """
    _check_input(net, relax)
    pre = preactivation_bounds(net, relax, intermediate)
    T = len(net.layers)
    k = net.num_classes
    form, lo, hi = _linear_bounds(net, relax, T, np.eye(k), pre)
    ibp_lo, ibp_hi = pre[-1]
    lo = np.maximum(lo, ibp_lo)
    hi = np.minimum(hi, ibp_hi)
    diff = None
    if label is not None:
        if not 0 <= label < k:
            raise InvalidInputError(f"label {label} out of range for {k} classes")
        C = -np.eye(k)
        C[:, label] += 1.0
        _, diff, _ = _linear_bounds(net, relax, T, C, pre)
        diff[label] = np.inf
    method = "crown" if intermediate == "crown" else "crown-ibp"
    return BoundResult(lo, hi, method, forms=form, label=label, diff_lower=diff)


def verify(net: Network, relax: LinearRelaxation, label: int, mode: str = "crown-ibp") -> BoundResult:
    """Bounds with the named verifier: ``ibp``, ``crown-ibp`` or ``crown``."""
    mode = mode.lower()
    if mode == "ibp":
        return ibp_forward(net, relax, label)
    if mode == "crown-ibp":
        return crown_backward(net, relax, label, "ibp")
    if mode == "crown":
        return crown_backward(net, relax, label, "crown")
    raise InvalidInputError(f"unknown verifier mode {mode!r}")


__all__ = [
    "BoundResult", "ParamLinearForm", "crown_backward", "ibp_forward",
    "interval_pass", "preactivation_bounds", "relu_relaxation", "robustness_margin", "verify",
]
