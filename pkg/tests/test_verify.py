import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from georelax.errors import InvalidInputError, ShapeError
from georelax.image import transform_batch
from georelax.network import Dense, Flatten, Network, forward
from georelax.soundify import LinearRelaxation, build_relaxation
from georelax.transforms import ParamBox, TransformSpec
from georelax.unsound import AffineBoundPair
from georelax.verify import (BoundResult, crown_backward, ibp_forward, relu_relaxation,
                             robustness_margin, verify)

from _support import conv_net, random_mlp, rough_image, smooth_image

MODES = ["ibp", "crown-ibp", "crown"]


def _synthetic(A_low, B_low, A_up, B_up, box, kind="translation"):
    z = np.zeros_like(B_low)
    return LinearRelaxation(AffineBoundPair(A_low, B_low, A_up, B_up), z, z.copy(), box, TransformSpec(kind))


def test_interval_difference_example():
    net = Network([Flatten(), Dense([[1.0, -1.0]], [0.0])], (1, 1, 2))
    A = np.zeros((1, 1, 1, 2))
    relax = _synthetic(A, np.zeros((1, 1, 2)), A, np.ones((1, 1, 2)), ParamBox.point([0.0]), "rotation")
    for mode in MODES:
        b = verify(net, relax, 0, mode) if mode == "ibp" else crown_backward(net, relax)
        assert np.allclose(b.lower, [-1]) and np.allclose(b.upper, [1])


def test_relu_relaxation_examples():
    low, up, icpt = relu_relaxation(np.array([-1.0, -3.0, 0.5, -2.0]), np.array([1.0, 1.0, 2.0, -1.0]))
    assert up[0] == 0.5 and icpt[0] == 0.5
    assert low[0] == 1.0 and low[1] == 0.0
    assert (low[2], up[2], icpt[2]) == (1.0, 1.0, 0.0)
    assert (low[3], up[3], icpt[3]) == (0.0, 0.0, 0.0)


@settings(max_examples=200)
@given(l=st.floats(-10, 0, exclude_max=True), u=st.floats(0, 10, exclude_min=True), t=st.floats(0, 1))
def test_relu_lines_enclose_relu(l, u, t):
    low, up, icpt = relu_relaxation(np.array([l]), np.array([u]))
    z = l + t * (u - l)
    assert low[0] * z <= max(z, 0) + 1e-12
    assert up[0] * z + icpt[0] >= max(z, 0) - 1e-9


def _corner_outputs(net, relax):
    out = []
    for c in itertools.product(*zip(relax.box.lower, relax.box.upper)):
        x = relax.lower(np.array([c]))[0]
        out.append(net.forward(x))
    return np.array(out)


@pytest.mark.parametrize("seed", range(5))
def test_affine_network_is_exact(seed):
    rng = np.random.default_rng(seed)
    W1, W2 = rng.normal(size=(6, 16)), rng.normal(size=(3, 6))
    net = Network([Flatten(), Dense(W1, rng.normal(size=6)), Dense(W2, rng.normal(size=3))], (1, 4, 4))
    A = rng.normal(size=(2, 1, 4, 4))
    B = rng.uniform(size=(1, 4, 4))
    box = ParamBox([-0.3, 0.1], [0.2, 0.4])
    relax = _synthetic(A, B, A.copy(), B.copy(), box)
    out = _corner_outputs(net, relax)
    for mode in ("crown-ibp", "crown"):
        b = verify(net, relax, 0, mode)
        assert np.allclose(b.lower, out.min(axis=0), atol=1e-9, rtol=0)
        assert np.allclose(b.upper, out.max(axis=0), atol=1e-9, rtol=0)
        true_diff = (out[:, :1] - out).min(axis=0)
        assert np.allclose(b.diff_lower[1:], true_diff[1:], atol=1e-9, rtol=0)


def _monte_carlo(net, relax, rng, n=10**4):
    params = relax.box.lower + rng.uniform(size=(n, relax.box.dim)) * relax.box.width
    lo, hi = relax.lower(params), relax.upper(params)
    x = lo + rng.uniform(size=lo.shape) * (hi - lo)
    return net.forward(x)


@pytest.mark.parametrize("seed", range(6))
def test_monte_carlo_containment_and_dominance(seed):
    rng = np.random.default_rng(seed)
    img = smooth_image(rng)
    net = conv_net(rng, (1, 9, 9)) if seed % 2 else random_mlp(rng, (1, 9, 9), (15, 10), 5)
    kind = ["rotation", "translation", "scaling"][seed % 3]
    box = {"rotation": ParamBox([-0.05], [0.05]), "translation": ParamBox([-0.2, 0.0], [0.0, 0.2]),
           "scaling": ParamBox([-3.0], [3.0])}[kind]
    relax = build_relaxation(img, kind, box, P=10, N=50)
    out = _monte_carlo(net, relax, rng)
    ibp = verify(net, relax, 0, "ibp")
    for mode in MODES:
        b = verify(net, relax, 0, mode)
        assert np.all(out >= b.lower - 1e-9) and np.all(out <= b.upper + 1e-9)
        assert np.all(b.lower >= ibp.lower - 1e-12) and np.all(b.upper <= ibp.upper + 1e-12)
        if b.diff_lower is not None:
            assert np.all((out[:, :1] - out)[:, 1:] >= b.diff_lower[1:] - 1e-9)
    c = verify(net, relax, 0, "crown")
    assert np.all(c.upper - c.lower <= verify(net, relax, 0, "crown-ibp").upper - verify(net, relax, 0, "crown-ibp").lower + 1e-9)


def test_margin_examples():
    b = BoundResult(np.array([2.0, 0.0]), np.array([3.0, 1.0]), "ibp")
    assert robustness_margin(b, 0) == 1.0
    assert robustness_margin(b, 1) == -3.0
    with pytest.raises(InvalidInputError):
        robustness_margin(BoundResult(np.array([1.0]), np.array([1.0]), "ibp"), 0)
    with pytest.raises(InvalidInputError):
        robustness_margin(b, 2)


def test_diff_bounds_improve_margin():
    b = BoundResult(np.array([0.0, 0.0]), np.array([1.0, 1.0]), "crown", label=0, diff_lower=np.array([np.inf, 0.25]))
    assert b.margin == 0.25


@pytest.mark.parametrize("mode", MODES)
def test_point_box_collapses_to_forward(mode):
    rng = np.random.default_rng(7)
    img = rough_image(rng, 9, 9)
    net = conv_net(rng)
    relax = build_relaxation(img, "rotation", ParamBox.point([0.2]), N=1)
    b = verify(net, relax, 1, mode)
    logits = forward(net, transform_batch(img, "rotation", np.array([[0.2]]))[0])
    assert np.allclose(b.lower, logits, atol=1e-9) and np.allclose(b.upper, logits, atol=1e-9)


def test_errors():
    rng = np.random.default_rng(8)
    relax = build_relaxation(rough_image(rng, 5, 5), "rotation", ParamBox([0.0], [0.01]), N=2)
    with pytest.raises(ShapeError):
        ibp_forward(random_mlp(rng, (1, 9, 9)), relax)
    net = random_mlp(rng, (1, 5, 5), (4,), 3)
    with pytest.raises(InvalidInputError):
        verify(net, relax, 0, "deeppoly")
    with pytest.raises(InvalidInputError):
        crown_backward(net, relax, label=3)


def test_wider_box_gives_wider_bounds():
    rng = np.random.default_rng(9)
    img = smooth_image(rng)
    net = random_mlp(rng, (1, 9, 9), (20,), 4)
    small = verify(net, build_relaxation(img, "rotation", ParamBox([0.0], [math.radians(1)]), N=100), 0, "ibp")
    big = verify(net, build_relaxation(img, "rotation", ParamBox([0.0], [math.radians(5)]), N=100), 0, "ibp")
    assert np.sum(big.upper - big.lower) > np.sum(small.upper - small.lower)
