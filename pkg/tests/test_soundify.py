import json
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from georelax.errors import InvalidInputError, ResourceError
from georelax.image import Image, transform_batch
from georelax.lipschitz import residual_lipschitz
from georelax.soundify import (LinearRelaxation, build_relaxation, cell_certificates, check_soundness,
                               choose_subdivisions, correction_1d, correction_multid)
from georelax.transforms import ParamBox
from georelax.unsound import SampleSet, affine_eval, lower_bound_1d

from _support import rough_image, smooth_image


def test_choose_subdivisions_examples():
    assert choose_subdivisions(10, 1, 0.01) == 500
    assert choose_subdivisions(0, 1, 0.01) == 1
    assert choose_subdivisions(29.0, math.radians(1.0), 0.001) == 254
    for bad in [(1, 1, 0), (1, 0, 0.1), (1, -1, 0.1), (-1, 1, 0.1)]:
        with pytest.raises(InvalidInputError):
            choose_subdivisions(*bad)


@settings(max_examples=300)
@given(L=st.floats(0, 1e3), w=st.floats(1e-6, 10), eps=st.floats(1e-6, 1))
def test_choose_subdivisions_is_exact_ceiling(L, w, eps):
    N = choose_subdivisions(L, w, eps)
    q = Fraction(L) * Fraction(w) / (2 * Fraction(eps))
    assert N >= q and N >= 1 and (N == 1 or N - 1 < q)


def _lower_fit(img, kind, box, P=10):
    s = SampleSet.from_box(img, kind, box, P)
    return lower_bound_1d(s)


def test_zero_residual_zero_delta():
    img = Image(np.zeros((5, 5)))
    A, B = np.zeros((1, 1, 5, 5)), np.zeros((1, 5, 5))
    assert np.all(correction_1d(img, "rotation", A, B, ParamBox([0.0], [0.3]), 10) == 0)
    assert np.all(correction_multid(img, "translation", np.zeros((2, 1, 5, 5)), B, ParamBox([-1, -1], [1, 1]), 7) == 0)


def test_zero_width_box_zero_delta():
    img = rough_image(np.random.default_rng(0), 5, 5)
    box = ParamBox.point([0.2])
    g = transform_batch(img, "rotation", box.lower[None])[0]
    A = np.full((1, 1, 5, 5), 0.3)
    B = g - 0.3 * 0.2
    assert np.allclose(correction_1d(img, "rotation", A, B, box, 5), 0, atol=1e-15)


def test_rotation_three_degrees_centre_pixel():
    img = rough_image(np.random.default_rng(1), 9, 9)
    box = ParamBox([math.radians(-3)], [math.radians(3)])
    A, B = _lower_fit(img, "rotation", box)
    t = np.linspace(box.lower[0], box.upper[0], 10**6)[:, None]
    at = (slice(None), 0, 4, 4)
    true_min = (transform_batch(img, "rotation", t)[at] - affine_eval(t, A, B)[at]).min()
    L = residual_lipschitz(img, "rotation", A, box, 0).values[0, 4, 4]
    prev = -np.inf
    for N in (10, 100, 1000):
        delta = correction_1d(img, "rotation", A, B, box, N)[0, 4, 4]
        assert delta <= true_min + 1e-12
        assert true_min - delta <= L * box.width[0] / N
        assert delta >= prev - 1e-15
        prev = delta


def test_multid_single_cell_formula():
    img = smooth_image(np.random.default_rng(2), 7, 7)
    box = ParamBox([-0.3, 0.1], [0.2, 0.5])
    A = np.zeros((2, 1, 7, 7))
    B = np.zeros((1, 7, 7))
    c = box.center
    r = transform_batch(img, "translation", c[None])[0]
    L = [residual_lipschitz(img, "translation", A, box, k).values for k in range(2)]
    ref = r - L[0] * box.width[0] / 2 - L[1] * box.width[1] / 2
    got = correction_multid(img, "translation", A, B, box, 1, per_cell=False)
    assert np.allclose(got, np.minimum(ref, 0), atol=1e-15)


def test_multid_translation_dense_grid():
    img = rough_image(np.random.default_rng(3), 7, 7)
    box = ParamBox([-1, -1], [1, 1])
    relax = build_relaxation(img, "translation", box, P=9, N=50)
    d = correction_multid(img, "translation", relax.bounds.A_low, relax.bounds.B_low, box, 50)
    a = np.linspace(-1, 1, 1000)
    pts = np.stack(np.meshgrid(a, a, indexing="ij"), -1).reshape(-1, 2)
    true_min = np.full((1, 7, 7), np.inf)
    for s in range(0, len(pts), 50000):
        p = pts[s:s + 50000]
        r = transform_batch(img, "translation", p) - relax.bounds.lower(p)
        true_min = np.minimum(true_min, r.min(axis=0))
    L = sum(residual_lipschitz(img, "translation", relax.bounds.A_low, box, k).values * box.width[k] for k in range(2))
    assert np.all(d <= true_min + 1e-12)
    assert np.all(true_min - d <= L / 50 + 1e-12)


def test_budget_exceeded():
    img = Image(np.zeros((3, 3)))
    with pytest.raises(ResourceError):
        correction_multid(img, "translation", np.zeros((2, 1, 3, 3)), np.zeros((1, 3, 3)),
                          ParamBox([0, 0], [1, 1]), 1001, budget=10**6)


def test_build_zero_width_box_is_exact():
    img = rough_image(np.random.default_rng(4), 6, 6)
    box = ParamBox.point([0.37])
    relax = build_relaxation(img, "rotation", box, P=10, N=10)
    g = transform_batch(img, "rotation", box.lower[None])[0]
    lo, hi = relax.concretize()
    assert np.allclose(lo, g, atol=1e-12) and np.allclose(hi, g, atol=1e-12)


def test_build_partially_degenerate_translation():
    img = rough_image(np.random.default_rng(5), 7, 7)
    relax = build_relaxation(img, "translation", ParamBox([0.3, -0.5], [0.3, 0.5]), P=6, N=40)
    assert np.all(relax.bounds.A_low[0] == 0)
    assert check_soundness(relax, img, samples=20000).ok


def test_build_one_degree_rotation_cell():
    img = rough_image(np.random.default_rng(6), 9, 9)
    box = ParamBox([math.radians(12)], [math.radians(13)])
    relax = build_relaxation(img, "rotation", box, P=10, N=250)
    rep = check_soundness(relax, img, samples=10**5)
    assert rep.ok and rep.samples == 10**5


def test_build_translation_grid_cells():
    img = rough_image(np.random.default_rng(7), 7, 7)
    edges = np.linspace(-1, 1, 11)
    for a in range(10):
        for b in range(10):
            box = ParamBox([edges[a], edges[b]], [edges[a + 1], edges[b + 1]])
            relax = build_relaxation(img, "translation", box, P=9, N=10)
            assert check_soundness(relax, img, samples=2000).ok


def test_checker_detects_missing_correction():
    img = rough_image(np.random.default_rng(8), 9, 9)
    box = ParamBox([0.0], [math.radians(8)])
    relax = build_relaxation(img, "rotation", box, P=3, N=50)
    unsafe = LinearRelaxation(relax.bounds, np.zeros_like(relax.delta_low), np.zeros_like(relax.delta_up),
                              relax.box, relax.spec)
    rep = check_soundness(unsafe, img, samples=20000)
    assert not rep.ok and rep.worst > 1e-9
    assert check_soundness(relax, img, samples=20000).ok


def test_identity_box_passes():
    img = rough_image(np.random.default_rng(9), 5, 5)
    relax = build_relaxation(img, "shearing", ParamBox.point([0.0]), N=1)
    assert check_soundness(relax, img, samples=10).ok


def test_zero_slopes_give_interval_bounds():
    img = rough_image(np.random.default_rng(10), 9, 9)
    box = ParamBox([-0.1], [0.15])
    relax = build_relaxation(img, "rotation", box, P=10, N=200, zero_slopes=True)
    assert np.all(relax.bounds.A_low == 0) and np.all(relax.bounds.A_up == 0)
    g = transform_batch(img, "rotation", np.linspace(-0.1, 0.15, 20001)[:, None])
    lo, hi = relax.concretize()
    assert np.all(lo <= g.min(axis=0) + 1e-12) and np.all(hi >= g.max(axis=0) - 1e-12)


def test_epsilon_mode_and_exclusive_arguments():
    img = smooth_image(np.random.default_rng(11))
    box = ParamBox([0.0], [0.02])
    relax = build_relaxation(img, "rotation", box, epsilon=1e-3)
    assert relax.provenance["N"] >= 1 and relax.provenance["epsilon"] == 1e-3
    with pytest.raises(InvalidInputError):
        build_relaxation(img, "rotation", box)
    with pytest.raises(InvalidInputError):
        build_relaxation(img, "rotation", box, N=3, epsilon=0.1)


def test_epsilon_bounds_certificate_loss():
    img = rough_image(np.random.default_rng(12), 7, 7)
    box = ParamBox([0.1], [0.3])
    eps = 2e-3
    relax = build_relaxation(img, "rotation", box, epsilon=eps, per_cell=False)
    A, B = relax.bounds.A_low, relax.bounds.B_low
    t = np.linspace(0.1, 0.3, 200001)[:, None]
    true_min = (transform_batch(img, "rotation", t) - affine_eval(t, A, B)).min(axis=0)
    assert np.all(true_min - relax.delta_low <= 2 * eps + 1e-12)


def test_serialization_round_trip():
    img = rough_image(np.random.default_rng(13), 4, 5)
    relax = build_relaxation(img, "translation", ParamBox([-0.2, 0.0], [0.1, 0.4]), P=5, N=6)
    back = LinearRelaxation.from_dict(json.loads(json.dumps(relax.to_dict())))
    p = np.array([[0.0, 0.2], [-0.1, 0.3]])
    assert np.array_equal(back.lower(p), relax.lower(p)) and np.array_equal(back.upper(p), relax.upper(p))
    assert back.provenance == relax.provenance


def test_cell_certificates_shape():
    img = rough_image(np.random.default_rng(14), 5, 5)
    A, B = np.zeros((1, 1, 5, 5)), np.zeros((1, 5, 5))
    c, v = cell_certificates(img, "rotation", A, B, ParamBox([0.0], [1.3]), 13)
    assert c.shape == (13, 1) and v.shape == (13, 1, 5, 5)
    assert np.allclose(np.diff(c[:, 0]), 0.1)


def _volume(relaxes):
    total = 0.0
    for r in relaxes:
        c = r.box.center
        gap = r.upper(c[None])[0] - r.lower(c[None])[0]
        total += float(np.prod(r.box.width) * gap.sum())
    return total


@pytest.mark.parametrize("seed", range(4))
def test_splitting_beats_refining(seed):
    img = smooth_image(np.random.default_rng(seed))
    lo, hi, k, N = math.radians(-4), math.radians(4), 4, 20
    whole = build_relaxation(img, "rotation", ParamBox([lo], [hi]), P=10, N=k * N)
    edges = np.linspace(lo, hi, k + 1)
    parts = [build_relaxation(img, "rotation", ParamBox([a], [b]), P=10, N=N) for a, b in zip(edges[:-1], edges[1:])]
    assert _volume(parts) <= _volume([whole])


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), kind=st.sampled_from(["rotation", "translation", "scaling", "shearing"]))
def test_soundness_property(seed, kind):
    from _support import internal_box

    rng = np.random.default_rng(seed)
    img = rough_image(rng, int(rng.integers(3, 8)), int(rng.integers(3, 8)))
    box = internal_box(kind, rng)
    relax = build_relaxation(img, kind, box, P=int(rng.integers(box.dim + 1, 12)), N=int(rng.integers(1, 30)))
    assert np.all(relax.delta_low <= 0) and np.all(relax.delta_up >= 0)
    assert check_soundness(relax, img, samples=5000).ok
