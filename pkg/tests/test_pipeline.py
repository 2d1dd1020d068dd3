import csv
import io
import json
import math

import numpy as np
import pytest

from georelax.errors import InvalidInputError
from georelax.image import Image, transform_batch
from georelax.network import Dense, Flatten, Network, forward
from georelax.pipeline import (CertificationConfig, certify_dataset, certify_image, clean_margin, emit_curve,
                               split_range)
from georelax.transforms import ParamBox

from _support import random_mlp, rough_image, smooth_image


def test_split_range_examples():
    cells = split_range(ParamBox([-10], [10]), 2)
    assert len(cells) == 10
    assert (cells[0].lower[0], cells[0].upper[0]) == (-10, -8)
    assert (cells[-1].lower[0], cells[-1].upper[0]) == (8, 10)
    assert len(split_range(ParamBox([0], [1]), 1)) == 1
    short = split_range(ParamBox([0], [1]), 0.4)
    assert len(short) == 3 and short[-1].upper[0] == 1 and short[-1].width[0] == pytest.approx(0.2)
    grid = split_range(ParamBox([-1, -1], [1, 1]), 0.2)
    assert len(grid) == 100
    assert sum(float(np.prod(c.width)) for c in grid) == pytest.approx(4.0)
    assert len(split_range(ParamBox([0.5], [0.5]), 1)) == 1
    with pytest.raises(InvalidInputError):
        split_range(ParamBox([0], [1]), 0)


def test_split_cells_are_contiguous():
    cells = split_range(ParamBox([-3.0], [7.0]), 0.7)
    for a, b in zip(cells[:-1], cells[1:]):
        assert a.upper[0] == b.lower[0]
    assert cells[0].lower[0] == -3.0 and cells[-1].upper[0] == 7.0


def test_config_validation():
    with pytest.raises(InvalidInputError):
        CertificationConfig("rotation", [-1], [1], [1])
    with pytest.raises(InvalidInputError):
        CertificationConfig("rotation", [-1], [1], [1], N=3, epsilon=0.1)
    with pytest.raises(InvalidInputError):
        CertificationConfig("rotation", [1], [-1], [1], N=3)
    with pytest.raises(InvalidInputError):
        CertificationConfig("rotation", [-1], [1], [1], N=3, verifier="exact")
    cfg = CertificationConfig("translation", [-1], [1], [0.2], N=3)
    assert cfg.lower == (-1.0, -1.0) and cfg.interval_size == (0.2, 0.2)
    assert CertificationConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    assert cfg.to_internal_box(ParamBox([0, 0], [1, 1])).upper.tolist() == [1, 1]
    rot = CertificationConfig("rotation", [-180], [180], [360], N=3)
    assert rot.to_internal_box(rot.box).upper[0] == pytest.approx(math.pi)


def _linear_net(rng, classes=3):
    return Network([Flatten(), Dense(rng.normal(size=(classes, 81)) / 9, rng.normal(size=classes) * 0.1)], (1, 9, 9))


def test_zero_width_range_reduces_to_clean_classification():
    rng = np.random.default_rng(0)
    net = _linear_net(rng)
    cfg = CertificationConfig("rotation", [0], [0], [1], N=1)
    for k in range(10):
        img = smooth_image(rng)
        logits = forward(net, img)
        label = int(np.argmax(logits))
        rec = certify_image(net, img, label, cfg)
        assert rec["certified"] == (clean_margin(logits, label) > 0)
        assert rec["min_margin"] == pytest.approx(clean_margin(logits, label), abs=1e-9)
        wrong = (label + 1) % 3
        assert not certify_image(net, img, wrong, cfg)["certified"]


def test_misclassified_image_is_skipped():
    rng = np.random.default_rng(1)
    net = _linear_net(rng)
    img = smooth_image(rng)
    wrong = int(np.argmin(forward(net, img)))
    rec = certify_image(net, img, wrong, CertificationConfig("rotation", [-2], [2], [1], N=10))
    assert not rec["clean_correct"] and not rec["certified"] and rec["cells"] == []


def test_report_counts_and_ordering():
    rng = np.random.default_rng(2)
    net = random_mlp(rng, (1, 9, 9), (10,), 3)
    items = []
    for k in range(8):
        img = smooth_image(rng)
        items.append((f"im{k}", img, int(rng.integers(3)) if k % 3 == 0 else int(np.argmax(forward(net, img)))))
    cfg = CertificationConfig("rotation", [-4], [4], [2], N=20, early_exit=False)
    rep = certify_dataset(net, items, cfg)
    assert rep.certified_pct <= rep.clean_pct
    assert rep.certified_count == sum(r["certified"] for r in rep.records)
    for r in rep.records:
        if r["certified"]:
            assert r["clean_correct"] and len(r["cells"]) == 4 and all(c["verified"] for c in r["cells"])
            assert r["min_margin"] > 0
    d = json.loads(rep.to_json())
    assert d["summary"]["images"] == 8 and "mean_time_s_per_image" in d["summary"]
    assert "time_s" not in json.loads(rep.to_json(timing=False))["records"][0]
    assert "certified" in rep.to_text()
    again = certify_dataset(net, items, cfg)
    assert again.to_json(timing=False) == rep.to_json(timing=False)


def test_parallel_matches_serial(monkeypatch):
    rng = np.random.default_rng(3)
    net = random_mlp(rng, (1, 9, 9), (8,), 3)
    items = [(f"i{k}", smooth_image(rng), k % 3) for k in range(4)]
    cfg = CertificationConfig("scaling", [-5], [5], [5], N=10)
    serial = certify_dataset(net, items, cfg)
    par = certify_dataset(net, items, CertificationConfig.from_dict({**cfg.to_dict(), "workers": 2}))
    assert [r["certified"] for r in par.records] == [r["certified"] for r in serial.records]
    assert [r["min_margin"] for r in par.records] == [r["min_margin"] for r in serial.records]


def test_errors_are_recorded_not_raised():
    rng = np.random.default_rng(4)
    net = _linear_net(rng)
    img = smooth_image(rng)
    label = int(np.argmax(forward(net, img)))
    rec = certify_image(net, img, label, CertificationConfig("scaling", [-150], [-50], [100], N=2))
    assert not rec["certified"] and rec["error"].startswith("SingularityError")


def test_emit_curve_thirteen_cells():
    img = rough_image(np.random.default_rng(5), 9, 9)
    box = ParamBox([math.radians(-15)], [math.radians(15)])
    data = emit_curve(img, (0, 3, 6), "rotation", box, P=10, N=13, resolution=101)
    assert len(data.certificates) == 13 and sum(c["is_min"] for c in data.certificates) == 1
    lowest = min(c["certificate"] for c in data.certificates)
    assert data.delta_low == pytest.approx(min(lowest, 0.0), abs=1e-15)
    g = transform_batch(img, "rotation", np.array([[r["kappa"]] for r in data.rows]))[:, 0, 2, 5]
    assert np.array_equal([r["g"] for r in data.rows], g)
    assert all(r["lower"] <= r["g"] + 1e-12 and r["g"] <= r["upper"] + 1e-12 for r in data.rows)
    for c in data.certificates:
        assert c["certificate"] <= c["residual"]
    rows = list(csv.DictReader(io.StringIO(data.to_csv())))
    assert sum(r["kind"] == "certificate" for r in rows) == 13
    assert sum(r["flag"] == "min" for r in rows) == 1


def test_emit_curve_constant_image():
    data = emit_curve(Image(np.full((9, 9), 0.5)), (0, 5, 5), "rotation", ParamBox([-0.1], [0.1]), N=13)
    assert data.delta_low == 0 and data.delta_up == 0


def test_emit_curve_rejects_bad_input():
    img = Image(np.zeros((4, 4)))
    with pytest.raises(InvalidInputError):
        emit_curve(img, (0, 5, 1), "rotation", ParamBox([0.0], [0.1]))
    with pytest.raises(InvalidInputError):
        emit_curve(img, (0, 1, 1), "translation", ParamBox([0.0, 0.0], [0.1, 0.1]))
