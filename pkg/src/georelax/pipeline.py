"""Certification pipeline: range splitting, per-cell verification, reports and curves."""
from __future__ import annotations

import csv
import io as _io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import GeoRelaxError, InvalidInputError
from .image import as_pixels, transform_batch
from .network import Network
from .soundify import DEFAULT_CELL_BUDGET, build_relaxation, cell_certificates
from .transforms import ParamBox, as_spec, to_internal
from .verify import verify

WORKERS_ENV = "GEORELAX_WORKERS"
VERIFIERS = ("ibp", "crown-ibp", "crown")


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class CertificationConfig:
    """Certification settings; ``lower``/``upper``/``interval_size`` are in user units.

    Rotation angles are in degrees unless ``radians`` is set; other kinds use
    their native units (pixels for translation, percent for scaling and
    shearing).
    """

    transform: str
    lower: tuple
    upper: tuple
    interval_size: tuple
    P: int = 10
    N: int | None = None
    epsilon: float | None = None
    verifier: str = "crown-ibp"
    per_cell: bool = True
    tolerance: float = 1e-9
    workers: int | None = None
    radians: bool = False
    early_exit: bool = True

    def __post_init__(self):
        spec = as_spec(self.transform)
        object.__setattr__(self, "transform", spec.kind.value)
        for name in ("lower", "upper", "interval_size"):
            v = np.atleast_1d(np.asarray(getattr(self, name), dtype=np.float64))
            if v.shape == (1,) and spec.dim > 1:
                v = np.repeat(v, spec.dim)
            if v.shape != (spec.dim,):
                raise InvalidInputError(f"{name} needs {spec.dim} value(s) for {spec.kind.value}")
            object.__setattr__(self, name, tuple(float(x) for x in v))
        if (self.N is None) == (self.epsilon is None):
            raise InvalidInputError("set exactly one of N and epsilon")
        if self.N is not None and int(self.N) < 1:
            raise InvalidInputError("N must be >= 1")
        if self.epsilon is not None and not self.epsilon > 0:
            raise InvalidInputError("epsilon must be positive")
        if self.P < spec.dim + 1:
            raise InvalidInputError(f"P must be at least {spec.dim + 1}")
        if self.verifier not in VERIFIERS:
            raise InvalidInputError(f"verifier must be one of {VERIFIERS}")
        if any(s <= 0 for s in self.interval_size):
            raise InvalidInputError("interval sizes must be positive")
        if any(lo > hi for lo, hi in zip(self.lower, self.upper)):
            raise InvalidInputError("range lower exceeds upper")

    @property
    def box(self) -> ParamBox:
        return ParamBox(self.lower, self.upper)

    def to_internal_box(self, cell: ParamBox) -> ParamBox:
        lo = to_internal(self.transform, cell.lower, self.radians)
        hi = to_internal(self.transform, cell.upper, self.radians)
        return ParamBox(lo, hi)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("lower", "upper", "interval_size"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CertificationConfig":
        return cls(**d)


def _axis_edges(lo: float, hi: float, size: float) -> list:
    if hi == lo:
        return [lo, hi]
    # tolerate ratios like 20/2 that come out as 10.000000000000002
    count = max(1, math.ceil(round((hi - lo) / size, 9)))
    edges = [lo + k * size for k in range(count)] + [hi]
    return edges


def split_range(box: ParamBox, interval_size) -> list:
    """Contiguous cells of the given size covering ``box``; the last cell per axis may be shorter."""
    sizes = np.atleast_1d(np.asarray(interval_size, dtype=np.float64))
    if sizes.shape == (1,):
        sizes = np.repeat(sizes, box.dim)
    if sizes.shape != (box.dim,):
        raise InvalidInputError(f"need {box.dim} interval sizes, got {sizes.shape[0]}")
    if np.any(~(sizes > 0)):
        raise InvalidInputError("interval sizes must be positive")
    axes = [_axis_edges(float(lo), float(hi), float(s)) for lo, hi, s in zip(box.lower, box.upper, sizes)]
    cells = []
    for idx in np.ndindex(*[len(e) - 1 for e in axes]):
        lo = [axes[k][i] for k, i in enumerate(idx)]
        hi = [axes[k][i + 1] for k, i in enumerate(idx)]
        cells.append(ParamBox(lo, hi))
    return cells


def clean_margin(logits: np.ndarray, label: int) -> float:
    others = np.delete(logits, label)
    return float(logits[label] - others.max())


def certify_image(net: Network, img, label: int, config: CertificationConfig, name: str = "") -> dict:
    """Per-image record; an image misclassified without transformation is never certified."""
    t0 = time.perf_counter()
    px = as_pixels(img)
    if not 0 <= label < net.num_classes:
        raise InvalidInputError(f"label {label} out of range for {net.num_classes} classes")
    logits = net.forward(px)
    pred = int(np.argmax(logits))
    rec = {"name": name, "label": int(label), "predicted": pred, "clean_correct": pred == label,
           "clean_margin": clean_margin(logits, label), "certified": False, "cells": [],
           "min_margin": None, "error": None}
    if not rec["clean_correct"]:
        rec["time_s"] = time.perf_counter() - t0
        return rec
    certified = True
    margins = []
    try:
        for cell in split_range(config.box, config.interval_size):
            relax = build_relaxation(px, config.transform, config.to_internal_box(cell), P=config.P,
                                     N=config.N, epsilon=config.epsilon, per_cell=config.per_cell,
                                     budget=DEFAULT_CELL_BUDGET)
            margin = verify(net, relax, label, config.verifier).margin
            ok = margin > 0
            margins.append(margin)
            rec["cells"].append({"lower": cell.lower.tolist(), "upper": cell.upper.tolist(),
                                 "N": relax.provenance["N"], "margin": margin, "verified": ok})
            if not ok:
                certified = False
                if config.early_exit:
                    break
    except GeoRelaxError as exc:
        certified = False
        rec["error"] = f"{type(exc).__name__}: {exc}"
    rec["certified"] = certified
    rec["min_margin"] = min(margins) if margins else None
    rec["time_s"] = time.perf_counter() - t0
    return rec


def _certify_job(args):
    net, img, label, config, name = args
    return certify_image(net, img, label, config, name)


@dataclass
class CertificationReport:
    config: dict
    records: list
    mode: str
    load_time_s: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return len(self.records)

    @property
    def certified_count(self) -> int:
        return sum(1 for r in self.records if r["certified"])

    @property
    def clean_count(self) -> int:
        return sum(1 for r in self.records if r["clean_correct"])

    @property
    def certified_pct(self) -> float:
        return 100.0 * self.certified_count / self.total

    @property
    def clean_pct(self) -> float:
        return 100.0 * self.clean_count / self.total

    @property
    def mean_time_s(self) -> float:
        return float(np.mean([r["time_s"] for r in self.records]))

    def to_dict(self, timing: bool = True) -> dict:
        recs = self.records if timing else [{k: v for k, v in r.items() if k != "time_s"} for r in self.records]
        out = {"config": self.config, "verifier": self.mode,
               "summary": {"images": self.total, "clean_correct": self.clean_count,
                           "certified": self.certified_count, "clean_accuracy_pct": self.clean_pct,
                           "certified_pct": self.certified_pct},
               "records": recs}
        if timing:
            out["summary"]["mean_time_s_per_image"] = self.mean_time_s
            out["summary"]["network_load_time_s"] = self.load_time_s
        return out

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True)

    def to_text(self) -> str:
        c = self.config
        lines = [
            f"transform      {c['transform']}  range {c['lower']} .. {c['upper']}  size {c['interval_size']}",
            f"verifier       {self.mode}   P={c['P']}  N={c['N']}  epsilon={c['epsilon']}",
            f"images         {self.total}",
            f"clean accuracy {self.clean_pct:7.2f} %",
            f"certified      {self.certified_pct:7.2f} %",
            f"time / image   {self.mean_time_s:9.4f} s",
            "",
            f"{'image':<24} {'label':>5} {'pred':>5} {'clean':>6} {'cert':>6} {'min margin':>12}",
        ]
        for r in self.records:
            mm = "-" if r["min_margin"] is None else f"{r['min_margin']:.6g}"
            lines.append(f"{str(r['name'])[:24]:<24} {r['label']:>5} {r['predicted']:>5} "
                         f"{str(r['clean_correct']):>6} {str(r['certified']):>6} {mm:>12}")
        return "\n".join(lines) + "\n"


def certify_dataset(net: Network, items, config: CertificationConfig) -> CertificationReport:
    """Certify ``items`` (sequence of ``(name, image, label)`` or ``(image, label)``)."""
    items = [it if len(it) == 3 else (str(k), it[0], it[1]) for k, it in enumerate(items)]
    if not items:
        raise InvalidInputError("dataset is empty")
    workers = config.workers or default_workers()
    jobs = [(net, img, label, config, name) for name, img, label in items]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_certify_job, jobs))
    else:
        records = [_certify_job(j) for j in jobs]
    return CertificationReport(config.to_dict(), records, config.verifier)


@dataclass
class CurveData:
    """Plot data for one pixel over a one-parameter box."""

    rows: list
    certificates: list
    delta_low: float
    delta_up: float
    pixel: tuple

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "kappa", "value", "lower", "upper", "residual", "lower_unsound", "upper_unsound", "flag"])
        for r in self.rows:
            w.writerow(["curve", repr(r["kappa"]), repr(r["g"]), repr(r["lower"]), repr(r["upper"]),
                        repr(r["residual"]), repr(r["lower_unsound"]), repr(r["upper_unsound"]), ""])
        for c in self.certificates:
            w.writerow(["certificate", repr(c["kappa"]), repr(c["residual"]), repr(c["certificate"]), "", "", "", "",
                        "min" if c["is_min"] else ""])
        w.writerow(["delta_low", "", repr(self.delta_low), "", "", "", "", "", ""])
        w.writerow(["delta_up", "", repr(self.delta_up), "", "", "", "", "", ""])
        return buf.getvalue()


def emit_curve(img, pixel, spec, box: ParamBox, P: int = 10, N: int = 13, resolution: int = 200,
               per_cell: bool = True) -> CurveData:
    """Transformed value, unsound and sound bounds, and per-cell lower certificates for one pixel.

    ``pixel`` is ``(channel, i, j)`` with 1-based ``i, j``; ``box`` is in internal units.
    """
    spec = as_spec(spec)
    px = as_pixels(img)
    ch, i, j = (int(v) for v in pixel)
    if not (0 <= ch < px.shape[0] and 1 <= i <= px.shape[1] and 1 <= j <= px.shape[2]):
        raise InvalidInputError(f"pixel {pixel} outside image of shape {px.shape}")
    if box.dim != 1:
        raise InvalidInputError("curves are emitted for one-parameter transforms only")
    if resolution < 2:
        raise InvalidInputError("resolution must be >= 2")
    relax = build_relaxation(px, spec, box, P=P, N=N, per_cell=per_cell)
    at = (ch, i - 1, j - 1)
    ks = np.linspace(box.lower[0], box.upper[0], resolution)[:, None]
    g = transform_batch(px, spec, ks)[(slice(None),) + at]
    lu = relax.bounds.lower(ks)[(slice(None),) + at]
    uu = relax.bounds.upper(ks)[(slice(None),) + at]
    dl = float(relax.delta_low[at])
    du = float(relax.delta_up[at])
    rows = [{"kappa": float(k), "g": float(v), "lower": float(a + dl), "upper": float(b + du),
             "residual": float(v - a), "lower_unsound": float(a), "upper_unsound": float(b)}
            for k, v, a, b in zip(ks[:, 0], g, lu, uu)]
    centres, cert = cell_certificates(px, spec, relax.bounds.A_low, relax.bounds.B_low, box, N,
                                      "lower", per_cell)
    c_at = cert[(slice(None),) + at]
    r_mid = transform_batch(px, spec, centres)[(slice(None),) + at] - relax.bounds.lower(centres)[(slice(None),) + at]
    k_min = int(np.argmin(c_at))
    certs = [{"kappa": float(centres[k, 0]), "residual": float(r_mid[k]), "certificate": float(c_at[k]),
              "is_min": k == k_min} for k in range(len(c_at))]
    return CurveData(rows, certs, dl, du, (ch, i, j))
