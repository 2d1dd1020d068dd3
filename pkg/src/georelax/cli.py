"""Command line entry point: ``georelax {bounds,certify,check,curve}``.

Exit codes: 0 success, 1 a soundness check found violations, 2 usage,
configuration or I/O errors.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .errors import GeoRelaxError
from .io import load_dataset, load_relaxation, read_image, save_relaxation
from .network import load_network
from .pipeline import CertificationConfig, certify_dataset, emit_curve
from .soundify import build_relaxation, check_soundness
from .transforms import ParamBox, Kind, to_internal


def _add_transform(p: argparse.ArgumentParser, sizes: bool = False):
    p.add_argument("--transform", required=True, choices=[k.value for k in Kind])
    p.add_argument("--lower", required=True, type=float, nargs="+",
                   help="range lower end (degrees for rotation unless --radians)")
    p.add_argument("--upper", required=True, type=float, nargs="+")
    p.add_argument("--radians", action="store_true", help="rotation range is given in radians")
    p.add_argument("--P", type=int, default=10, help="number of samples for the affine fit")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--N", type=int, help="mesh subdivisions per dimension")
    g.add_argument("--epsilon", type=float, help="target certificate loss used to pick N")
    p.add_argument("--no-per-cell", dest="per_cell", action="store_false",
                   help="use whole-box Lipschitz constants instead of per-cell ones")
    if sizes:
        p.add_argument("--interval-size", type=float, nargs="+", required=True)


def _box(args) -> ParamBox:
    lo = to_internal(args.transform, args.lower, args.radians)
    hi = to_internal(args.transform, args.upper, args.radians)
    return ParamBox(lo, hi)


def _n_or_eps(args):
    if args.N is None and args.epsilon is None:
        return 250, None
    return args.N, args.epsilon


def cmd_bounds(args) -> int:
    img = read_image(args.image)
    N, eps = _n_or_eps(args)
    relax = build_relaxation(img, args.transform, _box(args), P=args.P, N=N, epsilon=eps,
                             per_cell=args.per_cell)
    save_relaxation(args.out, relax)
    lo, hi = relax.concretize()
    print(f"wrote {args.out}: N={relax.provenance['N']} mean pixel gap {float((hi - lo).mean()):.6g}")
    return 0


def cmd_check(args) -> int:
    relax = load_relaxation(args.relaxation)
    img = read_image(args.image)
    rep = check_soundness(relax, img, samples=args.samples, tol=args.tol)
    print(json.dumps(rep.to_dict()))
    return 0 if rep.ok else 1


def cmd_certify(args) -> int:
    t0 = time.perf_counter()
    net = load_network(args.network)
    load_time = time.perf_counter() - t0
    data = load_dataset(args.dataset)
    N, eps = _n_or_eps(args)
    config = CertificationConfig(
        transform=args.transform, lower=tuple(args.lower), upper=tuple(args.upper),
        interval_size=tuple(args.interval_size), P=args.P, N=N, epsilon=eps,
        verifier=args.verifier, per_cell=args.per_cell, workers=args.workers,
        radians=args.radians, early_exit=not args.all_cells)
    report = certify_dataset(net, data, config)
    report.load_time_s = load_time
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(report.to_json(timing=not args.no_timing))
    if args.text:
        Path(args.text).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_curve(args) -> int:
    img = read_image(args.image)
    N = args.N if args.N is not None else 13
    data = emit_curve(img, tuple(args.pixel), args.transform, _box(args), P=args.P, N=N,
                      resolution=args.resolution, per_cell=args.per_cell)
    out = data.to_csv()
    if args.out:
        Path(args.out).write_text(out)
    else:
        sys.stdout.write(out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="georelax", description="Sound linear relaxations of geometric image transforms.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bounds", help="build a relaxation for one image and save it as JSON")
    p.add_argument("--image", required=True)
    _add_transform(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("check", help="dense-sampling soundness check of a saved relaxation")
    p.add_argument("--relaxation", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--samples", type=int, default=100_000)
    p.add_argument("--tol", type=float, default=1e-9)
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("certify", help="certify a dataset against a network")
    p.add_argument("--network", required=True)
    p.add_argument("--dataset", required=True)
    _add_transform(p, sizes=True)
    p.add_argument("--verifier", default="crown-ibp", choices=["ibp", "crown-ibp", "crown"])
    p.add_argument("--workers", type=int, default=None, help="worker processes (default from GEORELAX_WORKERS)")
    p.add_argument("--all-cells", action="store_true", help="verify every cell even after a failure")
    p.add_argument("--out", help="JSON report path")
    p.add_argument("--text", help="text summary path")
    p.add_argument("--no-timing", action="store_true", help="omit timings so reports compare byte for byte")
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("curve", help="emit plot data for one pixel as CSV")
    p.add_argument("--image", required=True)
    p.add_argument("--pixel", type=int, nargs=3, required=True, metavar=("CHANNEL", "I", "J"))
    _add_transform(p)
    p.add_argument("--resolution", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_curve)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (GeoRelaxError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
