"""File formats: PGM and CSV images, channel manifests, datasets and relaxations.

An image path ending in ``.pgm`` is read as PGM (P2 or P5, normalised by
maxval), ``.csv`` as a comma-separated grid of values in [0, 1], and
``.json`` as a channel manifest ``{"channels": ["r.pgm", "g.pgm", ...]}``
with paths relative to the manifest.

A dataset manifest lists images with labels::

    {"images": [{"path": "img0.pgm", "label": 3}, ...]}
"""
from __future__ import annotations

import json
import re
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .image import Image, as_pixels
from .soundify import LinearRelaxation

_TOKEN = re.compile(rb"#[^\n]*|\S+")


def _header_tokens(data: bytes, count: int):
    """First ``count`` header tokens and the offset just after the last one."""
    tokens, pos = [], 0
    for m in _TOKEN.finditer(data):
        if m.group().startswith(b"#"):
            continue
        tokens.append(m.group())
        pos = m.end()
        if len(tokens) == count:
            break
    if len(tokens) < count:
        raise InvalidInputError("truncated PGM header")
    return tokens, pos


def read_pgm(path) -> np.ndarray:
    """Grid of values in [0, 1] from a P2 (ASCII) or P5 (binary) PGM file."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _header_tokens(data, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if not (0 < maxval < 65536) or w < 1 or h < 1:
        raise InvalidInputError(f"bad PGM header in {path}")
    if magic == b"P5":
        dtype = ">u2" if maxval > 255 else "u1"
        raw = np.frombuffer(data, dtype=dtype, count=w * h, offset=pos + 1)
    elif magic == b"P2":
        body = re.sub(rb"#[^\n]*", b"", data[pos:]).split()
        if len(body) < w * h:
            raise InvalidInputError(f"PGM {path} has {len(body)} values, expected {w * h}")
        raw = np.array([int(v) for v in body[: w * h]])
    else:
        raise InvalidInputError(f"{path} is not a P2/P5 PGM file")
    if raw.max(initial=0) > maxval:
        raise InvalidInputError(f"PGM {path} has values above maxval")
    return raw.reshape(h, w).astype(np.float64) / maxval


def write_pgm(path, grid, maxval: int = 255, binary: bool = True) -> None:
    g = np.asarray(grid, dtype=np.float64)
    if g.ndim != 2:
        raise InvalidInputError("PGM holds a single 2-d channel")
    q = np.rint(np.clip(g, 0.0, 1.0) * maxval).astype(np.int64)
    h, w = g.shape
    header = f"{'P5' if binary else 'P2'}\n{w} {h}\n{maxval}\n".encode()
    if binary:
        body = q.astype(">u2" if maxval > 255 else "u1").tobytes()
    else:
        body = "\n".join(" ".join(str(v) for v in row) for row in q).encode() + b"\n"
    Path(path).write_bytes(header + body)


def read_csv_grid(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)


def write_csv_grid(path, grid) -> None:
    np.savetxt(path, np.asarray(grid, dtype=np.float64), delimiter=",", fmt="%.17g")


def _read_channel(path: Path) -> np.ndarray:
    ext = path.suffix.lower()
    if ext == ".pgm":
        return read_pgm(path)
    if ext == ".csv":
        return read_csv_grid(path)
    raise InvalidInputError(f"unsupported image format {ext!r} for {path}")


def read_image(path) -> Image:
    path = Path(path)
    if path.suffix.lower() == ".json":
        doc = json.loads(path.read_text())
        if "channels" not in doc or not doc["channels"]:
            raise InvalidInputError(f"channel manifest {path} lists no channels")
        grids = [_read_channel(path.parent / p) for p in doc["channels"]]
        if len({g.shape for g in grids}) != 1:
            raise InvalidInputError(f"channels in {path} differ in shape")
        return Image(np.stack(grids))
    return Image(_read_channel(path))


def write_image(path, img) -> None:
    """Write a single-channel image as PGM or CSV, chosen by extension."""
    px = as_pixels(img)
    if px.shape[0] != 1:
        raise InvalidInputError("write_image handles one channel; write a manifest for more")
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        write_pgm(path, px[0])
    else:
        write_csv_grid(path, px[0])


def load_dataset(path):
    """List of ``(name, image, label)`` from a dataset manifest."""
    path = Path(path)
    doc = json.loads(path.read_text())
    entries = doc.get("images")
    if not entries:
        raise InvalidInputError(f"dataset {path} lists no images")
    out = []
    for e in entries:
        out.append((e.get("name", e["path"]), read_image(path.parent / e["path"]), int(e["label"])))
    return out


def save_relaxation(path, relax: LinearRelaxation) -> None:
    Path(path).write_text(json.dumps(relax.to_dict()))


def load_relaxation(path) -> LinearRelaxation:
    return LinearRelaxation.from_dict(json.loads(Path(path).read_text()))
