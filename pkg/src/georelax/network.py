"""Feedforward ReLU networks: layers, shape inference and the JSON manifest.

Manifest layout::

    {
      "input_shape": [c, n, m],
      "weights_file": "net.bin",            # optional sidecar, relative to the manifest
      "layers": [
        {"type": "conv2d", "weight": W, "bias": b, "stride": 2, "padding": 1},
        {"type": "batchnorm", "mean": ..., "var": ..., "gamma": ..., "beta": ..., "eps": 1e-5},
        {"type": "relu"},
        {"type": "flatten"},
        {"type": "dense", "weight": W, "bias": b}
      ]
    }

Every array field is either a nested list or a reference
``{"offset": bytes, "length": count, "shape": [...]}`` into the sidecar file,
which holds little-endian float64 values.  Dense weights have shape
``(out, in)``, conv weights ``(out_channels, in_channels, kh, kw)``.  A dense
layer applied to a multi-dimensional input flattens it in row-major
``(channel, row, column)`` order.  Batch-norm layers are folded into the
preceding dense or conv layer at load time.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ShapeError
from .image import Image


@dataclass(frozen=True, eq=False)
class Dense:
    weight: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weight", np.asarray(self.weight, dtype=np.float64))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))

    def out_shape(self, in_shape):
        if int(np.prod(in_shape)) != self.weight.shape[1]:
            raise ShapeError(f"dense layer expects {self.weight.shape[1]} inputs, got shape {tuple(in_shape)}")
        return (self.weight.shape[0],)

    def forward(self, x):
        return x.reshape(x.shape[0], -1) @ self.weight.T + self.bias

    def linear(self, x, absolute: bool = False):
        W = np.abs(self.weight) if absolute else self.weight
        return x.reshape(x.shape[0], -1) @ W.T

    def transpose(self, g, in_shape):
        """Adjoint of the linear part: ``(K, out) -> (K, *in_shape)``."""
        return (g @ self.weight).reshape((g.shape[0],) + tuple(in_shape))

    def bias_term(self, g):
        return g @ self.bias


@dataclass(frozen=True, eq=False)
class Conv2D:
    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weight", np.asarray(self.weight, dtype=np.float64))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=np.float64))

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.weight.shape[1]:
            raise ShapeError(f"conv expects ({self.weight.shape[1]}, h, w) input, got {tuple(in_shape)}")
        _, h, w = in_shape
        kh, kw = self.weight.shape[2:]
        ho = (h + 2 * self.padding - kh) // self.stride + 1
        wo = (w + 2 * self.padding - kw) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv kernel {kh}x{kw} too large for input {h}x{w}")
        return (self.weight.shape[0], ho, wo)

    def _geometry(self, in_shape):
        _, ho, wo = self.out_shape(in_shape)
        return ho, wo, self.stride

    def linear(self, x, absolute: bool = False):
        W = np.abs(self.weight) if absolute else self.weight
        p = self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        ho, wo, s = self._geometry(x.shape[1:])
        out = np.zeros((x.shape[0], W.shape[0], ho, wo))
        for a in range(W.shape[2]):
            for b in range(W.shape[3]):
                patch = xp[:, :, a:a + s * ho:s, b:b + s * wo:s]
                out += np.einsum("oi,bihw->bohw", W[:, :, a, b], patch)
        return out

    def forward(self, x):
        return self.linear(x) + self.bias[None, :, None, None]

    def transpose(self, g, in_shape):
        """Adjoint of the linear part: ``(K, co, ho, wo) -> (K, *in_shape)``."""
        c, h, w = in_shape
        p = self.padding
        ho, wo, s = self._geometry(in_shape)
        g = g.reshape((g.shape[0], self.weight.shape[0], ho, wo))
        xp = np.zeros((g.shape[0], c, h + 2 * p, w + 2 * p))
        for a in range(self.weight.shape[2]):
            for b in range(self.weight.shape[3]):
                xp[:, :, a:a + s * ho:s, b:b + s * wo:s] += np.einsum("oi,bohw->bihw", self.weight[:, :, a, b], g)
        return xp[:, :, p:p + h, p:p + w]

    def bias_term(self, g):
        g = g.reshape(g.shape[0], self.weight.shape[0], -1)
        return np.einsum("koh,o->k", g, self.bias)


@dataclass(frozen=True)
class ReLU:
    def out_shape(self, in_shape):
        return tuple(in_shape)

    def forward(self, x):
        return np.maximum(x, 0.0)


@dataclass(frozen=True)
class Flatten:
    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x):
        return x.reshape(x.shape[0], -1)


AFFINE = (Dense, Conv2D)


@dataclass(frozen=True, eq=False)
class Network:
    """Immutable layer stack with shapes checked end to end."""

    layers: tuple
    input_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        shapes = [self.input_shape]
        for layer in self.layers:
            shapes.append(tuple(layer.out_shape(shapes[-1])))
        if len(shapes[-1]) != 1:
            raise ShapeError(f"network output must be a vector, got shape {shapes[-1]}")
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def num_classes(self) -> int:
        return self.shapes[-1][0]

    def forward(self, x) -> np.ndarray:
        """Logits for one input of ``input_shape`` or a batch ``(B, *input_shape)``."""
        x = np.asarray(x, dtype=np.float64)
        single = x.shape == self.input_shape
        if single:
            x = x[None]
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"input shape {x.shape[1:]} does not match network {self.input_shape}")
        for layer in self.layers:
            x = layer.forward(x)
        return x[0] if single else x


def forward(net: Network, image) -> np.ndarray:
    """Logits of ``image`` (an :class:`Image` or array); a 2-d grid is read as one channel."""
    x = image.pixels if isinstance(image, Image) else np.asarray(image, dtype=np.float64)
    if x.ndim == 2 and len(net.input_shape) == 3:
        x = x[None]
    return net.forward(x)


def _fold_batchnorm(layer, spec: dict):
    if not isinstance(layer, AFFINE):
        raise InvalidInputError("batchnorm must directly follow a dense or conv2d layer")
    eps = float(spec.get("eps", 1e-5))
    scale = np.asarray(spec["gamma"], float) / np.sqrt(np.asarray(spec["var"], float) + eps)
    shift = np.asarray(spec["beta"], float) - np.asarray(spec["mean"], float) * scale
    if scale.shape != layer.bias.shape:
        raise ShapeError(f"batchnorm size {scale.shape} does not match layer outputs {layer.bias.shape}")
    w = layer.weight * scale.reshape((-1,) + (1,) * (layer.weight.ndim - 1))
    b = layer.bias * scale + shift
    if isinstance(layer, Dense):
        return Dense(w, b)
    return Conv2D(w, b, layer.stride, layer.padding)


def _array(value, blob):
    if isinstance(value, dict):
        if blob is None:
            raise InvalidInputError("array reference given but the manifest has no weights_file")
        off, length = int(value["offset"]), int(value["length"])
        if off % 8 or off < 0 or off + 8 * length > len(blob):
            raise InvalidInputError(f"array reference out of range: offset={off} length={length}")
        a = np.frombuffer(blob, dtype="<f8", count=length, offset=off).astype(np.float64)
        return a.reshape(value["shape"]) if "shape" in value else a
    return np.asarray(value, dtype=np.float64)


def network_from_dict(doc: dict, blob: bytes | None = None) -> Network:
    if "input_shape" not in doc or "layers" not in doc:
        raise InvalidInputError("manifest needs input_shape and layers")
    layers = []
    for spec in doc["layers"]:
        kind = str(spec.get("type", "")).lower()
        if kind == "dense":
            w, b = _array(spec["weight"], blob), _array(spec["bias"], blob)
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"dense weight {w.shape} and bias {b.shape} are inconsistent")
            layers.append(Dense(w, b))
        elif kind == "conv2d":
            w, b = _array(spec["weight"], blob), _array(spec["bias"], blob)
            if w.ndim != 4 or b.shape != (w.shape[0],):
                raise ShapeError(f"conv weight {w.shape} and bias {b.shape} are inconsistent")
            layers.append(Conv2D(w, b, int(spec.get("stride", 1)), int(spec.get("padding", 0))))
        elif kind == "batchnorm":
            if not layers:
                raise InvalidInputError("batchnorm cannot be the first layer")
            arrays = {k: _array(spec[k], blob) for k in ("mean", "var", "gamma", "beta")}
            layers[-1] = _fold_batchnorm(layers[-1], {**spec, **arrays})
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "flatten":
            layers.append(Flatten())
        else:
            raise InvalidInputError(f"unknown layer type {spec.get('type')!r}")
    return Network(tuple(layers), tuple(doc["input_shape"]))


def load_network(manifest) -> Network:
    """Load from a manifest path or an already-parsed dict."""
    if isinstance(manifest, dict):
        return network_from_dict(manifest)
    path = Path(manifest)
    doc = json.loads(path.read_text())
    blob = None
    if doc.get("weights_file"):
        blob = (path.parent / doc["weights_file"]).read_bytes()
    return network_from_dict(doc, blob)


def network_to_dict(net: Network) -> dict:
    out = []
    for layer in net.layers:
        if isinstance(layer, Dense):
            out.append({"type": "dense", "weight": layer.weight.tolist(), "bias": layer.bias.tolist()})
        elif isinstance(layer, Conv2D):
            out.append({"type": "conv2d", "weight": layer.weight.tolist(), "bias": layer.bias.tolist(),
                        "stride": layer.stride, "padding": layer.padding})
        elif isinstance(layer, ReLU):
            out.append({"type": "relu"})
        else:
            out.append({"type": "flatten"})
    return {"input_shape": list(net.input_shape), "layers": out}


def save_network(net: Network, path, sidecar: bool = False) -> None:
    """Write a manifest; with ``sidecar`` the arrays go to ``<stem>.bin`` next to it."""
    path = Path(path)
    doc = network_to_dict(net)
    if sidecar:
        chunks, offset = [], 0
        for spec, layer in zip(doc["layers"], net.layers):
            for key in ("weight", "bias"):
                if key in spec:
                    a = np.ascontiguousarray(getattr(layer, key), dtype="<f8")
                    spec[key] = {"offset": offset, "length": int(a.size), "shape": list(a.shape)}
                    chunks.append(a.tobytes())
                    offset += a.nbytes
        doc["weights_file"] = path.stem + ".bin"
        (path.parent / doc["weights_file"]).write_bytes(b"".join(chunks))
    path.write_text(json.dumps(doc))
