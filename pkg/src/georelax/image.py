"""Channel-separated images, bilinear interpolation and transformed pixels."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .transforms import as_spec, inverse_coords, inverse_map

# Upper bound on gathered elements per chunk in the batched kernels.
_CHUNK_ELEMS = 1 << 21


@dataclass(frozen=True, eq=False)
class Image:
    """Pixel grid of shape ``(channels, n, m)`` with values in ``[0, 1]``.

    A 2-d array is promoted to a single channel.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.array(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3 or min(px.shape) < 1:
            raise InvalidInputError(f"image must have shape (c, n, m) with n, m >= 1, got {px.shape}")
        if not np.all(np.isfinite(px)):
            raise InvalidInputError("image contains non-finite pixels")
        if px.min() < 0.0 or px.max() > 1.0:
            raise InvalidInputError("pixel values must lie in [0, 1]")
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def channels(self) -> int:
        return self.pixels.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[1], self.pixels.shape[2]

    @property
    def n(self) -> int:
        return self.pixels.shape[1]

    @property
    def m(self) -> int:
        return self.pixels.shape[2]

    def __getitem__(self, idx):
        return self.pixels[idx]


def as_pixels(img) -> np.ndarray:
    """Pixel array of an :class:`Image`, or a raw ``(c, n, m)`` array unchecked."""
    if isinstance(img, Image):
        return img.pixels
    px = np.asarray(img, dtype=np.float64)
    return px[None] if px.ndim == 2 else px


def padded(pixels: np.ndarray) -> np.ndarray:
    """Zero border of width one: index ``k`` of the result is pixel ``k`` (1-based)."""
    return np.pad(pixels, ((0, 0), (1, 1), (1, 1)))


try:
    import numba
except ImportError:  # pragma: no cover
    numba = None


def _interp_numpy(pixels: np.ndarray, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """Reference gather; ``X``/``Y`` are 2-d ``(R, H)``, result ``(R, c, H)``."""
    c, n, m = pixels.shape
    w = m + 4
    # two-wide zero border: clipped indices in [-1, n+1] always read zeros
    P = np.pad(pixels, ((0, 0), (2, 2), (2, 2))).reshape(c, -1)
    kx = np.floor(X)
    ly = np.floor(Y)
    fx = X - kx
    fy = Y - ly
    np.clip(kx, -1, n + 1, out=kx)
    np.clip(ly, -1, m + 1, out=ly)
    base = ((kx + 1) * w + (ly + 1)).astype(np.intp)
    a = P[:, base]
    b = P[:, base + w]
    top = a + fx * (b - a)
    a = P[:, base + 1]
    b = P[:, base + w + 1]
    bot = a + fx * (b - a)
    return np.moveaxis(top + fy * (bot - top), 0, 1)


if numba is not None:
    @numba.njit(cache=True)
    def _interp_kernel(P, X, Y, out):  # pragma: no cover - compiled
        c = P.shape[0]
        n = P.shape[1] - 4
        m = P.shape[2] - 4
        R, H = X.shape
        for r in range(R):
            for h in range(H):
                x = X[r, h]
                y = Y[r, h]
                kx = np.floor(x)
                ly = np.floor(y)
                fx = x - kx
                fy = y - ly
                k = int(min(max(kx, -1.0), n + 1.0)) + 1
                l = int(min(max(ly, -1.0), m + 1.0)) + 1
                for ch in range(c):
                    a = P[ch, k, l]
                    top = a + fx * (P[ch, k + 1, l] - a)
                    a = P[ch, k, l + 1]
                    bot = a + fx * (P[ch, k + 1, l + 1] - a)
                    out[r, ch, h] = top + fy * (bot - top)
        return out

    def _interp_fast(pixels, X, Y):
        P = np.pad(pixels, ((0, 0), (2, 2), (2, 2)))
        out = np.empty((X.shape[0], pixels.shape[0], X.shape[1]))
        return _interp_kernel(P, np.ascontiguousarray(X), np.ascontiguousarray(Y), out)
else:  # pragma: no cover
    _interp_fast = _interp_numpy


def interpolate(pixels: np.ndarray, X, Y, backend: str = "auto") -> np.ndarray:
    """Bilinear interpolation at arrays of 1-based coordinates.

    Pixels outside the grid count as zero.  For coordinate arrays of shape
    ``(..., n, m)`` the result has shape ``(..., c, n, m)``; for 0-d or 1-d
    coordinates it is ``(c,) + X.shape``.
    """
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape != Y.shape:
        X, Y = np.broadcast_arrays(X, Y)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise InvalidInputError("non-finite interpolation coordinate")
    fn = _interp_numpy if backend == "numpy" else _interp_fast
    if X.ndim >= 2:
        lead, tail = X.shape[:-2], X.shape[-2:]
        H = tail[0] * tail[1]
        out = fn(pixels, X.reshape(-1, H), Y.reshape(-1, H))
        return out.reshape(lead + (pixels.shape[0],) + tail)
    out = fn(pixels, X.reshape(1, -1), Y.reshape(1, -1))
    return out.reshape((pixels.shape[0],) + X.shape)


def bilinear_interpolate(img, channel: int, c) -> float:
    """Interpolated value of one channel at coordinate ``c = (x, y)``."""
    px = as_pixels(img)
    x, y = float(c[0]), float(c[1])
    if not (np.isfinite(x) and np.isfinite(y)):
        raise InvalidInputError("non-finite interpolation coordinate")
    return float(interpolate(px[channel:channel + 1], np.array(x), np.array(y))[0])


def transform_batch(img, spec, params) -> np.ndarray:
    """Transformed images for a batch of parameters.

    ``params`` has shape ``(B, d)``; the result has shape ``(B, c, n, m)``.
    """
    px = as_pixels(img)
    spec = as_spec(spec)
    p = np.asarray(params, dtype=np.float64)
    if p.ndim < 2:
        p = p.reshape(-1, spec.dim)
    c, n, m = px.shape
    out = np.empty((p.shape[0], c, n, m))
    step = max(1, _CHUNK_ELEMS // (c * n * m))
    for s in range(0, p.shape[0], step):
        X, Y = inverse_coords(spec, p[s:s + step], (n, m))
        out[s:s + step] = interpolate(px, X, Y)
    return out


def pixel_value(img, spec, params, i: int, j: int, channel: int = 0) -> float:
    """Value of pixel ``(i, j)`` of the transformed image ``g_x(params)``."""
    px = as_pixels(img)
    x, y = inverse_map(spec, params, i, j, px.shape[1:])
    return bilinear_interpolate(px, channel, (x, y))


def transform_image(img, spec, params) -> Image:
    p = np.atleast_1d(np.asarray(params, dtype=np.float64))
    return Image(np.clip(transform_batch(img, spec, p[None])[0], 0.0, 1.0))
