"""Differentiable kernels built on :mod:`core.tensor`.

Image-like tensors are laid out height x width x channels. Elevation (rows)
never wraps; azimuth (columns) wraps when ``wrap_azimuth`` is set.
"""

from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from core.errors import DimensionError
from core.tensor import ArrayLike, Tensor, as_tensor, make_result, unbroadcast

GELU_C = np.sqrt(2.0 / np.pi)


def matmul(a: ArrayLike, b: ArrayLike) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} x {b.shape}")

    def vjp(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return make_result(np.matmul(a.data, b.data), (a, b), vjp, "matmul")


def softmax_lastdim(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] < 1:
        raise DimensionError(f"softmax needs a non-empty last axis, got shape {x.shape}")
    z = np.exp(x.data - x.data.max(axis=-1, keepdims=True))
    y = z / z.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), vjp, "softmax")


def normalize_lastdim(x: ArrayLike, eps: float = 1e-5) -> Tensor:
    """Zero-mean, unit-variance normalization over the last axis."""
    x = as_tensor(x)
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv

    def vjp(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return make_result(xhat, (x,), vjp, "layer_norm")


def layer_norm(x: ArrayLike, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    return normalize_lastdim(x, eps) * gamma + beta


def gelu(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    u = GELU_C * (x.data + 0.044715 * x.data**3)
    th = np.tanh(u)
    y = 0.5 * x.data * (1.0 + th)

    def vjp(g):
        du = GELU_C * (1.0 + 3.0 * 0.044715 * x.data**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x.data * (1.0 - th * th) * du),)

    return make_result(y, (x,), vjp, "gelu")


def sigmoid(x: ArrayLike) -> Tensor:
    x = as_tensor(x)
    y = expit(x.data)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return make_result(y, (x,), vjp, "sigmoid")


def _window_starts(extent: int, size: int, step: int, wrap: bool) -> np.ndarray:
    if wrap:
        return np.arange(0, extent, step)
    starts = list(range(0, extent - size + 1, step))
    if starts[-1] != extent - size:
        starts.append(extent - size)
    return np.asarray(starts)


@lru_cache(maxsize=512)
def window_index(height: int, width: int, window: tuple, stride: tuple, wrap: bool):
    """Pixel coordinates of every window plus the per-pixel coverage count.

    Returns ``(rows, cols, counts)`` with ``rows``/``cols`` shaped
    (windows, h, w) in row-major order over window positions.
    """
    h, w = window
    sh, sw = stride
    if min(h, w, sh, sw) < 1:
        raise DimensionError(f"window {window} and stride {stride} must be positive")
    if h > height or w > width:
        raise DimensionError(f"window {window} larger than the {height}x{width} grid")
    if sh > h or sw > w:
        raise DimensionError(f"stride {stride} exceeds window {window}; pixels would be skipped")
    if wrap and width % sw:
        raise DimensionError(f"azimuth stride {sw} does not divide the wrapped width {width}")

    row_starts = _window_starts(height, h, sh, wrap=False)
    col_starts = _window_starts(width, w, sw, wrap)
    r = row_starts[:, None] + np.arange(h)[None, :]
    c = (col_starts[:, None] + np.arange(w)[None, :]) % width
    r = np.repeat(r, len(col_starts), axis=0)
    c = np.tile(c, (len(row_starts), 1))
    rows = np.ascontiguousarray(np.broadcast_to(r[:, :, None], (len(r), h, w)))
    cols = np.ascontiguousarray(np.broadcast_to(c[:, None, :], (len(r), h, w)))
    counts = np.zeros((height, width))
    np.add.at(counts, (rows, cols), 1.0)
    for arr in (rows, cols, counts):
        arr.setflags(write=False)
    return rows, cols, counts


def unfold(x: ArrayLike, window: Sequence[int], stride: Sequence[int], wrap_azimuth: bool = False) -> Tensor:
    """Cut an H x W x C grid into (possibly overlapping) window tokens."""
    x = as_tensor(x)
    if x.ndim != 3:
        raise DimensionError(f"unfold expects an H x W x C tensor, got shape {x.shape}")
    height, width, channels = x.shape
    rows, cols, _ = window_index(height, width, tuple(window), tuple(stride), bool(wrap_azimuth))
    n, h, w = rows.shape

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g.reshape(n, h, w, channels))
        return (gx,)

    return make_result(x.data[rows, cols].reshape(n, h * w * channels), (x,), vjp, "unfold")


def fold(
    tokens: ArrayLike,
    target: Sequence[int],
    window: Sequence[int],
    stride: Sequence[int],
    wrap_azimuth: bool = False,
) -> Tensor:
    """Reassemble window tokens, averaging pixels covered more than once."""
    tokens = as_tensor(tokens)
    height, width, channels = (int(v) for v in target)
    rows, cols, counts = window_index(height, width, tuple(window), tuple(stride), bool(wrap_azimuth))
    n, h, w = rows.shape
    if tokens.shape != (n, h * w * channels):
        raise DimensionError(
            f"fold expected {n} tokens of length {h * w * channels} for target {tuple(target)}, "
            f"got shape {tokens.shape}"
        )
    acc = np.zeros((height, width, channels))
    np.add.at(acc, (rows, cols), tokens.data.reshape(n, h, w, channels))
    scale = counts[:, :, None]

    def vjp(g):
        return ((g / scale)[rows, cols].reshape(n, h * w * channels),)

    return make_result(acc / scale, (tokens,), vjp, "fold")


def _haar_analysis(x: np.ndarray) -> np.ndarray:
    a = x[0::2, 0::2]
    b = x[0::2, 1::2]
    c = x[1::2, 0::2]
    d = x[1::2, 1::2]
    return np.stack([(a + b + c + d) / 2, (a + b - c - d) / 2, (a - b + c - d) / 2, (a - b - c + d) / 2])


def _haar_synthesis(ll, lh, hl, hh) -> np.ndarray:
    out = np.empty((ll.shape[0] * 2, ll.shape[1] * 2) + ll.shape[2:])
    out[0::2, 0::2] = (ll + lh + hl + hh) / 2
    out[0::2, 1::2] = (ll + lh - hl - hh) / 2
    out[1::2, 0::2] = (ll - lh + hl - hh) / 2
    out[1::2, 1::2] = (ll - lh - hl + hh) / 2
    return out


def dwt_haar(x: ArrayLike) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Single-level orthonormal 2-D Haar transform: (LL, LH, HL, HH)."""
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[0] % 2 or x.shape[1] % 2:
        raise DimensionError(f"dwt_haar needs even height and width, got shape {x.shape}")

    def vjp(g):
        return (_haar_synthesis(g[0], g[1], g[2], g[3]),)

    bands = make_result(_haar_analysis(x.data), (x,), vjp, "dwt_haar")
    return bands[0], bands[1], bands[2], bands[3]


def idwt_haar(ll: ArrayLike, lh: ArrayLike, hl: ArrayLike, hh: ArrayLike) -> Tensor:
    bands = tuple(as_tensor(b) for b in (ll, lh, hl, hh))
    shapes = {b.shape for b in bands}
    if len(shapes) != 1:
        raise DimensionError(f"idwt_haar subbands differ in shape: {[b.shape for b in bands]}")

    def vjp(g):
        return tuple(_haar_analysis(g))

    return make_result(_haar_synthesis(*(b.data for b in bands)), bands, vjp, "idwt_haar")


def conv2d(x: ArrayLike, kernel: ArrayLike, padding: str = "same") -> Tensor:
    """Zero-padded same-size convolution of an H x W x Cin grid."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if padding != "same":
        raise DimensionError(f"unsupported padding {padding!r}; only 'same' is available")
    if kernel.ndim != 4 or x.ndim != 3:
        raise DimensionError(f"conv2d needs H x W x Cin input and kh x kw x Cin x Cout kernel, got {x.shape}, {kernel.shape}")
    kh, kw, cin, cout = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise DimensionError(f"conv2d kernel extents must be odd, got {kh}x{kw}")
    if x.shape[2] != cin:
        raise DimensionError(f"conv2d input has {x.shape[2]} channels, kernel expects {cin}")
    height, width, _ = x.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x.data, ((ph, ph), (pw, pw), (0, 0)))
    patches = sliding_window_view(padded, (kh, kw), axis=(0, 1)).transpose(0, 1, 3, 4, 2)
    columns = patches.reshape(height * width, kh * kw * cin)
    weights = kernel.data.reshape(kh * kw * cin, cout)

    def vjp(g):
        g2 = g.reshape(height * width, cout)
        gk = (columns.T @ g2).reshape(kernel.shape) if kernel.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2 @ weights.T).reshape(height, width, kh, kw, cin)
            gpad = np.zeros_like(padded)
            for i in range(kh):
                for j in range(kw):
                    gpad[i:i + height, j:j + width] += gcols[:, :, i, j, :]
            gx = gpad[ph:ph + height, pw:pw + width]
        return gx, gk

    return make_result((columns @ weights).reshape(height, width, cout), (x, kernel), vjp, "conv2d")
