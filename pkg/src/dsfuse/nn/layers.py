"""Forward/backward pairs for the layers of the segmentation network.

All functions work on a single sample laid out as ``(channels, z, y, x)``.
Each ``*_forward`` returns its output and a cache; the matching
``*_backward`` takes that cache and the upstream gradient.
"""

from __future__ import annotations

import itertools

import numpy as np

from ..errors import ShapeError

# kernel offsets in the order of the flattened (3, 3, 3) weight axes
OFFSETS = tuple(itertools.product((-1, 0, 1), repeat=3))


def _ranges(n: int, d: int) -> tuple[slice, slice]:
    """Slices such that ``dst[i] <- src[i + d]`` for all valid ``i``."""
    lo, hi = max(0, -d), n - max(0, d)
    return slice(lo, hi), slice(lo + d, hi + d)


def _shift_add(dst: np.ndarray, src: np.ndarray, off) -> None:
    """``dst[:, i] += src[:, i + off]`` where both indices are in range."""
    (dz, sz), (dy, sy), (dx, sx) = (_ranges(n, d) for n, d in zip(dst.shape[1:], off))
    dst[:, dz, dy, dx] += src[:, sz, sy, sx]


def im2col(x: np.ndarray) -> np.ndarray:
    """Stack the 27 zero-padded neighbours: ``cols[c, k, i] = x[c, i + OFFSETS[k]]``."""
    c, d, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1)))
    cols = np.empty((c, 27, d, h, w), dtype=x.dtype)
    for k, (a, b, e) in enumerate(OFFSETS):
        cols[:, k] = xp[:, a + 1:a + 1 + d, b + 1:b + 1 + h, e + 1:e + 1 + w]
    return cols


def conv3d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3x3 convolution (cross-correlation) with zero padding 1, stride 1."""
    cin, d, h, wd = x.shape
    cout = w.shape[0]
    if w.shape != (cout, cin, 3, 3, 3):
        raise ShapeError(f"kernel {w.shape} incompatible with {cin} input channels")
    n = d * h * wd
    if cin < cout:
        cols = im2col(x)
        y = (w.reshape(cout, cin * 27) @ cols.reshape(cin * 27, n)).reshape(cout, d, h, wd)
        cache = ("cols", x, w, cols)
    else:
        # project first, then shift the (narrower) outputs into place
        z = (w.transpose(2, 3, 4, 0, 1).reshape(27 * cout, cin) @ x.reshape(cin, n))
        z = z.reshape(27, cout, d, h, wd)
        y = np.zeros((cout, d, h, wd), dtype=x.dtype)
        for k, off in enumerate(OFFSETS):
            _shift_add(y, z[k], off)
        cache = ("proj", x, w, None)
    y += b.reshape(cout, 1, 1, 1)
    return y, cache


def conv3d_backward(cache, dy: np.ndarray):
    mode, x, w, cols = cache
    cin, d, h, wd = x.shape
    cout = w.shape[0]
    n = d * h * wd
    db = dy.reshape(cout, n).sum(axis=1)
    g = dy.reshape(cout, n)
    if mode == "cols":
        dw = (g @ cols.reshape(cin * 27, n).T).reshape(w.shape)
        dcols = (w.reshape(cout, cin * 27).T @ g).reshape(cin, 27, d, h, wd)
        dx = np.zeros_like(x)
        for k, off in enumerate(OFFSETS):
            _shift_add(dx, dcols[:, k], tuple(-o for o in off))
    else:
        # dycols[:, k][i] = dy[:, i + off_k]; the flipped kernel pairs it with x
        dycols = im2col(dy).reshape(cout * 27, n)
        flipped = w[:, :, ::-1, ::-1, ::-1]
        dx = (flipped.transpose(1, 0, 2, 3, 4).reshape(cin, cout * 27) @ dycols).reshape(x.shape)
        t = (dycols @ x.reshape(cin, n).T).reshape(cout, 3, 3, 3, cin)
        dw = np.ascontiguousarray(t[:, ::-1, ::-1, ::-1, :].transpose(0, 4, 1, 2, 3))
    return dx, dw, db


def pointwise_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """1x1x1 convolution; ``w`` has shape ``(cout, cin)``."""
    cin = x.shape[0]
    y = (w @ x.reshape(cin, -1)).reshape((w.shape[0],) + x.shape[1:])
    y += b.reshape(-1, 1, 1, 1)
    return y, (x, w)


def pointwise_backward(cache, dy: np.ndarray):
    x, w = cache
    cin, cout = x.shape[0], w.shape[0]
    g = dy.reshape(cout, -1)
    xf = x.reshape(cin, -1)
    return (w.T @ g).reshape(x.shape), g @ xf.T, g.sum(axis=1)


def relu_forward(x: np.ndarray):
    y = np.maximum(x, 0)
    return y, y > 0


def relu_backward(mask: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * mask


def maxpool_forward(x: np.ndarray):
    """2x2x2 max-pool, stride 2. Ties route the gradient to the first maximum."""
    c, d, h, w = x.shape
    if d % 2 or h % 2 or w % 2:
        raise ShapeError(f"max-pool needs even spatial dims, got {x.shape[1:]}")
    blocks = x.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).transpose(0, 1, 3, 5, 2, 4, 6)
    blocks = blocks.reshape(c, d // 2, h // 2, w // 2, 8)
    arg = blocks.argmax(axis=-1)
    y = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, arg)


def maxpool_backward(cache, dy: np.ndarray) -> np.ndarray:
    shape, arg = cache
    c, d, h, w = shape
    blocks = np.zeros(arg.shape + (8,), dtype=dy.dtype)
    np.put_along_axis(blocks, arg[..., None], dy[..., None], axis=-1)
    blocks = blocks.reshape(c, d // 2, h // 2, w // 2, 2, 2, 2).transpose(0, 1, 4, 2, 5, 3, 6)
    return blocks.reshape(shape)


def upsample_forward(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour upsampling by 2 along each spatial axis."""
    return x.repeat(2, axis=1).repeat(2, axis=2).repeat(2, axis=3)


def upsample_backward(dy: np.ndarray) -> np.ndarray:
    c, d, h, w = dy.shape
    return dy.reshape(c, d // 2, 2, h // 2, 2, w // 2, 2).sum(axis=(2, 4, 6))


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return dy * y * (1 - y)
