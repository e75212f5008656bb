"""Dense array kernels: precision mode, matmul, im2col lowering, initializers.

Tensors are plain numpy arrays in row-major, channel-first (N, C, H, W)
layout. The element type is a process-wide mode rather than a per-array
choice: training runs in float32, gradient checks switch to float64.
"""

from __future__ import annotations

import contextlib
import math
import re

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, DimensionError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_precision = "float32"


def get_precision():
    return _precision


def get_dtype():
    return _DTYPES[_precision]


def set_precision(name):
    global _precision
    if name not in _DTYPES:
        raise ConfigError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _precision = name


@contextlib.contextmanager
def precision(name):
    """Temporarily switch the element type, e.g. ``with precision("float64"):``."""
    previous = _precision
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def as_tensor(values):
    return np.ascontiguousarray(values, dtype=get_dtype())


def matmul(a, b):
    """Rank-2 matrix product with an explicit shape check."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def conv_output_size(size, kernel, stride, pad):
    out = (size + 2 * pad - kernel) // stride + 1
    if out < 1:
        raise DimensionError(
            f"non-positive output size for input {size}, kernel {kernel}, stride {stride}, pad {pad}"
        )
    return out


def _as_pair(value):
    if isinstance(value, (tuple, list)):
        return int(value[0]), int(value[1])
    return int(value), int(value)


def im2col_batch(x, kernel, stride=1, pad=0):
    """Lower a batch ``[N, C, H, W]`` to columns ``[N, C*kh*kw, Ho*Wo]``.

    Rows are ordered channel-major, then row-major within the patch, so a
    weight tensor ``[F, C, kh, kw]`` reshaped to ``[F, C*kh*kw]`` multiplies
    the columns directly.
    """
    kh, kw = _as_pair(kernel)
    n, c, h, w = x.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    # (N, C, Ho, Wo, kh, kw) -> (N, C, kh, kw, Ho, Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3).reshape(n, c * kh * kw, ho * wo)
    return np.ascontiguousarray(cols)


def im2col(x, kernel, stride=1, pad=0):
    """Single-image lowering: ``[C, H, W]`` -> ``[C*kh*kw, Ho*Wo]``."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise DimensionError(f"im2col expects a [C, H, W] tensor, got shape {x.shape}")
    return im2col_batch(x[None], kernel, stride, pad)[0]


def col2im_batch(cols, input_shape, kernel, stride=1, pad=0):
    """Adjoint of :func:`im2col_batch`: scatter-add columns back onto the image."""
    kh, kw = _as_pair(kernel)
    n, c, h, w = input_shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, ho, wo)
    img = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * (ho - 1) + 1
        for j in range(kw):
            j_end = j + stride * (wo - 1) + 1
            img[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j]
    if pad:
        img = img[:, :, pad:-pad, pad:-pad]
    return img


def conv2d_naive(x, weight, bias=None, stride=1, pad=0):
    """Nested-loop cross-correlation, ``[N,C,H,W]`` * ``[F,C,kh,kw]``.

    Slow reference used to check the im2col path.
    """
    n, c, h, w = x.shape
    f, c2, kh, kw = weight.shape
    if c != c2:
        raise DimensionError(f"conv channel mismatch: input {x.shape}, weight {weight.shape}")
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, f, ho, wo), dtype=np.result_type(x, weight))
    for b in range(n):
        for o in range(f):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += xp[b, ch, i * stride + di, j * stride + dj] * weight[o, ch, di, dj]
                    out[b, o, i, j] = acc + (bias[o] if bias is not None else 0.0)
    return out


def fans(shape):
    """(fan_in, fan_out) for FC weights ``[in, out]`` and conv weights ``[F, C, kh, kw]``."""
    shape = tuple(shape)
    if len(shape) == 2:
        return shape[0], shape[1]
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        return shape[1] * receptive, shape[0] * receptive
    size = int(np.prod(shape)) if shape else 1
    return size, size


_GAUSSIAN = re.compile(r"^gaussian\(\s*([0-9.eE+-]+)\s*\)$")


def _parse_scheme(scheme):
    if isinstance(scheme, tuple) and len(scheme) == 2 and scheme[0] == "gaussian":
        return "gaussian", float(scheme[1])
    if isinstance(scheme, str):
        if scheme in ("xavier_uniform", "zeros"):
            return scheme, None
        m = _GAUSSIAN.match(scheme)
        if m:
            return "gaussian", float(m.group(1))
    raise ConfigError(f"unknown init scheme {scheme!r}")


def rand_init(shape, scheme, rng_seed=0):
    """Build an initialized parameter tensor.

    ``scheme`` is ``"xavier_uniform"``, ``"zeros"``, ``"gaussian(sigma)"`` or
    ``("gaussian", sigma)``. ``rng_seed`` may be an int or a numpy Generator.
    """
    kind, sigma = _parse_scheme(scheme)
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise DimensionError(f"shape dimensions must be positive, got {shape}")
    dtype = get_dtype()
    if kind == "zeros":
        return np.zeros(shape, dtype=dtype)
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    if kind == "xavier_uniform":
        fan_in, fan_out = fans(shape)
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape).astype(dtype)
    if sigma < 0:
        raise ConfigError(f"gaussian sigma must be non-negative, got {sigma}")
    return (rng.standard_normal(shape) * sigma).astype(dtype)
