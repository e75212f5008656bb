"""Layer kinds with hand-written forward and backward passes.

Every layer follows the same protocol::

    layer = build_layer(spec, in_shape)        # in_shape excludes the batch axis
    y = layer.forward(x, mode="train", rng=rng)
    gx = layer.backward(gy)                    # also fills layer.grads

``layer.params`` maps parameter names ("W", "b") to arrays that may be shared
with a network-level parameter dict; layers never rebind them, so in-place
optimizer updates are visible to every holder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError

Shape = Tuple[int, ...]


# ---------------------------------------------------------------------------
# Specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int
    stride: int = 1
    pad: int = 0

    def __post_init__(self):
        if self.out_channels < 1 or self.kernel < 1 or self.stride < 1 or self.pad < 0:
            raise ConfigError(f"invalid Conv spec {self}")

    def output_shape(self, in_shape):
        c, h, w = _expect_chw(self, in_shape)
        ho = T.conv_output_size(h, self.kernel, self.stride, self.pad)
        wo = T.conv_output_size(w, self.kernel, self.stride, self.pad)
        return (self.out_channels, ho, wo)

    def param_shapes(self, in_shape):
        c = _expect_chw(self, in_shape)[0]
        return {"W": (self.out_channels, c, self.kernel, self.kernel), "b": (self.out_channels,)}


@dataclass(frozen=True)
class MaxPool:
    kernel: int
    stride: int

    def __post_init__(self):
        if self.kernel < 1 or self.stride < 1:
            raise ConfigError(f"invalid MaxPool spec {self}")

    def output_shape(self, in_shape):
        c, h, w = _expect_chw(self, in_shape)
        return (c, T.conv_output_size(h, self.kernel, self.stride, 0),
                T.conv_output_size(w, self.kernel, self.stride, 0))

    def param_shapes(self, in_shape):
        return {}


@dataclass(frozen=True)
class LRN:
    local_size: int = 5
    alpha: float = 1e-4
    beta: float = 0.75
    k: float = 2.0

    def __post_init__(self):
        if self.local_size < 1 or self.local_size % 2 == 0:
            raise ConfigError(f"LRN local_size must be odd and >= 1, got {self.local_size}")

    def output_shape(self, in_shape):
        return _expect_chw(self, in_shape)

    def param_shapes(self, in_shape):
        return {}


@dataclass(frozen=True)
class ReLU:
    def output_shape(self, in_shape):
        return tuple(in_shape)

    def param_shapes(self, in_shape):
        return {}


@dataclass(frozen=True)
class FullyConnected:
    units: int
    bias: bool = True

    def __post_init__(self):
        if self.units < 1:
            raise ConfigError(f"FullyConnected needs at least one unit, got {self.units}")

    def output_shape(self, in_shape):
        return (self.units,)

    def param_shapes(self, in_shape):
        fan_in = int(np.prod(in_shape))
        shapes = {"W": (fan_in, self.units)}
        if self.bias:
            shapes["b"] = (self.units,)
        return shapes


@dataclass(frozen=True)
class Dropout:
    rate: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ConfigError(f"Dropout rate must lie in [0, 1), got {self.rate}")

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def param_shapes(self, in_shape):
        return {}


LAYER_KINDS = {cls.__name__: cls for cls in (Conv, MaxPool, LRN, ReLU, FullyConnected, Dropout)}


def spec_to_dict(spec):
    d = {"kind": type(spec).__name__}
    d.update(spec.__dict__)
    return d


def spec_from_dict(d):
    d = dict(d)
    kind = d.pop("kind")
    if kind not in LAYER_KINDS:
        raise ConfigError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**d)


def _expect_chw(spec, in_shape):
    if len(in_shape) != 3:
        raise DimensionError(f"{type(spec).__name__} expects [C, H, W] input, got {tuple(in_shape)}")
    return tuple(int(s) for s in in_shape)


def _check_mode(mode):
    if mode not in ("train", "eval"):
        raise ConfigError(f"mode must be 'train' or 'eval', got {mode!r}")


# ---------------------------------------------------------------------------
# Runtime layers
# ---------------------------------------------------------------------------


class Layer:
    """Base runtime layer: holds params, grads and the forward cache."""

    def __init__(self, spec, in_shape, params=None):
        self.spec = spec
        self.in_shape = tuple(int(s) for s in in_shape)
        self.out_shape = spec.output_shape(self.in_shape)
        shapes = spec.param_shapes(self.in_shape)
        if params is None:
            params = {name: np.zeros(shape, dtype=T.get_dtype()) for name, shape in shapes.items()}
        for name, shape in shapes.items():
            if name not in params or tuple(params[name].shape) != tuple(shape):
                got = None if name not in params else tuple(params[name].shape)
                raise DimensionError(f"{type(spec).__name__} param {name!r}: expected {shape}, got {got}")
        self.params = params
        self.grads: Dict[str, np.ndarray] = {}
        self.cache = None

    def _check_input(self, x):
        if tuple(x.shape[1:]) != self.in_shape:
            raise DimensionError(
                f"{type(self.spec).__name__} expects input [N, {', '.join(map(str, self.in_shape))}], got {x.shape}"
            )

    def forward(self, x, mode="eval", rng=None):
        _check_mode(mode)
        self._check_input(x)
        return self._forward(x, mode, rng)

    def backward(self, gy, need_input_grad=True):
        """Return the input gradient (None if not requested) and fill ``self.grads``."""
        if self.cache is None:
            raise ContractError(f"{type(self.spec).__name__}.backward called without a cached forward pass")
        expected = (self.cache_batch,) + tuple(self.out_shape)
        if tuple(gy.shape) != expected:
            raise DimensionError(f"grad_output shape {gy.shape} does not match forward output {expected}")
        gx = self._backward(gy, need_input_grad)
        return gx if need_input_grad else None


class ConvLayer(Layer):
    def _forward(self, x, mode, rng):
        s = self.spec
        w = self.params["W"]
        cols = T.im2col_batch(x, s.kernel, s.stride, s.pad)          # (N, K, L)
        out = np.matmul(w.reshape(w.shape[0], -1), cols)             # (N, F, L)
        out += self.params["b"][None, :, None]
        self.cache = cols
        self.cache_batch = x.shape[0]
        return out.reshape((x.shape[0],) + self.out_shape)

    def _backward(self, gy, need_input_grad):
        s = self.spec
        w = self.params["W"]
        cols = self.cache
        n = gy.shape[0]
        g = gy.reshape(n, s.out_channels, -1)
        self.grads = {
            "W": np.tensordot(g, cols, axes=([0, 2], [0, 2])).reshape(w.shape),
            "b": g.sum(axis=(0, 2)),
        }
        if not need_input_grad:
            return None
        gcols = np.matmul(w.reshape(w.shape[0], -1).T, g)
        return T.col2im_batch(gcols, (n,) + self.in_shape, s.kernel, s.stride, s.pad)


class MaxPoolLayer(Layer):
    def _windows(self, x):
        k, st = self.spec.kernel, self.spec.stride
        _, ho, wo = self.out_shape
        win = sliding_window_view(x, (k, k), axis=(2, 3))
        win = win[:, :, : (ho - 1) * st + 1 : st, : (wo - 1) * st + 1 : st]
        return win.reshape(win.shape[:4] + (k * k,))

    def _forward(self, x, mode, rng):
        win = self._windows(x)
        # argmax returns the first maximum: ties go to the lowest linear index
        arg = win.argmax(axis=-1)
        self.cache = arg
        self.cache_batch = x.shape[0]
        return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def _backward(self, gy, need_input_grad):
        k, st = self.spec.kernel, self.spec.stride
        _, ho, wo = self.out_shape
        arg = self.cache
        gx = np.zeros((gy.shape[0],) + self.in_shape, dtype=gy.dtype)
        for d in range(k * k):
            di, dj = divmod(d, k)
            hit = arg == d
            if hit.any():
                gx[:, :, di : di + (ho - 1) * st + 1 : st, dj : dj + (wo - 1) * st + 1 : st] += np.where(hit, gy, 0)
        self.grads = {}
        return gx


def _channel_window_sum(a, size):
    """Sum over a centred window of ``size`` channels (axis 1), zero-padded."""
    half = size // 2
    c = a.shape[1]
    csum = np.cumsum(a, axis=1)
    csum = np.concatenate([np.zeros_like(a[:, :1]), csum], axis=1)
    hi = np.minimum(np.arange(c) + half + 1, c)
    lo = np.maximum(np.arange(c) - half, 0)
    return csum[:, hi] - csum[:, lo]


class LRNLayer(Layer):
    def _forward(self, x, mode, rng):
        s = self.spec
        scale = s.k + (s.alpha / s.local_size) * _channel_window_sum(x * x, s.local_size)
        inv = scale ** (-s.beta)
        self.cache = (x, scale, inv)
        self.cache_batch = x.shape[0]
        return x * inv

    def _backward(self, gy, need_input_grad):
        s = self.spec
        x, scale, inv = self.cache
        t = gy * x * inv / scale
        gx = gy * inv - (2.0 * s.alpha * s.beta / s.local_size) * x * _channel_window_sum(t, s.local_size)
        self.grads = {}
        return gx


class ReLULayer(Layer):
    def _forward(self, x, mode, rng):
        self.cache = x > 0
        self.cache_batch = x.shape[0]
        return np.maximum(x, 0)

    def _backward(self, gy, need_input_grad):
        self.grads = {}
        return np.where(self.cache, gy, 0).astype(gy.dtype, copy=False)


class FullyConnectedLayer(Layer):
    def _forward(self, x, mode, rng):
        flat = x.reshape(x.shape[0], -1)
        self.cache = flat
        self.cache_batch = x.shape[0]
        out = flat @ self.params["W"]
        if self.spec.bias:
            out += self.params["b"]
        return out

    def _backward(self, gy, need_input_grad):
        flat = self.cache
        self.grads = {"W": flat.T @ gy}
        if self.spec.bias:
            self.grads["b"] = gy.sum(axis=0)
        gx = gy @ self.params["W"].T
        return gx.reshape((gy.shape[0],) + self.in_shape)


class DropoutLayer(Layer):
    def _forward(self, x, mode, rng):
        self.cache_batch = x.shape[0]
        if mode == "eval" or self.spec.rate == 0.0:
            self.cache = 1.0
            return x
        if rng is None:
            raise ContractError("Dropout in train mode requires an rng")
        keep = 1.0 - self.spec.rate
        mask = (rng.random(x.shape, dtype=np.float32) < keep).astype(x.dtype) / np.asarray(keep, dtype=x.dtype)
        self.cache = mask
        return x * mask

    def _backward(self, gy, need_input_grad):
        self.grads = {}
        return gy * self.cache


_RUNTIME = {
    Conv: ConvLayer,
    MaxPool: MaxPoolLayer,
    LRN: LRNLayer,
    ReLU: ReLULayer,
    FullyConnected: FullyConnectedLayer,
    Dropout: DropoutLayer,
}


def build_layer(spec, in_shape, params=None):
    return _RUNTIME[type(spec)](spec, in_shape, params)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


def _rel_err(analytic, numeric):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def gradient_check(spec, input_shape, seed=0, eps=1e-5):
    """Max relative error between backward() and central differences.

    ``input_shape`` includes the batch axis. Runs in float64 regardless of
    the current precision mode. The scalar objective is ``sum(y * R)`` for a
    fixed random ``R``; Dropout is checked in train mode with its mask
    pinned by re-seeding the rng on every evaluation.
    """
    with T.precision("float64"):
        rng = np.random.default_rng(seed)
        in_shape = tuple(input_shape[1:])
        params = {name: rng.standard_normal(shape) * 0.5
                  for name, shape in spec.param_shapes(in_shape).items()}
        layer = build_layer(spec, in_shape, params)
        x = rng.standard_normal(input_shape)
        if isinstance(spec, LRN):
            # keep the normalizer away from k so the nonlinearity is exercised
            x = x * 10.0
        mode = "train" if isinstance(spec, Dropout) else "eval"
        drop_seed = int(rng.integers(2**31))

        def run(inp):
            return layer.forward(inp, mode, np.random.default_rng(drop_seed))

        proj = rng.standard_normal((input_shape[0],) + layer.out_shape)
        run(x)
        gx = layer.backward(proj)
        grads = dict(layer.grads)

        def numeric(arr):
            out = np.zeros_like(arr)
            flat = arr.reshape(-1)
            gflat = out.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                yp = run(x)
                flat[i] = orig - eps
                ym = run(x)
                flat[i] = orig
                gflat[i] = np.sum((yp - ym) * proj) / (2 * eps)
            return out

        worst = _rel_err(gx, numeric(x))
        for name, p in params.items():
            worst = max(worst, _rel_err(grads[name], numeric(p)))
        return worst
