"""Layers with explicit forward/backward passes.

All layers work on batched arrays ``[N, C, *spatial]`` where ``spatial`` is
``(H, W)`` for 2D layers and ``(D, H, W)`` for 3D layers. Convolutions use the
cross-correlation convention (no kernel flip). ``forward`` caches what
``backward`` needs; ``backward(grad_out)`` returns the input gradient and
*accumulates* into each parameter's ``grad``.
"""
from __future__ import annotations

import itertools
import math
from typing import Sequence

import numpy as np

from .tensor import Parameter

LEAKY_SLOPE = 0.2
CNORM_EPS = 1e-5


class Layer:
    name = ""

    def params(self) -> list[Parameter]:
        return []

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def __call__(self, x):
        return self.forward(x)

    def _need_cache(self):
        cache = getattr(self, "_cache", None)
        if cache is None:
            raise RuntimeError(f"backward before forward in layer {self.name or type(self).__name__}")
        return cache


def init_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# convolution kernels (shared by Conv and ConvTranspose, any spatial rank)


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """TF-style "same" padding: output extent ceil(size / stride)."""
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def _window(offset, strides, out_sp):
    return tuple(slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(offset, strides, out_sp))


def conv_forward(x, w, strides, pads):
    """Direct-summation correlation. x: [N,C,*S], w: [O,C,*K] -> [N,O,*S']."""
    nd = w.ndim - 2
    ks = w.shape[2:]
    xp = np.pad(x, [(0, 0), (0, 0)] + list(pads))
    out_sp = tuple((xp.shape[2 + i] - ks[i]) // strides[i] + 1 for i in range(nd))
    out = np.zeros((w.shape[0], x.shape[0]) + out_sp)
    lead = (slice(None), slice(None))
    for off in itertools.product(*(range(k) for k in ks)):
        xs = xp[lead + _window(off, strides, out_sp)]
        out += np.tensordot(w[lead + off], xs, axes=([1], [1]))
    return np.ascontiguousarray(np.moveaxis(out, 0, 1))


def conv_backward_input(g, w, strides, pads, in_sp):
    """Adjoint of :func:`conv_forward` in x. g: [N,O,*S'] -> [N,C,*in_sp]."""
    ks = w.shape[2:]
    out_sp = g.shape[2:]
    padded = tuple(n + a + b for n, (a, b) in zip(in_sp, pads))
    dxp = np.zeros((w.shape[1], g.shape[0]) + padded)
    lead = (slice(None), slice(None))
    for off in itertools.product(*(range(k) for k in ks)):
        dxp[lead + _window(off, strides, out_sp)] += np.tensordot(w[lead + off], g, axes=([0], [1]))
    crop = tuple(slice(a, a + n) for n, (a, _) in zip(in_sp, pads))
    return np.ascontiguousarray(np.moveaxis(dxp[lead + crop], 0, 1))


def conv_backward_weight(g, x, kshape, strides, pads):
    """Gradient of <g, conv_forward(x, w)> in w."""
    xp = np.pad(x, [(0, 0), (0, 0)] + list(pads))
    out_sp = g.shape[2:]
    nd = len(out_sp)
    red = [0] + list(range(2, 2 + nd))
    dw = np.zeros((g.shape[1], x.shape[1]) + tuple(kshape))
    lead = (slice(None), slice(None))
    for off in itertools.product(*(range(k) for k in kshape)):
        xs = xp[lead + _window(off, strides, out_sp)]
        dw[lead + off] = np.tensordot(g, xs, axes=(red, red))
    return dw


def _tuple(v, nd):
    return tuple(v) if isinstance(v, (tuple, list)) else (v,) * nd


class Conv(Layer):
    """2D or 3D convolution ("same" padding unless ``pads`` is given).

    ``kernel`` and ``stride`` are ints or per-axis tuples. The kernel tensor
    has shape ``[out, in, *kernel]``.
    """

    def __init__(self, in_ch, out_ch, kernel, stride=1, *, ndim=2, pads=None,
                 rng=None, name="conv"):
        self.name = name
        self.ndim = ndim
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel = _tuple(kernel, ndim)
        self.stride = _tuple(stride, ndim)
        if any(s not in (1, 2) for s in self.stride):
            raise ValueError("stride must be 1 or 2")
        self.fixed_pads = pads
        shape = (out_ch, in_ch) + self.kernel
        fan_in = in_ch * math.prod(self.kernel)
        w = init_uniform(rng, shape, fan_in) if rng is not None else np.zeros(shape)
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def pads_for(self, spatial):
        if self.fixed_pads is not None:
            return [tuple(p) for p in self.fixed_pads]
        return [same_padding(n, k, s) for n, k, s in zip(spatial, self.kernel, self.stride)]

    def forward(self, x):
        if x.ndim != self.ndim + 2 or x.shape[1] != self.in_ch:
            raise ValueError(
                f"{self.name}: expected [N,{self.in_ch},...] with {self.ndim} spatial axes, got {x.shape}")
        pads = self.pads_for(x.shape[2:])
        y = conv_forward(x, self.weight.value, self.stride, pads)
        y += self.bias.value.reshape((1, -1) + (1,) * self.ndim)
        self._cache = (x, pads)
        return y

    def backward(self, g):
        x, pads = self._need_cache()
        self.weight.grad += conv_backward_weight(g, x, self.kernel, self.stride, pads)
        self.bias.grad += g.sum(axis=(0,) + tuple(range(2, g.ndim)))
        return conv_backward_input(g, self.weight.value, self.stride, pads, x.shape[2:])


class ConvTranspose(Layer):
    """Transposed convolution, defined as the exact adjoint of :class:`Conv`.

    Output extent is ``input * stride`` on every axis. Kernel shape is
    ``[in, out, *kernel]``, i.e. the weight of the forward conv that maps
    ``out`` channels back to ``in`` channels.
    """

    def __init__(self, in_ch, out_ch, kernel, stride=2, *, ndim=2, rng=None, name="convT"):
        self.name = name
        self.ndim = ndim
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel = _tuple(kernel, ndim)
        self.stride = _tuple(stride, ndim)
        shape = (in_ch, out_ch) + self.kernel
        # each output receives ~in*prod(k)/prod(stride) terms
        fan_in = max(1, in_ch * math.prod(self.kernel) // math.prod(self.stride))
        w = init_uniform(rng, shape, fan_in) if rng is not None else np.zeros(shape)
        self.weight = Parameter(f"{name}.weight", w)
        self.bias = Parameter(f"{name}.bias", np.zeros(out_ch))
        self._cache = None

    def params(self):
        return [self.weight, self.bias]

    def out_spatial(self, spatial):
        return tuple(n * s for n, s in zip(spatial, self.stride))

    def forward(self, x):
        if x.ndim != self.ndim + 2 or x.shape[1] != self.in_ch:
            raise ValueError(f"{self.name}: expected [N,{self.in_ch},...], got {x.shape}")
        out_sp = self.out_spatial(x.shape[2:])
        pads = [same_padding(n, k, s) for n, k, s in zip(out_sp, self.kernel, self.stride)]
        y = conv_backward_input(x, self.weight.value, self.stride, pads, out_sp)
        y += self.bias.value.reshape((1, -1) + (1,) * self.ndim)
        self._cache = (x, pads)
        return y

    def backward(self, g):
        x, pads = self._need_cache()
        self.weight.grad += conv_backward_weight(x, g, self.kernel, self.stride, pads)
        self.bias.grad += g.sum(axis=(0,) + tuple(range(2, g.ndim)))
        return conv_forward(g, self.weight.value, self.stride, pads)


class ChannelNorm(Layer):
    """Standardize across the channel axis at every position, then affine."""

    def __init__(self, channels, eps=CNORM_EPS, name="cnorm"):
        self.name = name
        self.channels = channels
        self.eps = eps
        self.gain = Parameter(f"{name}.gain", np.ones(channels))
        self.offset = Parameter(f"{name}.offset", np.zeros(channels))
        self._cache = None

    def params(self):
        return [self.gain, self.offset]

    def _bshape(self, x):
        return (1, -1) + (1,) * (x.ndim - 2)

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        mu = x.mean(axis=1, keepdims=True)
        xc = x - mu
        inv = 1.0 / np.sqrt((xc * xc).mean(axis=1, keepdims=True) + self.eps)
        xhat = xc * inv
        self._cache = (xhat, inv)
        bs = self._bshape(x)
        return xhat * self.gain.value.reshape(bs) + self.offset.value.reshape(bs)

    def backward(self, g):
        xhat, inv = self._need_cache()
        red = (0,) + tuple(range(2, g.ndim))
        self.gain.grad += (g * xhat).sum(axis=red)
        self.offset.grad += g.sum(axis=red)
        dxhat = g * self.gain.value.reshape(self._bshape(g))
        return inv * (dxhat - dxhat.mean(axis=1, keepdims=True)
                      - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))


class ReLU(Layer):
    name = "relu"

    def forward(self, x):
        self._cache = x > 0
        return np.maximum(x, 0.0)  # keeps NaN visible

    def backward(self, g):
        return np.where(self._need_cache(), g, 0.0)


class LeakyReLU(Layer):
    name = "lrelu"

    def __init__(self, slope=LEAKY_SLOPE):
        self.slope = slope
        self._cache = None

    def forward(self, x):
        self._cache = x >= 0
        return np.where(self._cache, x, self.slope * x)

    def backward(self, g):
        return np.where(self._need_cache(), g, self.slope * g)


def sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z, dtype=np.float64)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def softplus(z):
    return np.logaddexp(0.0, z)


class Sigmoid(Layer):
    name = "sigmoid"

    def forward(self, x):
        self._cache = sigmoid(x)
        return self._cache

    def backward(self, g):
        s = self._need_cache()
        return g * s * (1.0 - s)


class SEBlock(Layer):
    """Squeeze-and-excitation: mean pool, FC, ReLU, FC, sigmoid, channel scale.

    The sigmoid gate of the last forward pass is kept in ``scale`` ([N, C]).
    """

    def __init__(self, channels, reduction=2, rng=None, name="se"):
        self.name = name
        self.channels = channels
        self.hidden = -(-channels // reduction)
        c, h = channels, self.hidden

        def w(shape, fan):
            return init_uniform(rng, shape, fan) if rng is not None else np.zeros(shape)

        self.fc1_w = Parameter(f"{name}.fc1.weight", w((h, c), c))
        self.fc1_b = Parameter(f"{name}.fc1.bias", np.zeros(h))
        self.fc2_w = Parameter(f"{name}.fc2.weight", w((c, h), h))
        self.fc2_b = Parameter(f"{name}.fc2.bias", np.zeros(c))
        self.scale = None
        self._cache = None

    def params(self):
        return [self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]

    def fc_weights(self):
        return [self.fc1_w, self.fc2_w]

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        sp = tuple(range(2, x.ndim))
        pooled = x.mean(axis=sp)
        h = pooled @ self.fc1_w.value.T + self.fc1_b.value
        a = np.maximum(h, 0.0)
        s = sigmoid(a @ self.fc2_w.value.T + self.fc2_b.value)
        self.scale = s
        self._cache = (x, pooled, h, a, s)
        return x * s.reshape(s.shape + (1,) * len(sp))

    def backward(self, g):
        x, pooled, h, a, s = self._need_cache()
        sp = tuple(range(2, x.ndim))
        ext = (1,) * len(sp)
        ds = (g * x).sum(axis=sp)
        dz = ds * s * (1.0 - s)
        self.fc2_w.grad += dz.T @ a
        self.fc2_b.grad += dz.sum(axis=0)
        dh = (dz @ self.fc2_w.value) * (h > 0)
        self.fc1_w.grad += dh.T @ pooled
        self.fc1_b.grad += dh.sum(axis=0)
        dpooled = dh @ self.fc1_w.value
        n_sp = math.prod(x.shape[2:])
        return g * s.reshape(s.shape + ext) + dpooled.reshape(dpooled.shape + ext) / n_sp


class NNUpsample(Layer):
    """Nearest-neighbour upsampling of the two trailing axes by an integer factor."""

    def __init__(self, factor):
        if int(factor) != factor or factor < 1:
            raise ValueError("upsampling factor must be an integer >= 1")
        self.factor = int(factor)
        self.name = f"nn_up{self.factor}"
        self._cache = None

    def forward(self, x):
        self._cache = x.shape
        f = self.factor
        return np.repeat(np.repeat(x, f, axis=-2), f, axis=-1)

    def backward(self, g):
        shape = self._need_cache()
        f = self.factor
        h, w = shape[-2:]
        return g.reshape(shape[:-2] + (h, f, w, f)).sum(axis=(-3, -1))


def nn_upsample(x, factor):
    return NNUpsample(factor).forward(np.asarray(x, dtype=np.float64))


class Reshape(Layer):
    """Metadata-only reshape between 2D feature maps and 3D volumes.

    ``mode`` is one of ``to_volume`` ([N,B,H,W] -> [N,1,B,H,W]),
    ``flatten`` ([N,C,D,H,W] -> [N,C*D,H,W]) or ``unflatten`` (inverse of
    flatten, needs ``depth``), ``from_volume`` ([N,1,B,H,W] -> [N,B,H,W]).
    """

    def __init__(self, mode, depth=None):
        self.mode = mode
        self.depth = depth
        self.name = mode
        self._cache = None

    def forward(self, x):
        self._cache = x.shape
        n = x.shape[0]
        if self.mode == "to_volume":
            return x.reshape(n, 1, *x.shape[1:])
        if self.mode == "flatten":
            return x.reshape(n, x.shape[1] * x.shape[2], *x.shape[3:])
        if self.mode == "unflatten":
            if x.shape[1] % self.depth:
                raise ValueError(f"cannot unflatten {x.shape[1]} channels into depth {self.depth}")
            return x.reshape(n, x.shape[1] // self.depth, self.depth, *x.shape[2:])
        if self.mode == "from_volume":
            if x.shape[1] != 1:
                raise ValueError(f"from_volume needs a single feature channel, got {x.shape}")
            return x.reshape(n, *x.shape[2:])
        raise ValueError(f"unknown reshape mode {self.mode!r}")

    def backward(self, g):
        return g.reshape(self._need_cache())


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer], name=""):
        self.layers = list(layers)
        self.name = name

    def params(self):
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g

    def __iter__(self):
        return iter(self.layers)


class ResidualBlock(Layer):
    """x + CNorm(Conv(ReLU(CNorm(Conv(x))))) with 3x3 convs."""

    def __init__(self, channels, rng=None, name="res"):
        self.name = name
        self.channels = channels
        self.body = Sequential([
            Conv(channels, channels, 3, rng=rng, name=f"{name}.conv1"),
            ChannelNorm(channels, name=f"{name}.cnorm1"),
            ReLU(),
            Conv(channels, channels, 3, rng=rng, name=f"{name}.conv2"),
            ChannelNorm(channels, name=f"{name}.cnorm2"),
        ])

    def params(self):
        return self.body.params()

    def forward(self, x):
        if x.shape[1] != self.channels:
            raise ValueError(f"{self.name}: expected {self.channels} channels, got {x.shape[1]}")
        return x + self.body.forward(x)

    def backward(self, g):
        return g + self.body.backward(g)
