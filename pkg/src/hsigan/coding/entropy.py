"""Quantization and probability models for the latent bottleneck.

Two models are provided:

* :class:`FactorizedEntropyModel` -- one learned monotone CDF per channel
  (the default).
* :class:`HyperPrior` -- a small analysis/synthesis pair producing a
  per-element Gaussian scale from side information ``z``; ``z`` itself is
  coded with a factorized model.

Both expose the same surface: ``rate_loss`` / ``backward`` for training,
``compress`` / ``decompress`` for real bitstreams.

Every pmf over the integer support ``[-S, S]`` is normalized to the support,
floored at ``2**-16`` and renormalized, so code lengths are always finite.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from ..layers import Conv, ConvTranspose, ReLU, Sequential, sigmoid, softplus
from ..tensor import Parameter
from .rangecoder import decode_indices, encode_indices, pmf_to_cdf

P_FLOOR = 2.0 ** -16
DEFAULT_SUPPORT = 64
LN2 = math.log(2.0)


# ---------------------------------------------------------------------------
# quantization


def round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


@dataclass
class QuantStats:
    saturated: int = 0
    total: int = 0


def quantize(y, mode="inference", support=DEFAULT_SUPPORT, offset=0.0, stats=None):
    """Round ``y - offset`` half away from zero and clamp to ``[-S, S]``.

    Returns the dequantized values (``symbols + offset``). ``mode`` is
    ``inference``/``train`` (identical forward; in training the caller treats
    the Jacobian as identity) or ``identity``, which skips rounding and is
    only meant for gradient oracles. Clamped elements are counted in
    ``stats`` when one is passed.
    """
    y = np.asarray(y, dtype=np.float64)
    if not np.all(np.isfinite(y)):
        raise ValueError("cannot quantize non-finite values")
    if mode == "identity":
        return y.copy()
    if mode not in ("inference", "train"):
        raise ValueError(f"unknown quantization mode {mode!r}")
    q = round_half_away(y - offset)
    sat = np.abs(q) > support
    if stats is not None:
        stats.saturated += int(sat.sum())
        stats.total += q.size
    return np.clip(q, -support, support) + offset


def to_symbols(y_hat, offset=0.0):
    return np.rint(np.asarray(y_hat) - offset).astype(np.int64)


class StraightThrough:
    """Quantizer whose backward pass is the identity."""

    def __init__(self, mode="train", support=DEFAULT_SUPPORT, offset=0.0):
        self.mode = mode
        self.support = support
        self.offset = offset
        self.stats = QuantStats()

    def forward(self, y):
        return quantize(y, self.mode, self.support, self.offset, self.stats)

    def backward(self, g):
        return g


@dataclass
class LatentCode:
    """Integer latent grid ``[K, h, w]`` plus what is needed to code it."""

    symbols: np.ndarray
    offset: float = 0.0
    channel_ids: np.ndarray | None = None
    support: int = DEFAULT_SUPPORT
    saturated: int = 0

    def __post_init__(self):
        self.symbols = np.asarray(self.symbols, dtype=np.int64)
        if self.channel_ids is None:
            self.channel_ids = np.arange(self.symbols.shape[0])
        if self.symbols.size and np.abs(self.symbols).max() > self.support:
            raise ValueError("symbols outside the model support")

    @property
    def values(self):
        return self.symbols + self.offset


# ---------------------------------------------------------------------------
# floor + renormalization shared by both models


def floored_pmf(pmf):
    """max(pmf, floor) renormalized along the last axis."""
    q = np.maximum(pmf, P_FLOOR)
    return q / q.sum(axis=-1, keepdims=True)


def _rate_from_cdf(c_grid, c_lo, c_hi):
    """Bits and partial derivatives for elements given CDF samples.

    ``c_grid``: [R, G] CDF at the half-integers of the support (rows = models),
    ``c_lo``/``c_hi``: [R, M] CDF at y - 1/2 and y + 1/2. Returns
    ``bits`` and a closure mapping d(bits) -> (d c_grid, d c_lo, d c_hi).
    """
    den = c_grid[:, -1:] - c_grid[:, :1]
    pm = np.diff(c_grid, axis=1) / den
    keep_g = pm > P_FLOOR
    z = np.where(keep_g, pm, P_FLOOR).sum(axis=1, keepdims=True)
    pe = (c_hi - c_lo) / den
    keep_e = pe > P_FLOOR
    m = c_lo.shape[1]
    bits = float((-np.log(np.where(keep_e, pe, P_FLOOR)).sum() + (m * np.log(z)).sum()) / LN2)
    if not (np.all(np.isfinite(c_grid)) and np.all(np.isfinite(pe))):
        bits = float("nan")  # the floor would otherwise hide a broken model

    def grads(dbits=1.0):
        dpe = np.where(keep_e, -dbits / (LN2 * np.where(keep_e, pe, 1.0)), 0.0)
        dz = dbits * m / (LN2 * z)
        dpm = np.where(keep_g, dz, 0.0)
        dden = -(dpe * pe).sum(axis=1, keepdims=True) / den - (dpm * pm).sum(axis=1, keepdims=True) / den
        dc_grid = np.zeros_like(c_grid)
        dc_grid[:, 1:] += dpm / den
        dc_grid[:, :-1] -= dpm / den
        dc_grid[:, -1:] += dden
        dc_grid[:, :1] -= dden
        return dc_grid, -dpe / den, dpe / den

    return bits, grads


# ---------------------------------------------------------------------------
# factorized model


class FactorizedEntropyModel:
    """Per-channel learned CDF ``sigmoid(f_c(t))`` with ``f_c`` monotone.

    ``f_c`` is a small chain of 1->3->3->1 affine maps with softplus-positive
    matrices and ``x + tanh(a) * tanh(x)`` nonlinearities, which keeps it
    nondecreasing in ``t``.
    """

    def __init__(self, channels, support=DEFAULT_SUPPORT, filters=(3, 3), init_scale=1.0,
                 rng=None, name="P"):
        self.channels = channels
        self.support = support
        self.name = name
        dims = (1,) + tuple(filters) + (1,)
        scale = init_scale ** (1.0 / (len(filters) + 1))
        self.mats, self.biases, self.factors = [], [], []
        for i in range(len(dims) - 1):
            init = math.log(math.expm1(1.0 / scale / dims[i + 1]))
            self.mats.append(Parameter(f"{name}.H{i}", np.full((channels, dims[i + 1], dims[i]), init)))
            b = rng.uniform(-0.5, 0.5, (channels, dims[i + 1], 1)) if rng is not None else \
                np.zeros((channels, dims[i + 1], 1))
            self.biases.append(Parameter(f"{name}.b{i}", b))
            if i < len(dims) - 2:
                self.factors.append(Parameter(f"{name}.a{i}", np.zeros((channels, dims[i + 1], 1))))
        self._cache = None

    def params(self):
        out = []
        for i, (h, b) in enumerate(zip(self.mats, self.biases)):
            out += [h, b]
            if i < len(self.factors):
                out.append(self.factors[i])
        return out

    # -- monotone network

    def logits(self, t):
        """t: [C, M] -> logits [C, M] plus a cache for :meth:`logits_backward`."""
        x = t[:, None, :]
        cache = []
        for i, (h, b) in enumerate(zip(self.mats, self.biases)):
            hs = softplus(h.value)
            pre = hs @ x + b.value
            if i < len(self.factors):
                ta = np.tanh(self.factors[i].value)
                tp = np.tanh(pre)
                cache.append((x, hs, pre, ta, tp))
                x = pre + ta * tp
            else:
                cache.append((x, hs, pre, None, None))
                x = pre
        return x[:, 0, :], cache

    def logits_backward(self, g, cache):
        """Accumulate parameter grads; return d/dt. g: [C, M]."""
        gx = g[:, None, :]
        for i in reversed(range(len(self.mats))):
            x, hs, pre, ta, tp = cache[i]
            if ta is not None:
                self.factors[i].grad += (gx * tp).sum(axis=2, keepdims=True) * (1 - ta ** 2)
                gx = gx * (1 + ta * (1 - tp ** 2))
            h = self.mats[i]
            self.biases[i].grad += gx.sum(axis=2, keepdims=True)
            h.grad += (gx @ np.swapaxes(x, 1, 2)) * sigmoid(h.value)
            gx = np.swapaxes(hs, 1, 2) @ gx
        return gx[:, 0, :]

    def cdf(self, t):
        return sigmoid(self.logits(np.atleast_2d(t))[0])

    # -- tables

    def grid(self):
        s = self.support
        return np.arange(-s - 0.5, s + 1.0, 1.0)

    def pmf_table(self):
        """Floored, renormalized pmf [C, 2S+1] over the support."""
        c = self.cdf(np.broadcast_to(self.grid(), (self.channels, 2 * self.support + 2)))
        pm = np.diff(c, axis=1) / (c[:, -1:] - c[:, :1])
        return floored_pmf(pm)

    def cdf_tables(self):
        return pmf_to_cdf(self.pmf_table())

    # -- rates

    def _gather(self, y):
        """[N, K, h, w] with K a multiple of C -> [C, M] (model channel major)."""
        n, k = y.shape[:2]
        if k % self.channels:
            raise ValueError(f"latent has {k} channels, model has {self.channels}")
        r = y.reshape(n, k // self.channels, self.channels, -1)
        return np.ascontiguousarray(r.transpose(2, 0, 1, 3).reshape(self.channels, -1))

    def _scatter(self, g, shape):
        n, k = shape[:2]
        r = g.reshape(self.channels, n, k // self.channels, -1).transpose(1, 2, 0, 3)
        return np.ascontiguousarray(r).reshape(shape)

    def rate(self, symbols):
        """Information content in bits of integer ``symbols`` [N, K, h, w] or [K, h, w]."""
        s = np.asarray(symbols)
        if s.ndim == 3:
            s = s[None]
        if s.size and np.abs(s).max() > self.support:
            raise ValueError("symbol outside the model support; quantize must clamp first")
        table = self.pmf_table()
        idx = self._gather(s).astype(np.int64) + self.support
        rows = np.arange(self.channels)[:, None]
        return float(-np.log2(table[rows, idx]).sum())

    def rate_loss(self, y_tilde, y=None):
        """Differentiable bits of ``y_tilde`` [N, K, h, w]; see :meth:`backward`."""
        t = self._gather(y_tilde)
        grid = np.broadcast_to(self.grid(), (self.channels, 2 * self.support + 2))
        g_n, m = grid.shape[1], t.shape[1]
        pts = np.concatenate([grid, t - 0.5, t + 0.5], axis=1)
        logit, cache = self.logits(pts)
        c = sigmoid(logit)
        bits, grads = _rate_from_cdf(c[:, :g_n], c[:, g_n:g_n + m], c[:, g_n + m:])
        self._cache = (y_tilde.shape, g_n, m, c, cache, grads)
        return bits

    def backward(self, dbits=1.0):
        """Accumulate parameter grads; return d(bits)/d(y_tilde)."""
        if self._cache is None:
            raise RuntimeError("backward before forward in entropy model")
        shape, g_n, m, c, cache, grads = self._cache
        dg, dlo, dhi = grads(dbits)
        dc = np.concatenate([dg, dlo, dhi], axis=1)
        dpts = self.logits_backward(dc * c * (1 - c), cache)
        dt = dpts[:, g_n:g_n + m] + dpts[:, g_n + m:]
        return self._scatter(dt, shape), None

    # -- coding

    def table_index(self, k):
        return np.arange(k) % self.channels

    def compress(self, symbols):
        """symbols [K, h, w] -> (payload, side=b'')."""
        s = np.asarray(symbols, dtype=np.int64)
        tab = np.repeat(self.table_index(s.shape[0]), s[0].size)
        return encode_indices(s.ravel() + self.support, tab, self.cdf_tables()), b""

    def decompress(self, payload, side, shape):
        k = shape[0]
        n = int(np.prod(shape))
        tab = np.repeat(self.table_index(k), n // k if k else 0)
        idx = decode_indices(payload, tab, self.cdf_tables(), n)
        return idx.reshape(shape) - self.support


class TableEntropyModel:
    """Fixed pmf tables over ``[s_min, s_min + nsym)``, one row per channel.

    Not trainable; used for coder tests and as a frozen reference model.
    """

    def __init__(self, pmf, s_min=0):
        self.pmf = floored_pmf(np.atleast_2d(np.asarray(pmf, dtype=np.float64)))
        self.channels = self.pmf.shape[0]
        self.s_min = s_min
        self.nsym = self.pmf.shape[1]

    def params(self):
        return []

    def table_index(self, k):
        return np.arange(k) % self.channels

    def _index(self, symbols):
        s = np.asarray(symbols, dtype=np.int64)
        idx = s - self.s_min
        if s.size and (idx.min() < 0 or idx.max() >= self.nsym):
            raise ValueError("symbol outside the model support")
        return idx

    def rate(self, symbols):
        s = np.asarray(symbols)
        if s.ndim == 3:
            s = s[None]
        idx = self._index(s)
        rows = self.table_index(s.shape[1]).reshape(1, -1, *([1] * (s.ndim - 2)))
        return float(-np.log2(self.pmf[np.broadcast_to(rows, idx.shape), idx]).sum())

    def compress(self, symbols):
        s = np.asarray(symbols, dtype=np.int64)
        tab = np.repeat(self.table_index(s.shape[0]), s[0].size) if s.ndim else 0
        return encode_indices(self._index(s).ravel(), tab, pmf_to_cdf(self.pmf)), b""

    def decompress(self, payload, side, shape):
        n = int(np.prod(shape))
        k = shape[0] if len(shape) else 1
        tab = np.repeat(self.table_index(k), n // k if k else 0)
        return decode_indices(payload, tab, pmf_to_cdf(self.pmf), n).reshape(shape) + self.s_min


# ---------------------------------------------------------------------------
# Gaussian conditional + hyper-prior

SCALE_MIN = 0.11
SCALE_TABLE = np.exp(np.linspace(np.log(SCALE_MIN), np.log(64.0), 64))


def gaussian_pmf_table(scales, support=DEFAULT_SUPPORT):
    """Floored pmf [len(scales), 2S+1] of a zero-mean discretized Gaussian."""
    grid = np.arange(-support - 0.5, support + 1.0, 1.0)
    c = ndtr(grid[None, :] / np.asarray(scales)[:, None])
    pm = np.diff(c, axis=1) / (c[:, -1:] - c[:, :1])
    return floored_pmf(pm)


def scale_index(scales):
    mids = np.sqrt(SCALE_TABLE[1:] * SCALE_TABLE[:-1])
    return np.searchsorted(mids, scales)


def _npdf(x):
    return np.exp(-0.5 * x * x) / math.sqrt(2 * math.pi)


class HyperPrior:
    """Side-information model: ``z = ha(|y|)``, ``sigma = softplus(hs(z~)) + 0.11``."""

    def __init__(self, latent_channels, hyper_channels, support=DEFAULT_SUPPORT, rng=None,
                 name="P"):
        c, ch = latent_channels, hyper_channels
        self.channels = c
        self.support = support
        self.name = name
        self.ha = Sequential([
            Conv(c, ch, 3, rng=rng, name=f"{name}.ha0"), ReLU(),
            Conv(ch, ch, 3, 2, rng=rng, name=f"{name}.ha1"),
        ])
        self.hs = Sequential([
            ConvTranspose(ch, ch, 3, 2, rng=rng, name=f"{name}.hs0"), ReLU(),
            Conv(ch, c, 3, rng=rng, name=f"{name}.hs1"),
        ])
        self.z_model = FactorizedEntropyModel(ch, support, rng=rng, name=f"{name}.z")
        self.quant = StraightThrough("train", support)
        self._cache = None

    def params(self):
        return self.ha.params() + self.hs.params() + self.z_model.params()

    def table_index(self, k):
        return np.arange(k) % self.channels

    def _scales(self, z_tilde, hw):
        t = self.hs.forward(z_tilde)[:, :, :hw[0], :hw[1]]
        return softplus(t) + SCALE_MIN, t

    def rate_loss(self, y_tilde, y=None):
        y = y_tilde if y is None else y
        sign = np.sign(y)
        z = self.ha.forward(np.abs(y))
        z_tilde = self.quant.forward(z)
        bits_z = self.z_model.rate_loss(z_tilde)
        sigma, t = self._scales(z_tilde, y.shape[2:])
        s = self.support
        grid = np.arange(-s - 0.5, s + 1.0, 1.0)
        sg = sigma.reshape(-1, 1)
        yt = y_tilde.reshape(-1, 1)
        c_grid = ndtr(grid[None, :] / sg)
        c_lo = ndtr((yt - 0.5) / sg)
        c_hi = ndtr((yt + 0.5) / sg)
        # one "model row" per element
        bits_y, grads = _rate_from_cdf(c_grid, c_lo, c_hi)
        self._cache = (y_tilde.shape, sign, sigma, t, grid, yt, grads, z.shape)
        return bits_y + bits_z

    def backward(self, dbits=1.0):
        """Return (d/dy_tilde, d/dy) of the bits."""
        if self._cache is None:
            raise RuntimeError("backward before forward in entropy model")
        shape, sign, sigma, t, grid, yt, grads, zshape = self._cache
        sg = sigma.reshape(-1, 1)
        dg, dlo, dhi = grads(dbits)
        ulo, uhi, ugrid = (yt - 0.5) / sg, (yt + 0.5) / sg, grid[None, :] / sg
        dy_t = (dlo * _npdf(ulo) + dhi * _npdf(uhi)) / sg
        dsig = -((dlo * _npdf(ulo) * ulo + dhi * _npdf(uhi) * uhi).sum(axis=1, keepdims=True)
                 + (dg * _npdf(ugrid) * ugrid).sum(axis=1, keepdims=True)) / sg
        dt = dsig.reshape(shape) * sigmoid(t)
        full = np.zeros((shape[0], shape[1]) + tuple(2 * n for n in zshape[2:]))
        full[:, :, :shape[2], :shape[3]] = dt
        dz_tilde = self.hs.backward(full)
        dz_model, _ = self.z_model.backward(dbits)
        dz = self.quant.backward(dz_tilde + dz_model)
        dy = self.ha.backward(dz) * sign
        return dy_t.reshape(shape), dy

    def rate(self, symbols, y=None):
        """Information content (bits) of integer symbols incl. side information."""
        s = np.asarray(symbols, dtype=np.float64)
        if s.ndim == 3:
            s = s[None]
        return self.rate_loss(s, y)

    def _z_and_scales(self, y):
        z = quantize(self.ha.forward(np.abs(y)), "inference", self.support)
        sigma, _ = self._scales(z, y.shape[2:])
        return z, sigma

    def compress(self, symbols, y=None):
        s = np.asarray(symbols, dtype=np.int64)
        y = s[None].astype(np.float64) if y is None else y
        z, sigma = self._z_and_scales(y)
        z_sym = to_symbols(z[0])
        side, _ = self.z_model.compress(z_sym)
        tables = pmf_to_cdf(gaussian_pmf_table(SCALE_TABLE, self.support))
        tab = scale_index(sigma[0].ravel())
        payload = encode_indices(s.ravel() + self.support, tab, tables)
        return payload, side

    def decompress(self, payload, side, shape):
        zshape = (self.z_model.channels,) + tuple(-(-n // 2) for n in shape[1:])
        z = self.z_model.decompress(side, b"", zshape).astype(np.float64)[None]
        sigma, _ = self._scales(z, shape[1:])
        tables = pmf_to_cdf(gaussian_pmf_table(SCALE_TABLE, self.support))
        tab = scale_index(sigma[0].ravel())
        idx = decode_indices(payload, tab, tables, int(np.prod(shape)))
        return idx.reshape(shape) - self.support


# ---------------------------------------------------------------------------
# functional surface


def rate(model, symbols):
    """Bits of integer symbols under ``model`` (sum of -log2 pmf)."""
    return model.rate(symbols)


def model_rate_loss(model, y_tilde, y=None):
    return model.rate_loss(y_tilde, y)


def ae_encode(model, code: LatentCode | np.ndarray) -> bytes:
    """Arithmetic-code a latent with the (frozen) model; returns the payload."""
    symbols = code.symbols if isinstance(code, LatentCode) else np.asarray(code)
    payload, side = model.compress(symbols)
    if side:
        raise ValueError("model produces side information; use model.compress")
    return payload


def ad_decode(model, payload: bytes, shape) -> np.ndarray:
    return model.decompress(payload, b"", tuple(shape))
