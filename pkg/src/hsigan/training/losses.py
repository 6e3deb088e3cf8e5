"""Distortion, rate-target controller and the two adversarial objectives."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..coding import StraightThrough
from ..evalio import ssim_and_grad
from ..layers import Conv, LeakyReLU, sigmoid, softplus
from ..tensor import ShapeError, make_rng, zero_grads

# target rate r_t -> lambda applied while the measured rate is above it
TARGET_LAMBDAS = {0.2: 2.0 ** 1, 0.4: 2.0 ** 0, 0.6: 2.0 ** -1, 0.8: 2.0 ** -2, 1.0: 2.0 ** -3}
PROXY_SEED = 20231105
PROXY_WIDTHS = (8, 16, 16)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, term, value):
        super().__init__(f"non-finite loss term {term!r}: {value}")
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    theta1: float = 0.15 * 2.0 ** -5
    theta2: float = 0.075 * 2.0 ** -3
    theta3: float = 1.0
    beta: float = 0.15
    lambda_a: dict = field(default_factory=lambda: dict(TARGET_LAMBDAS))
    lambda_b: float = 2.0 ** -6
    l1_se: float = 1e-5

    def __post_init__(self):
        scalars = dict(theta1=self.theta1, theta2=self.theta2, theta3=self.theta3,
                       beta=self.beta, lambda_b=self.lambda_b, l1_se=self.l1_se)
        for k, v in scalars.items():
            if not v >= 0:
                raise ValueError(f"{k} must be nonnegative, got {v}")
        keys = sorted(self.lambda_a)
        vals = [self.lambda_a[k] for k in keys]
        if not keys:
            raise ValueError("lambda_a table is empty")
        if any(b >= a for a, b in zip(vals, vals[1:])):
            raise ValueError("lambda_a must strictly decrease with the target rate")
        if min(vals) < 8 * self.lambda_b:
            raise ValueError("lambda_a must be at least 8x lambda_b")

    def with_lambda_a(self, r_t, lam):
        """Weights whose table maps only ``r_t`` to an explicit ``lam``."""
        return replace(self, lambda_a={float(r_t): float(lam)})


def _table_key(table, r_t):
    for k in table:
        if math.isclose(k, r_t, rel_tol=0, abs_tol=1e-9):
            return k
    keys = ", ".join(str(k) for k in sorted(table))
    raise KeyError(f"r_t={r_t} is not a target rate; choose one of {keys}")


def lambda_select(r, r_t, weights=None):
    """lambda_a(r_t) while the rate is strictly above the target, else lambda_b."""
    weights = weights or LossWeights()
    if not r >= 0:
        raise ValueError(f"rate must be nonnegative, got {r}")
    lam_a = weights.lambda_a[_table_key(weights.lambda_a, r_t)]
    return lam_a if r > r_t else weights.lambda_b


# ---------------------------------------------------------------------------
# distortion


class FeatureDistance:
    """Stand-in for a learned perceptual metric.

    Three frozen random conv layers; at each one the features are unit
    normalized across channels and the squared difference is averaged over
    positions. The weights come from a fixed seed, so every run sees the
    same extractor.
    """

    def __init__(self, bands, seed=PROXY_SEED, eps=1e-8):
        rng = make_rng(seed)
        chans = (bands,) + PROXY_WIDTHS
        self.eps = eps
        self.layers = []
        for i, (a, b) in enumerate(zip(chans, chans[1:])):
            self.layers.append(Conv(a, b, 3, 1 if i == 0 else 2, rng=rng, name=f"proxy{i}"))
            self.layers.append(LeakyReLU())

    def _features(self, x):
        feats = []
        h = x
        for i, layer in enumerate(self.layers):
            h = layer.forward(h)
            if i % 2:
                feats.append(h)
        return feats

    def _normalize(self, f):
        r = np.sqrt(np.sum(f * f, axis=1, keepdims=True) + self.eps)
        return f / r, r

    def __call__(self, x, y):
        return self.value_and_grad(x, y, need_grad=False)[0]

    def value_and_grad(self, x, y, need_grad=True):
        fx = [self._normalize(f)[0] for f in self._features(x)]
        fy = self._features(y)
        total, taps = 0.0, []
        for a, f in zip(fx, fy):
            b, r = self._normalize(f)
            count = f.shape[0] * f.shape[2] * f.shape[3]
            diff = b - a
            total += float(np.sum(diff * diff)) / count
            gn = 2 * diff / count
            taps.append((gn - b * np.sum(gn * b, axis=1, keepdims=True)) / r)
        if not need_grad:
            return total, None
        g = np.zeros_like(fy[-1])
        for i in range(len(self.layers) - 1, -1, -1):
            if i % 2:
                g = g + taps[i // 2]
            g = self.layers[i].backward(g)
        return total, g


_PROXIES = {}


def feature_proxy(bands):
    if bands not in _PROXIES:
        _PROXIES[bands] = FeatureDistance(bands)
    return _PROXIES[bands]


@dataclass
class DistortionTerms:
    value: float
    mse: float
    ssim: float
    proxy: float


def distortion(x, y, weights=None, need_grad=False):
    """theta1*MSE + theta2*(1 - SSIM) + theta3*feature distance of ``y`` vs ``x``.

    Inputs are cubes ``[B, H, W]`` or batches. Returns ``DistortionTerms`` and,
    with ``need_grad``, also d/dy.
    """
    weights = weights or LossWeights()
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    xb, yb = (x[None], y[None]) if x.ndim == 3 else (x, y)
    grad = np.zeros_like(yb)
    diff = yb - xb
    mse = float(np.mean(diff * diff))
    grad += weights.theta1 * 2 * diff / diff.size
    s = 1.0
    if weights.theta2 > 0:
        s, gs = ssim_and_grad(xb, yb)
        grad -= weights.theta2 * gs
    proxy = 0.0
    if weights.theta3 > 0:
        proxy, gp = feature_proxy(xb.shape[1]).value_and_grad(xb, yb, need_grad)
        if need_grad:
            grad += weights.theta3 * gp
    value = weights.theta1 * mse + weights.theta2 * (1 - s) + weights.theta3 * proxy
    terms = DistortionTerms(value, mse, s, proxy)
    if not need_grad:
        return terms
    return terms, grad.reshape(y.shape)


# ---------------------------------------------------------------------------
# objectives


@dataclass
class EgpLoss:
    total: float
    rate_bpp: float
    lam: float
    distortion: DistortionTerms
    adversarial: float
    se_l1: float
    saturated: int = 0


def _check(term, value):
    if not np.isfinite(value):
        raise NonFiniteLoss(term, value)
    return value


def rate_normalizer(x, mode):
    """Units of the rate term: pixels (H*W) or band-pixels (B*H*W), per cube."""
    n, b, h, w = x.shape
    if mode == "pixel":
        return n * h * w
    if mode == "band_pixel":
        return n * b * h * w
    raise ValueError(f"unknown rate mode {mode!r}")


def loss_egp(bundle, x, weights=None, r_t=None, lam=None, beta=None, quant_mode="train",
             rate_mode="pixel"):
    """Encoder/generator/probability-model objective; grads land on E, G and P.

    The batch mean of ``lam*rate + distortion - beta*log D(x', y) + l1*sum|SE fc|``.
    ``lam`` defaults to the controller value for the measured rate and
    ``r_t``; ``beta`` defaults to ``weights.beta`` (pass 0 for pretraining).
    Gradients also flow through the latent that conditions D; D parameters
    keep whatever gradient they held before the call.
    """
    weights = weights or LossWeights()
    beta = weights.beta if beta is None else beta
    x = np.asarray(x, dtype=np.float64)
    x = x[None] if x.ndim == 3 else x
    zero_grads(bundle.egp_params())

    quant = StraightThrough(quant_mode, bundle.config.support)
    y = bundle.encode(x)
    if not np.all(np.isfinite(y)):
        raise NonFiniteLoss("latent", "non-finite encoder output")
    y_t = quant.forward(y)
    bits = _check("rate", bundle.P.rate_loss(y_t, y))
    norm = rate_normalizer(x, rate_mode)
    rate_bpp = bits / norm
    if lam is None:
        if r_t is None:
            raise ValueError("give either a target rate r_t or an explicit lam")
        lam = lambda_select(rate_bpp, r_t, weights)
    x_hat = bundle.generate(y_t)
    dist, g_hat = distortion(x, x_hat, weights, need_grad=True)
    _check("distortion", dist.value)

    adv, dy_cond = 0.0, 0.0
    if beta > 0:
        saved = [p.grad.copy() for p in bundle.d_params()]
        logits = bundle.discriminate_logits(x_hat, y_t)
        adv = beta * float(np.mean(softplus(-logits)))
        _check("adversarial", adv)
        dx_hat, dy_cond = bundle.discriminate_backward(beta * (sigmoid(logits) - 1) / logits.size)
        g_hat = g_hat + dx_hat
        for p, g in zip(bundle.d_params(), saved):
            p.grad[...] = g

    se_w = bundle.se_fc_weights()
    se_l1 = weights.l1_se * sum(float(np.abs(p.value).sum()) for p in se_w)
    _check("se_l1", se_l1)

    total = _check("total", lam * rate_bpp + dist.value + adv + se_l1)

    dy_t = bundle.generate_backward(g_hat)
    dy_rate_t, dy_rate = bundle.P.backward(lam / norm)
    dy = quant.backward(dy_t + dy_rate_t + dy_cond)
    if dy_rate is not None:
        dy = dy + dy_rate
    bundle.encode_backward(dy)
    for p in se_w:
        p.grad += weights.l1_se * np.sign(p.value)
    return EgpLoss(total, rate_bpp, lam, dist, adv, se_l1, quant.stats.saturated)


def loss_d(bundle, x, quant_mode="train"):
    """Discriminator objective; grads land on D only.

    Mean over patches of -log(1 - D(x', y)) plus mean of -log D(x, y), with
    ``x'`` and the quantized latent treated as constants.
    """
    x = np.asarray(x, dtype=np.float64)
    x = x[None] if x.ndim == 3 else x
    zero_grads(bundle.d_params())
    y_t = StraightThrough(quant_mode, bundle.config.support).forward(bundle.encode(x))
    x_hat = bundle.generate(y_t)
    n = x.shape[0]
    logits = bundle.discriminate_logits(np.concatenate([x_hat, x]), np.concatenate([y_t, y_t]))
    fake, real = logits[:n], logits[n:]
    value = float(np.mean(softplus(fake)) + np.mean(softplus(-real)))
    _check("d_loss", value)
    g = np.concatenate([sigmoid(fake) / fake.size, (sigmoid(real) - 1) / real.size])
    bundle.discriminate_backward(g)
    return value
