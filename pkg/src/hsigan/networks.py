"""Encoder, generator and discriminator for the three model variants.

``opt``  plain 2D conv stack, bands as input channels (or band by band).
``se``   squeeze-and-excitation blocks at the sites selected by ``se_placement``.
``3d``   3D convolutions replacing the first encoder conv and the last
         generator conv (``first_and_last``), or the whole down/up path
         (``all``).

3D layers see the cube as a one-channel volume ``[1, B, H, W]``; the bridge to
the 2D part flattens ``[C, B, H, W]`` into ``C * B`` channels and back.
"""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields

import numpy as np

from .coding import DEFAULT_SUPPORT, FactorizedEntropyModel, HyperPrior
from .layers import (ChannelNorm, Conv, ConvTranspose, LeakyReLU, NNUpsample, ReLU, Reshape,
                     ResidualBlock, SEBlock, Sequential, sigmoid)
from .tensor import make_rng

VARIANTS = ("opt", "se", "3d")
SE_PLACEMENTS = ("encoder_initial", "encoder_all", "encoder_and_generator")
CONV3D_PLACEMENTS = ("first_and_last", "all")
ENCODER_WIDTHS = (60, 120, 240, 480, 960)
LATENT_WIDTH = 220
DISC_WIDTHS = (12, 64, 128, 256, 512)
N_RESIDUAL = 9
DOWNSCALE = 16


class ConfigError(ValueError):
    pass


def scaled(n: int, w: float) -> int:
    return max(1, int(math.floor(n * w + 0.5)))


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "opt"
    bands: int = 8
    width_scale: float = 0.25
    latent_channels: int | None = None
    se_placement: str | None = None
    conv3d_placement: str | None = None
    r_r: int = 2
    seed: int = 0
    band_by_band: bool = False
    entropy_model: str = "factorized"
    hyper_channels: int | None = None
    support: int = DEFAULT_SUPPORT

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.bands < 1:
            raise ConfigError("bands must be >= 1")
        if not 0 < self.width_scale <= 1:
            raise ConfigError("width_scale must be in (0, 1]")
        if self.variant == "se":
            if self.se_placement is None:
                object.__setattr__(self, "se_placement", "encoder_and_generator")
            if self.se_placement not in SE_PLACEMENTS:
                raise ConfigError(f"unknown se_placement {self.se_placement!r}")
        elif self.se_placement is not None:
            raise ConfigError("se_placement is only valid for the se variant")
        if self.variant == "3d":
            if self.conv3d_placement is None:
                object.__setattr__(self, "conv3d_placement", "first_and_last")
            if self.conv3d_placement not in CONV3D_PLACEMENTS:
                raise ConfigError(f"unknown conv3d_placement {self.conv3d_placement!r}")
            if self.band_by_band:
                raise ConfigError("band_by_band applies to 2D variants only")
        elif self.conv3d_placement is not None:
            raise ConfigError("conv3d_placement is only valid for the 3d variant")
        if self.latent_channels is None:
            object.__setattr__(self, "latent_channels", scaled(LATENT_WIDTH, self.width_scale))
        if self.entropy_model not in ("factorized", "hyperprior"):
            raise ConfigError(f"unknown entropy_model {self.entropy_model!r}")
        if self.entropy_model == "hyperprior" and self.hyper_channels is None:
            object.__setattr__(self, "hyper_channels", max(1, self.latent_channels // 2))
        if self.r_r < 1 or self.support < 1:
            raise ConfigError("r_r and support must be positive")

    def width(self, n):
        return scaled(n, self.width_scale)

    @property
    def image_channels(self):
        """Channels of one network input image (1 in band-by-band mode)."""
        return 1 if self.band_by_band else self.bands

    @property
    def code_channels(self):
        """Latent channels per cube as seen by the coder."""
        return self.latent_channels * (self.bands if self.band_by_band else 1)

    def canonical(self) -> bytes:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":")).encode()

    def digest(self) -> bytes:
        return hashlib.sha256(self.canonical()).digest()

    @classmethod
    def from_json(cls, data):
        d = json.loads(data) if isinstance(data, (bytes, str)) else dict(data)
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


# ---------------------------------------------------------------------------
# sub-networks


class Encoder(Sequential):
    pass


class Generator:
    """Head, outer skip over the residual stack, up-sampling tail."""

    def __init__(self, head, blocks, tail, name="G"):
        self.head = head
        self.blocks = blocks
        self.tail = tail
        self.name = name

    def params(self):
        return self.head.params() + self.blocks.params() + self.tail.params()

    def forward(self, y):
        h = self.head.forward(y)
        return self.tail.forward(h + self.blocks.forward(h))

    def backward(self, g):
        g = self.tail.backward(g)
        g = g + self.blocks.backward(g)
        return self.head.backward(g)

    @property
    def layers(self):
        return self.head.layers + self.blocks.layers + self.tail.layers


class Discriminator:
    """Conditional patch discriminator; ``forward`` returns logits ``[N,1,H/8,W/8]``."""

    def __init__(self, cond, body, name="D"):
        self.cond = cond
        self.body = body
        self.name = name
        self._split = None

    def params(self):
        return self.cond.params() + self.body.params()

    def forward(self, x, y):
        if y.shape[-1] * DOWNSCALE != x.shape[-1] or y.shape[-2] * DOWNSCALE != x.shape[-2]:
            raise ValueError(f"latent extent {y.shape[-2:]} x16 does not match image {x.shape[-2:]}")
        c = self.cond.forward(y)
        self._split = x.shape[1]
        return self.body.forward(np.concatenate([x, c], axis=1))

    def backward(self, g):
        if self._split is None:
            raise RuntimeError("backward before forward in discriminator")
        d = self.body.backward(g)
        dy = self.cond.backward(d[:, self._split:])
        return d[:, :self._split], dy

    @property
    def layers(self):
        return self.cond.layers + self.body.layers


def _stage(conv, cn_channels, se_site, cfg, rng, name):
    layers = [conv, ChannelNorm(cn_channels, name=f"{name}.cnorm")]
    if se_site:
        layers.append(SEBlock(cn_channels, cfg.r_r, rng=rng, name=f"{name}.se"))
    layers.append(ReLU())
    return layers


def build_encoder(cfg: ModelConfig, rng) -> Encoder:
    w = cfg.width
    b_in = cfg.image_channels
    se_after = cfg.variant == "se" and cfg.se_placement in ("encoder_all", "encoder_and_generator")
    layers = []
    if cfg.variant == "se":
        layers.append(SEBlock(b_in, cfg.r_r, rng=rng, name="E.se_in"))
    c0 = w(ENCODER_WIDTHS[0])
    if cfg.variant == "3d":
        layers += [Reshape("to_volume"), Conv(1, c0, 7, ndim=3, rng=rng, name="E.conv0")]
        if cfg.conv3d_placement == "first_and_last":
            layers += [Reshape("flatten"), ChannelNorm(c0 * cfg.bands, name="E.conv0.cnorm"), ReLU()]
            prev = c0 * cfg.bands
        else:
            layers += [ChannelNorm(c0, name="E.conv0.cnorm"), ReLU()]
            prev = c0
    else:
        layers += _stage(Conv(b_in, c0, 7, rng=rng, name="E.conv0"), c0, False, cfg, rng, "E.conv0")
        prev = c0
    vol = cfg.variant == "3d" and cfg.conv3d_placement == "all"
    for i, n in enumerate(ENCODER_WIDTHS[1:], start=1):
        c = w(n)
        name = f"E.conv{i}"
        if vol:
            conv = Conv(prev, c, 3, (1, 2, 2), ndim=3, rng=rng, name=name)
        else:
            conv = Conv(prev, c, 3, 2, rng=rng, name=name)
        layers += _stage(conv, c, se_after, cfg, rng, name)
        prev = c
    if vol:
        layers.append(Reshape("flatten"))
        prev *= cfg.bands
    lat = cfg.latent_channels
    layers += _stage(Conv(prev, lat, 3, rng=rng, name="E.conv5"), lat, False, cfg, rng, "E.conv5")
    return Encoder(layers, name="E")


def build_generator(cfg: ModelConfig, rng) -> Generator:
    w = cfg.width
    lat = cfg.latent_channels
    top = w(ENCODER_WIDTHS[-1])
    head = Sequential([
        ChannelNorm(lat, name="G.head.cnorm0"),
        Conv(lat, top, 3, rng=rng, name="G.head.conv"),
        ChannelNorm(top, name="G.head.cnorm1"),
    ], name="G.head")
    blocks = Sequential([ResidualBlock(top, rng=rng, name=f"G.res{i}") for i in range(N_RESIDUAL)],
                        name="G.res")
    se_site = cfg.variant == "se" and cfg.se_placement == "encoder_and_generator"
    widths = [w(n) for n in reversed(ENCODER_WIDTHS[:-1])]  # 480, 240, 120, 60
    b = cfg.bands
    tail = []
    prev = top
    if cfg.variant == "3d" and cfg.conv3d_placement == "all":
        c = widths[0]
        tail += _stage(ConvTranspose(prev, c * b, 3, 2, rng=rng, name="G.up0"), c * b, False, cfg,
                       rng, "G.up0")
        tail.append(Reshape("unflatten", depth=b))
        prev = c
        for i, c in enumerate(widths[1:], start=1):
            tail += _stage(ConvTranspose(prev, c, 3, (1, 2, 2), ndim=3, rng=rng, name=f"G.up{i}"),
                           c, False, cfg, rng, f"G.up{i}")
            prev = c
        tail += [Conv(prev, 1, 7, ndim=3, rng=rng, name="G.out"), Reshape("from_volume")]
    else:
        for i, c in enumerate(widths):
            last = i == len(widths) - 1
            out_c = c * b if (cfg.variant == "3d" and last) else c
            tail += _stage(ConvTranspose(prev, out_c, 3, 2, rng=rng, name=f"G.up{i}"), out_c,
                           se_site, cfg, rng, f"G.up{i}")
            prev = out_c
        if cfg.variant == "3d":
            c = widths[-1]
            tail += [Reshape("unflatten", depth=b), Conv(c, 1, 7, ndim=3, rng=rng, name="G.out"),
                     Reshape("from_volume")]
        else:
            tail.append(Conv(prev, cfg.image_channels, 7, rng=rng, name="G.out"))
    return Generator(head, blocks, Sequential(tail, name="G.tail"))


def build_discriminator(cfg: ModelConfig, rng) -> Discriminator:
    w = cfg.width
    c12, c64, c128, c256, c512 = (w(n) for n in DISC_WIDTHS)
    cond = Sequential([
        Conv(cfg.latent_channels, c12, 3, rng=rng, name="D.cond"),
        LeakyReLU(),
        NNUpsample(DOWNSCALE),
    ], name="D.cond")
    body = Sequential([
        Conv(cfg.image_channels + c12, c64, 4, 2, rng=rng, name="D.conv0"), LeakyReLU(),
        Conv(c64, c128, 4, 2, rng=rng, name="D.conv1"), LeakyReLU(),
        Conv(c128, c256, 4, 2, rng=rng, name="D.conv2"), LeakyReLU(),
        Conv(c256, c512, 4, 1, rng=rng, name="D.conv3"), LeakyReLU(),
        Conv(c512, 1, 1, rng=rng, name="D.out"),
    ], name="D.body")
    return Discriminator(cond, body)


def build_entropy_model(cfg: ModelConfig, rng):
    if cfg.entropy_model == "hyperprior":
        return HyperPrior(cfg.latent_channels, cfg.hyper_channels, cfg.support, rng=rng, name="P")
    return FactorizedEntropyModel(cfg.latent_channels, cfg.support, rng=rng, name="P")


# ---------------------------------------------------------------------------
# bundle


class ModelBundle:
    """E, G, D and the probability model P built from one config.

    Public methods take cubes ``[B, H, W]`` or batches ``[N, B, H, W]``;
    latents are ``[N, K, H/16, W/16]`` with ``K = config.code_channels``.
    """

    def __init__(self, config: ModelConfig, encoder, generator, discriminator, prob_model):
        self.config = config
        self.E = encoder
        self.G = generator
        self.D = discriminator
        self.P = prob_model
        self.registry = OrderedDict()
        for group in (self.E, self.G, self.D, self.P):
            for p in group.params():
                if p.id in self.registry:
                    raise ValueError(f"duplicate parameter id {p.id}")
                self.registry[p.id] = p

    # -- parameter groups

    def params(self):
        return list(self.registry.values())

    def egp_params(self):
        return self.E.params() + self.G.params() + self.P.params()

    def d_params(self):
        return self.D.params()

    def se_blocks(self):
        return [l for net in (self.E, self.G) for l in _walk(net.layers) if isinstance(l, SEBlock)]

    def se_fc_weights(self):
        return [p for blk in self.se_blocks() for p in blk.fc_weights()]

    def parameter_count(self):
        return int(sum(p.value.size for p in self.registry.values()))

    # -- shape helpers for band-by-band mode

    def _batched(self, x):
        x = np.asarray(x, dtype=np.float64)
        return (x[None], True) if x.ndim == 3 else (x, False)

    def _images(self, x):
        if self.config.band_by_band:
            n, b = x.shape[:2]
            return x.reshape(n * b, 1, *x.shape[2:])
        return x

    def _cubes(self, x, n):
        return x.reshape(n, -1, *x.shape[2:]) if self.config.band_by_band else x

    def _latent_images(self, y):
        if self.config.band_by_band:
            n = y.shape[0]
            return y.reshape(n * self.config.bands, self.config.latent_channels, *y.shape[2:])
        return y

    # -- forward / backward

    def encode(self, x):
        """Continuous latent (before quantization)."""
        x, single = self._batched(x)
        h, w = x.shape[-2:]
        if x.shape[1] != self.config.bands:
            raise ValueError(f"expected {self.config.bands} bands, got {x.shape[1]}")
        if h % DOWNSCALE or w % DOWNSCALE:
            raise ValueError(f"spatial extent {h}x{w} is not a multiple of {DOWNSCALE}; pad first")
        self._enc_n = x.shape[0]
        y = self._cubes(self.E.forward(self._images(x)), x.shape[0])
        return y[0] if single else y

    def encode_backward(self, g):
        return self._cubes(self.E.backward(self._latent_images(g)), g.shape[0])

    def generate(self, y):
        y, single = self._batched(y)
        if y.shape[1] != self.config.code_channels:
            raise ValueError(f"expected {self.config.code_channels} latent channels, got {y.shape[1]}")
        out = self._cubes(self.G.forward(self._latent_images(y)), y.shape[0])
        return out[0] if single else out

    def generate_backward(self, g):
        n = g.shape[0]
        return self._cubes_latent(self.G.backward(self._images(g)), n)

    def _cubes_latent(self, y, n):
        return y.reshape(n, -1, *y.shape[2:]) if self.config.band_by_band else y

    def discriminate_logits(self, x, y):
        x, single = self._batched(x)
        y = y[None] if single else y
        out = self.D.forward(self._images(x), self._latent_images(y))
        out = out.reshape(x.shape[0], -1, *out.shape[2:]) if self.config.band_by_band else out
        return out[0] if single else out

    def discriminate(self, x, y):
        """Per-patch probabilities in (0, 1)."""
        return sigmoid(self.discriminate_logits(x, y))

    def discriminate_backward(self, g):
        n = g.shape[0]
        if self.config.band_by_band:
            g = g.reshape(n * self.config.bands, 1, *g.shape[2:])
        dx, dy = self.D.backward(g)
        return self._cubes(dx, n), self._cubes_latent(dy, n)


def _walk(layers):
    for l in layers:
        if isinstance(l, Sequential):
            yield from _walk(l.layers)
        elif isinstance(l, ResidualBlock):
            yield from _walk(l.body.layers)
        else:
            yield l


def build(config: ModelConfig) -> ModelBundle:
    rng = make_rng(config.seed)
    enc = build_encoder(config, rng)
    gen = build_generator(config, rng)
    disc = build_discriminator(config, rng)
    prob = build_entropy_model(config, rng)
    return ModelBundle(config, enc, gen, disc, prob)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"HSSCCKPT"
CKPT_VERSION = 1
APPENDIX_MAGIC = b"TSTATE01"


class CheckpointError(ValueError):
    pass


def checkpoint_bytes(bundle: ModelBundle, appendix: bytes | None = None) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<H", CKPT_VERSION))
    cfg = bundle.config.canonical()
    buf.write(struct.pack("<I", len(cfg)))
    buf.write(cfg)
    buf.write(struct.pack("<I", len(bundle.registry)))
    for pid, p in bundle.registry.items():
        raw = pid.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.value.ndim))
        buf.write(struct.pack(f"<{p.value.ndim}I", *p.value.shape))
        buf.write(p.value.astype("<f4").tobytes())
    if appendix is not None:
        buf.write(APPENDIX_MAGIC)
        buf.write(struct.pack("<Q", len(appendix)))
        buf.write(appendix)
    return buf.getvalue()


def save_checkpoint(bundle: ModelBundle, path, appendix: bytes | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(bundle, appendix))


def _take(view, pos, n):
    if pos + n > len(view):
        raise CheckpointError("truncated checkpoint")
    return view[pos:pos + n], pos + n


def parse_checkpoint(data: bytes):
    """Return ``(bundle, appendix_or_None)``; parameters are the stored f32 values."""
    pos = 0
    magic, pos = _take(data, pos, 8)
    if magic != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    raw, pos = _take(data, pos, 2)
    (version,) = struct.unpack("<H", raw)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    raw, pos = _take(data, pos, 4)
    cfg_raw, pos = _take(data, pos, struct.unpack("<I", raw)[0])
    bundle = build(ModelConfig.from_json(cfg_raw))
    raw, pos = _take(data, pos, 4)
    (count,) = struct.unpack("<I", raw)
    if count != len(bundle.registry):
        raise CheckpointError("parameter count does not match the config")
    for expected_id, p in bundle.registry.items():
        raw, pos = _take(data, pos, 2)
        pid, pos = _take(data, pos, struct.unpack("<H", raw)[0])
        if pid.decode() != expected_id:
            raise CheckpointError(f"parameter {pid.decode()!r} where {expected_id!r} was expected")
        raw, pos = _take(data, pos, 1)
        ndim = raw[0]
        raw, pos = _take(data, pos, 4 * ndim)
        shape = struct.unpack(f"<{ndim}I", raw)
        if tuple(shape) != p.value.shape:
            raise CheckpointError(f"shape mismatch for {expected_id}")
        raw, pos = _take(data, pos, 4 * int(np.prod(shape)))
        p.value[...] = np.frombuffer(raw, dtype="<f4").reshape(shape)
    appendix = None
    if pos < len(data):
        magic, pos = _take(data, pos, 8)
        if magic != APPENDIX_MAGIC:
            raise CheckpointError("unknown trailing section in checkpoint")
        raw, pos = _take(data, pos, 8)
        appendix, pos = _take(data, pos, struct.unpack("<Q", raw)[0])
    return bundle, appendix


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())
