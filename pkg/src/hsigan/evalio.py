"""Quality metrics, the synthetic cube generator, HSSC-RAW I/O and RD curves.

Cubes are ``[B, H, W]`` arrays in [0, 1]; batches add a leading axis.
"""
from __future__ import annotations

import csv
import io
import math
import struct
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.ndimage import gaussian_filter

from .tensor import ShapeError, make_rng

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03
SSIM_RANGE = 1.0
N_ENDMEMBERS = 4


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


# ---------------------------------------------------------------------------
# PSNR


def psnr(x, y, return_exact=False):
    """PSNR in dB with peak 1.0, MSE taken over all bands jointly.

    A perfect reconstruction is reported as ``PSNR_CAP``; with
    ``return_exact`` the result is ``(db, exact)``.
    """
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    exact = mse == 0.0
    db = PSNR_CAP if exact else min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))
    return (db, exact) if return_exact else db


# ---------------------------------------------------------------------------
# SSIM (differentiable in the second argument)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    k = np.arange(size) - (size - 1) / 2
    g = np.exp(-k ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter(a, g):
    """Separable 'valid' correlation over the last two axes."""
    k = len(g)
    h, w = a.shape[-2] - k + 1, a.shape[-1] - k + 1
    t = sum(g[i] * a[..., i:i + h, :] for i in range(k))
    return sum(g[j] * t[..., :, j:j + w] for j in range(k))


def _filter_adjoint(d, g, shape):
    k = len(g)
    h, w = d.shape[-2], d.shape[-1]
    t = np.zeros(d.shape[:-1] + (shape[-1],))
    for j in range(k):
        t[..., :, j:j + w] += g[j] * d
    out = np.zeros(shape)
    for i in range(k):
        out[..., i:i + h, :] += g[i] * t
    return out


def _ssim_terms(x, y):
    if x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"image {x.shape[-2]}x{x.shape[-1]} is smaller than the "
                         f"{SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    g = gaussian_window()
    c1, c2 = (SSIM_K1 * SSIM_RANGE) ** 2, (SSIM_K2 * SSIM_RANGE) ** 2
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    a1, a2 = 2 * mx * my + c1, 2 * sxy + c2
    b1, b2 = mx * mx + my * my + c1, sxx + syy + c2
    return g, mx, my, a1, a2, b1, b2


def ssim(x, y):
    """Mean single-scale SSIM, per band with an 11x11 Gaussian window, averaged."""
    x, y = _pair(x, y)
    _, _, _, a1, a2, b1, b2 = _ssim_terms(x, y)
    return float(np.mean(a1 * a2 / (b1 * b2)))


def ssim_and_grad(x, y):
    """SSIM and its gradient with respect to ``y``."""
    x, y = _pair(x, y)
    g, mx, my, a1, a2, b1, b2 = _ssim_terms(x, y)
    s = a1 * a2 / (b1 * b2)
    w = 1.0 / s.size
    d_my = w * ((2 * mx * a2 - 2 * mx * a1) / (b1 * b2) - s * (2 * my / b1 - 2 * my / b2))
    d_fxy = w * 2 * a1 / (b1 * b2)
    d_fyy = w * -s / b2
    grad = (_filter_adjoint(d_my, g, y.shape) + x * _filter_adjoint(d_fxy, g, y.shape)
            + 2 * y * _filter_adjoint(d_fyy, g, y.shape))
    return float(np.mean(s)), grad


# ---------------------------------------------------------------------------
# bits per pixel


def bpp(bitstream, shape, mode="band_pixel"):
    """Bits of ``bitstream`` (bytes or a bit count) per band-pixel of a cube.

    ``shape`` is the ``(B, H, W)`` of the original cube (or the cube itself).
    ``mode="pixel"`` divides by ``H * W`` only.
    """
    bits = 8 * len(bitstream) if isinstance(bitstream, (bytes, bytearray)) else int(bitstream)
    if isinstance(shape, HsiCube):
        shape = shape.shape
    b, h, w = shape if isinstance(shape, tuple) else np.shape(shape)
    if mode == "band_pixel":
        return bits / (b * h * w)
    if mode == "pixel":
        return bits / (h * w)
    raise ValueError(f"unknown bpp mode {mode!r}")


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class HsiCube:
    values: np.ndarray
    wavelengths: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or min(self.values.shape) < 1:
            raise ShapeError(f"cube must be [B, H, W] with B, H, W >= 1, got {self.values.shape}")

    @property
    def shape(self):
        return self.values.shape


@dataclass
class Split:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def as_dict(self):
        return {"train": self.train.tolist(), "val": self.val.tolist(), "test": self.test.tolist()}


def split_indices(n, rng):
    order = rng.permutation(n)
    a, b = int(0.8 * n), int(0.1 * n)
    return Split(np.sort(order[:a]), np.sort(order[a:a + b]), np.sort(order[a + b:]))


def synth_endmembers(bands, rng, knots=None):
    """Smooth nonnegative spectra: cubic splines through random knots.

    The knot count grows slowly with the band count so that coarse cubes
    stay spectrally smooth.
    """
    knots = knots or int(np.clip(bands // 12 + 2, 3, 8))
    t = np.linspace(0.0, 1.0, knots)
    grid = np.linspace(0.0, 1.0, bands)
    curves = [CubicSpline(t, rng.uniform(0.1, 1.0, knots))(grid) for _ in range(N_ENDMEMBERS)]
    return np.clip(np.stack(curves), 0.0, None)


def synth_abundances(h, w, rng):
    """Spatially smooth abundance maps summing to one at every pixel."""
    noise = rng.standard_normal((N_ENDMEMBERS, h, w))
    smooth = gaussian_filter(noise, sigma=(0, max(h, w) / 8, max(h, w) / 8), mode="wrap")
    smooth /= smooth.std() + 1e-12
    e = np.exp(2.0 * smooth)
    return e / e.sum(axis=0)


def synth_shading(h, w, rng):
    """Smooth positive illumination field shared by all bands."""
    noise = gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 6, mode="wrap")
    return np.exp(0.8 * noise / (noise.std() + 1e-12))


def synth_dataset(n, bands, height, width, seed):
    """Shaded linear-mixture cubes rescaled to [0, 1] plus an 80/10/10 split."""
    if n < 10:
        raise ValueError(f"synth_dataset needs n >= 10, got {n}")
    rng = make_rng(seed)
    ends = synth_endmembers(bands, rng)
    cubes = []
    for _ in range(n):
        ab = synth_abundances(height, width, rng)
        c = np.tensordot(ends, ab, axes=(0, 0)) * synth_shading(height, width, rng)
        lo, hi = c.min(), c.max()
        c = (c - lo) / (hi - lo) if hi > lo else np.zeros_like(c)
        cubes.append(HsiCube(c, wavelengths=np.linspace(400.0, 1000.0, bands)))
    return cubes, split_indices(n, rng)


# ---------------------------------------------------------------------------
# HSSC-RAW cube files

RAW_MAGIC = b"HSSCRAW1"
RAW_HEADER = struct.Struct("<8s3IB")
DTYPE_F32 = 0


class CubeFormatError(ValueError):
    pass


def cube_bytes(cube) -> bytes:
    v = cube.values if isinstance(cube, HsiCube) else np.asarray(cube)
    if v.ndim != 3:
        raise ShapeError(f"cube must be [B, H, W], got {v.shape}")
    return RAW_HEADER.pack(RAW_MAGIC, *v.shape, DTYPE_F32) + v.astype("<f4").tobytes()


def write_cube(path, cube) -> None:
    with open(path, "wb") as fh:
        fh.write(cube_bytes(cube))


def parse_cube(data: bytes, clamp=False) -> HsiCube:
    if len(data) < RAW_HEADER.size:
        raise CubeFormatError("truncated header")
    magic, b, h, w, dtype = RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise CubeFormatError("bad magic: not an HSSC-RAW cube")
    if dtype != DTYPE_F32:
        raise CubeFormatError(f"unsupported dtype tag {dtype}")
    if min(b, h, w) < 1:
        raise CubeFormatError(f"invalid cube extent {b}x{h}x{w}")
    need = 4 * b * h * w
    payload = data[RAW_HEADER.size:]
    if len(payload) < need:
        raise CubeFormatError("payload underrun")
    if len(payload) > need:
        raise CubeFormatError("trailing bytes after payload")
    v = np.frombuffer(payload, dtype="<f4").reshape(b, h, w).astype(np.float64)
    if not np.all(np.isfinite(v)):
        raise CubeFormatError("cube contains non-finite values")
    if v.min() < 0.0 or v.max() > 1.0:
        if not clamp:
            raise CubeFormatError("cube values outside [0, 1]")
        warnings.warn("cube values outside [0, 1] were clamped")
        v = np.clip(v, 0.0, 1.0)
    return HsiCube(v)


def read_cube(path, clamp=False) -> HsiCube:
    with open(path, "rb") as fh:
        return parse_cube(fh.read(), clamp=clamp)


# ---------------------------------------------------------------------------
# rate-distortion curves

RD_HEADER = ["variant", "r_t", "bpp", "psnr_db", "ssim"]


@dataclass
class RdPoint:
    variant: str
    r_t: float
    bpp: float
    psnr_db: float
    ssim: float

    def __post_init__(self):
        if self.bpp < 0:
            raise ValueError("bpp must be nonnegative")
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError("ssim outside [-1, 1]")


@dataclass
class RdCurve:
    points: list
    non_monotone: list = field(default_factory=list)

    def to_csv(self) -> str:
        out = io.StringIO()
        wr = csv.writer(out, lineterminator="\n")
        wr.writerow(RD_HEADER)
        for p in self.points:
            wr.writerow([p.variant, repr(p.r_t), repr(p.bpp), repr(p.psnr_db), repr(p.ssim)])
        return out.getvalue()


def rd_from_points(points):
    """Sort by bpp and flag segments where PSNR drops as bpp grows (per variant)."""
    seen = set()
    for p in points:
        key = (p.variant, p.r_t)
        if key in seen:
            raise ValueError(f"duplicate r_t {p.r_t} for variant {p.variant}")
        seen.add(key)
    pts = sorted(points, key=lambda p: (p.bpp, p.variant, p.r_t))
    flags = []
    last = {}
    for p in pts:
        prev = last.get(p.variant)
        if prev is not None and p.psnr_db < prev.psnr_db:
            flags.append((p.variant, prev.r_t, p.r_t))
        last[p.variant] = p
    return RdCurve(pts, flags)


def rd_curve(models, cubes):
    """One RdPoint per ``(variant, r_t, bundle)`` averaged over ``cubes``."""
    from .codec import roundtrip

    keys = [(v, r) for v, r, _ in models]
    if len(set(keys)) != len(keys):
        raise ValueError("duplicate r_t entries")
    points = []
    for variant, r_t, bundle in models:
        rows = [roundtrip(bundle, c) for c in cubes]
        points.append(RdPoint(variant, float(r_t), float(np.mean([r.bpp for r in rows])),
                              float(np.mean([r.psnr for r in rows])),
                              float(np.mean([r.ssim for r in rows]))))
    return rd_from_points(points)
