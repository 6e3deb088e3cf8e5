"""Whole-cube codec: pad, encode, quantize, entropy code, and the bitstream file.

File layout (little-endian)::

    "HSSC0001" | u16 version | 32-byte config digest | u32 B, H, W (original)
    | u8 pad_right | u8 pad_bottom | f32 offset | u64 payload bits | payload
    | u8 side flag | [u32 side bytes | side]
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coding import BitReader, Bitpacker, BitstreamError, HyperPrior, quantize, to_symbols
from .evalio import bpp, psnr, ssim, SSIM_WINDOW
from .networks import DOWNSCALE

MAGIC = b"HSSC0001"
VERSION = 1


class ModelMismatch(BitstreamError):
    pass


@dataclass
class Bitstream:
    digest: bytes
    shape: tuple
    pad_right: int
    pad_bottom: int
    offset: float
    payload: bytes
    side: bytes | None = None

    def to_bytes(self) -> bytes:
        bp = Bitpacker()
        bp.write_bytes(MAGIC)
        bp.write_u16(VERSION)
        bp.write_bytes(self.digest)
        for n in self.shape:
            bp.write_u32(n)
        bp.write_u8(self.pad_right)
        bp.write_u8(self.pad_bottom)
        bp.write_f32(self.offset)
        bp.write_u64(8 * len(self.payload))
        bp.write_bytes(self.payload)
        bp.write_u8(1 if self.side is not None else 0)
        if self.side is not None:
            bp.write_u32(len(self.side))
            bp.write_bytes(self.side)
        return bp.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes):
        rd = BitReader(data)
        if rd.read_bytes(8) != MAGIC:
            raise BitstreamError("not an HSSC bitstream (bad magic)")
        version = rd.read_u16()
        if version != VERSION:
            raise BitstreamError(f"unsupported bitstream version {version}")
        digest = rd.read_bytes(32)
        shape = (rd.read_u32(), rd.read_u32(), rd.read_u32())
        pad_right, pad_bottom = rd.read_u8(), rd.read_u8()
        offset = rd.read_f32()
        nbits = rd.read_u64()
        if nbits % 8:
            raise BitstreamError("payload length is not a whole number of bytes")
        payload = rd.read_bytes(nbits // 8)
        side = None
        if rd.read_u8():
            side = rd.read_bytes(rd.read_u32())
        if rd.remaining_bits:
            raise BitstreamError("trailing bytes after bitstream")
        return cls(digest, shape, pad_right, pad_bottom, offset, payload, side)


def pad_to_multiple(cube, m=DOWNSCALE):
    """Replicate-edge pad ``[B, H, W]`` on the right/bottom to multiples of ``m``."""
    _, h, w = cube.shape
    pb, pr = -h % m, -w % m
    if pb == 0 and pr == 0:
        return cube, 0, 0
    return np.pad(cube, ((0, 0), (0, pb), (0, pr)), mode="edge"), pr, pb


def latent_symbols(bundle, cube):
    """Encoder-side integer symbols ``[K, h, w]`` and the continuous latent."""
    cube = np.asarray(cube, dtype=np.float64)
    if cube.min() < 0.0 or cube.max() > 1.0:
        raise ValueError("cube values must lie in [0, 1]")
    padded, pr, pb = pad_to_multiple(cube)
    if max(pr, pb) > 255:
        raise ValueError("padding does not fit the header")
    y = bundle.encode(padded[None])
    sym = to_symbols(quantize(y, "inference", bundle.config.support))[0]
    return sym, y, pr, pb


def compress(bundle, cube) -> tuple[bytes, np.ndarray]:
    """Return the bitstream file bytes and the coded symbols."""
    cube = np.asarray(cube, dtype=np.float64)
    sym, y, pr, pb = latent_symbols(bundle, cube)
    if isinstance(bundle.P, HyperPrior):
        payload, side = bundle.P.compress(sym, y)
    else:
        payload, side = bundle.P.compress(sym)
        side = None
    bs = Bitstream(bundle.config.digest(), tuple(cube.shape), pr, pb, 0.0, payload, side)
    return bs.to_bytes(), sym


def decode_symbols(bundle, data: bytes):
    bs = Bitstream.from_bytes(data)
    if bs.digest != bundle.config.digest():
        raise ModelMismatch("model/bitstream mismatch")
    b, h, w = bs.shape
    if b != bundle.config.bands:
        raise ModelMismatch("model/bitstream mismatch")
    hp, wp = h + bs.pad_bottom, w + bs.pad_right
    if hp % DOWNSCALE or wp % DOWNSCALE:
        raise BitstreamError("corrupt header: padded extent is not a multiple of 16")
    shape = (bundle.config.code_channels, hp // DOWNSCALE, wp // DOWNSCALE)
    sym = bundle.P.decompress(bs.payload, bs.side or b"", shape)
    return sym, bs


def decompress(bundle, data: bytes) -> tuple[np.ndarray, np.ndarray]:
    """Return the reconstructed cube (cropped, clipped to [0, 1]) and the symbols."""
    sym, bs = decode_symbols(bundle, data)
    x_hat = bundle.generate(sym[None].astype(np.float64) + bs.offset)[0]
    b, h, w = bs.shape
    return np.clip(x_hat[:, :h, :w], 0.0, 1.0), sym


@dataclass
class RoundTrip:
    data: bytes
    recon: np.ndarray
    bpp: float
    psnr: float
    exact: bool
    ssim: float | None


def roundtrip(bundle, cube, bpp_mode="band_pixel"):
    cube = getattr(cube, "values", cube)
    data, _ = compress(bundle, cube)
    recon, _ = decompress(bundle, data)
    return measure(cube, recon, data, bpp_mode)


def measure(cube, recon, data, bpp_mode="band_pixel"):
    db, exact = psnr(cube, recon, return_exact=True)
    s = ssim(cube, recon) if min(cube.shape[1:]) >= SSIM_WINDOW else None
    return RoundTrip(data, recon, bpp(data, tuple(cube.shape), bpp_mode), db, exact, s)
