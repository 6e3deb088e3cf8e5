"""MSB-first bit packing for headers and side information."""
from __future__ import annotations

import struct

from .rangecoder import BitstreamError


class Bitpacker:
    def __init__(self):
        self._buf = bytearray()
        self._acc = 0
        self._nacc = 0
        self.bits_written = 0

    def write_bits(self, value: int, nbits: int) -> None:
        if value < 0 or value >= 1 << nbits:
            raise ValueError(f"value {value} does not fit in {nbits} bits")
        self._acc = (self._acc << nbits) | value
        self._nacc += nbits
        self.bits_written += nbits
        while self._nacc >= 8:
            self._nacc -= 8
            self._buf.append((self._acc >> self._nacc) & 0xFF)
        self._acc &= (1 << self._nacc) - 1

    def write_bytes(self, data: bytes) -> None:
        if self._nacc == 0:
            self._buf += data
            self.bits_written += 8 * len(data)
        else:
            for b in data:
                self.write_bits(b, 8)

    def write_u8(self, v):
        self.write_bits(v, 8)

    def write_u16(self, v):
        self.write_bytes(struct.pack("<H", v))

    def write_u32(self, v):
        self.write_bytes(struct.pack("<I", v))

    def write_u64(self, v):
        self.write_bytes(struct.pack("<Q", v))

    def write_f32(self, v):
        self.write_bytes(struct.pack("<f", v))

    def getvalue(self) -> bytes:
        """Bytes written so far, the last partial byte zero-padded."""
        out = bytes(self._buf)
        if self._nacc:
            out += bytes([(self._acc << (8 - self._nacc)) & 0xFF])
        return out


class BitReader:
    def __init__(self, data: bytes):
        self._data = bytes(data)
        self._pos = 0  # in bits
        self.bits_read = 0

    @property
    def remaining_bits(self):
        return 8 * len(self._data) - self._pos

    def read_bits(self, nbits: int) -> int:
        if nbits > self.remaining_bits:
            raise BitstreamError("bitstream underrun")
        v = 0
        for _ in range(nbits):
            byte = self._data[self._pos >> 3]
            v = (v << 1) | ((byte >> (7 - (self._pos & 7))) & 1)
            self._pos += 1
        self.bits_read += nbits
        return v

    def read_bytes(self, n: int) -> bytes:
        if 8 * n > self.remaining_bits:
            raise BitstreamError("bitstream underrun")
        if self._pos % 8 == 0:
            start = self._pos >> 3
            self._pos += 8 * n
            self.bits_read += 8 * n
            return self._data[start:start + n]
        return bytes(self.read_bits(8) for _ in range(n))

    def read_u8(self):
        return self.read_bits(8)

    def read_u16(self):
        return struct.unpack("<H", self.read_bytes(2))[0]

    def read_u32(self):
        return struct.unpack("<I", self.read_bytes(4))[0]

    def read_u64(self):
        return struct.unpack("<Q", self.read_bytes(8))[0]

    def read_f32(self):
        return struct.unpack("<f", self.read_bytes(4))[0]
