"""Mu-law companded b-bit quantization of latent feedback vectors.

The compander gives fine resolution near zero; the index grid is uniform
mid-rise in the companded domain with cell-center reconstruction. Packing is
MSB-first with zero padding to a byte boundary.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .errors import InvalidConfig, MalformedBitstream

DEFAULT_MU = 255.0

_WIRE_HEADER = struct.Struct("<BI")  # u8 bits, u32 symbol count


@dataclass(frozen=True)
class QuantizerConfig:
    mu: float = DEFAULT_MU
    bits: int = 5

    def __post_init__(self):
        if self.mu <= 0:
            raise InvalidConfig(f"mu must be > 0, got {self.mu}")
        if not 1 <= self.bits <= 16:
            raise InvalidConfig(f"bits must be in [1, 16], got {self.bits}")

    @property
    def levels(self):
        return 1 << self.bits


@dataclass
class Bitstream:
    """Packed feedback payload for one latent vector."""

    payload: bytes
    bits_per_symbol: int
    symbol_count: int

    @property
    def bit_length(self):
        return self.bits_per_symbol * self.symbol_count

    def to_bytes(self):
        return _WIRE_HEADER.pack(self.bits_per_symbol, self.symbol_count) + self.payload

    @classmethod
    def from_bytes(cls, blob):
        if len(blob) < _WIRE_HEADER.size:
            raise MalformedBitstream("bitstream shorter than its header")
        bits, count = _WIRE_HEADER.unpack_from(blob)
        payload = blob[_WIRE_HEADER.size:]
        expected = (bits * count + 7) // 8
        if len(payload) != expected:
            raise MalformedBitstream(
                f"payload is {len(payload)} bytes, expected {expected} for {count}x{bits} bits")
        return cls(payload=payload, bits_per_symbol=bits, symbol_count=count)


def mu_compress(x, mu=DEFAULT_MU):
    """F(x) = sgn(x) * ln(1 + mu|x|) / ln(1 + mu); odd, strictly increasing."""
    x = np.asarray(x, dtype=np.float64)
    y = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)
    return y if y.ndim else float(y)


def mu_expand(y, mu=DEFAULT_MU):
    """Inverse compander: sgn(y) * ((1 + mu)^|y| - 1) / mu."""
    y = np.asarray(y, dtype=np.float64)
    x = np.sign(y) * (np.expm1(np.abs(y) * np.log1p(mu))) / mu
    return x if x.ndim else float(x)


def quantize_indices(v, cfg):
    """Clamp to [-1, 1], compand, map to mid-rise cell indices in [0, 2^b)."""
    v = np.clip(np.asarray(v, dtype=np.float64), -1.0, 1.0)
    y = mu_compress(v, cfg.mu)
    q = np.floor((np.asarray(y) + 1.0) * 0.5 * cfg.levels).astype(np.int64)
    return np.clip(q, 0, cfg.levels - 1)


def indices_to_values(q, cfg):
    """Cell centers in the companded domain, then expanded."""
    q = np.asarray(q, dtype=np.float64)
    y = (q + 0.5) / (cfg.levels / 2.0) - 1.0
    return np.asarray(mu_expand(y, cfg.mu))


def pack_indices(q, bits):
    """Pack integer symbols MSB-first into bytes, zero-padded at the tail."""
    q = np.asarray(q, dtype=np.int64)
    shifts = np.arange(bits - 1, -1, -1)
    bit_matrix = ((q[:, None] >> shifts[None, :]) & 1).astype(np.uint8)
    return np.packbits(bit_matrix.reshape(-1), bitorder="big").tobytes()


def unpack_indices(payload, bits, count):
    bit_len = bits * count
    raw = np.frombuffer(payload, dtype=np.uint8)
    all_bits = np.unpackbits(raw, bitorder="big")
    if all_bits.size < bit_len:
        raise MalformedBitstream("payload holds fewer bits than declared")
    weights = 1 << np.arange(bits - 1, -1, -1, dtype=np.int64)
    return all_bits[:bit_len].reshape(count, bits).astype(np.int64) @ weights


def quantize_vector(v, cfg):
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    q = quantize_indices(v, cfg)
    return Bitstream(payload=pack_indices(q, cfg.bits),
                     bits_per_symbol=cfg.bits, symbol_count=v.size)


def dequantize_vector(bitstream, cfg):
    if bitstream.bits_per_symbol != cfg.bits:
        raise MalformedBitstream(
            f"bitstream carries {bitstream.bits_per_symbol}-bit symbols, config expects {cfg.bits}")
    expected = (bitstream.bit_length + 7) // 8
    if len(bitstream.payload) != expected:
        raise MalformedBitstream(
            f"payload is {len(bitstream.payload)} bytes, expected {expected}")
    q = unpack_indices(bitstream.payload, cfg.bits, bitstream.symbol_count)
    return indices_to_values(q, cfg)


def ste_quantize(v, cfg):
    """Quantize-dequantize with a clipped straight-through gradient.

    Forward matches the hard pipeline bit-exactly; backward passes the
    gradient unchanged where |v| <= 1 and zero outside.
    """
    values = indices_to_values(quantize_indices(v.values, cfg), cfg)
    mask = (np.abs(v.values) <= 1.0).astype(np.float64)

    def bw(g):
        return (g * mask,)

    return autodiff.record_op(values.reshape(v.shape), (v,), bw)
