"""BBFP and BFP block formats: configuration, bit-exact encode/decode, packing.

Scalars enter through a *source float* model: 1 sign bit, an ``e``-bit biased
exponent and an 11-bit significand ``M`` whose implicit leading one sits at
bit 11 (bits are numbered 11..1 from the MSB).  With ``e = 5`` this is FP16
without subnormals or specials.

A BBFP(m, o) element stores ``(sign, flag, m')``.  Against the block's shared
exponent ``e_s`` an element with source exponent ``e_i`` is aligned as::

    e_i >  e_s : flag=1, m' = bits [11+(m-o) .. 12-o] of (M << (e_i - e_s))
    e_i <= e_s : flag=0, m' = bits [11 .. 12-m]       of (M >> (e_s - e_i))

and represents ``(-1)^s * m' * 2^(1-m) * f * 2^(e_s - bias)`` with
``f = 2^(m-o)`` when the flag is set and 1 otherwise.

All routines are vectorised: a block is the last axis of an array and any
leading axes are a batch of independent blocks.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .errors import BbfpError, ConfigMismatch, EmptyBlock, NonFiniteInput, TruncatedPayload

__all__ = [
    "Rounding",
    "BbfpConfig",
    "BbfpElement",
    "BbfpBlock",
    "BfpBlock",
    "SOURCE_MANTISSA_BITS",
    "to_source",
    "select_shared_exponent",
    "encode_block",
    "decode_block",
    "encode_block_bfp",
    "decode_block_bfp",
    "quantize",
    "split_blocks",
    "pack_blocks",
    "unpack_blocks",
]

SOURCE_MANTISSA_BITS = 11
_MAX_SHIFT = 62


class Rounding(enum.Enum):
    TRUNCATE = "truncate"
    NEAREST_EVEN = "rne"

    @classmethod
    def parse(cls, value):
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower()
        aliases = {"truncate": cls.TRUNCATE, "trunc": cls.TRUNCATE, "clip": cls.TRUNCATE,
                   "rne": cls.NEAREST_EVEN, "nearest": cls.NEAREST_EVEN,
                   "nearest_even": cls.NEAREST_EVEN}
        try:
            return aliases[key]
        except KeyError:
            raise ValueError(f"unknown rounding mode {value!r}") from None


_ROUNDING_CODES = {Rounding.TRUNCATE: 0, Rounding.NEAREST_EVEN: 1}


@dataclass(frozen=True)
class BbfpConfig:
    """Parameters of one BBFP variant.

    ``overlap_bits = 0`` is accepted as the degenerate variant whose two
    mantissa windows do not overlap; the overlap tuner scores it.
    """

    mantissa_bits: int
    overlap_bits: int
    exponent_bits: int = 5
    block_size: int = 32
    rounding: Rounding = Rounding.TRUNCATE

    def __post_init__(self):
        m, o = self.mantissa_bits, self.overlap_bits
        if not (0 <= o < m <= SOURCE_MANTISSA_BITS):
            raise BbfpError(f"need 0 <= o < m <= 11, got m={m}, o={o}")
        if not 1 <= self.exponent_bits <= 8:
            raise BbfpError(f"exponent_bits must be in [1, 8], got {self.exponent_bits}")
        if self.block_size < 1:
            raise BbfpError(f"block_size must be >= 1, got {self.block_size}")
        object.__setattr__(self, "rounding", Rounding.parse(self.rounding))

    @property
    def m(self) -> int:
        return self.mantissa_bits

    @property
    def o(self) -> int:
        return self.overlap_bits

    @property
    def bias(self) -> int:
        return 2 ** (self.exponent_bits - 1) - 1

    @property
    def shift_span(self) -> int:
        """Exponent distance between the two windows, ``m - o``."""
        return self.mantissa_bits - self.overlap_bits

    @property
    def max_exponent(self) -> int:
        return 2 ** self.exponent_bits - 1

    @property
    def max_mantissa(self) -> int:
        return 2 ** self.mantissa_bits - 1

    def replace(self, **changes) -> "BbfpConfig":
        return replace(self, **changes)

    def __str__(self):
        return f"BBFP({self.mantissa_bits},{self.overlap_bits})"


class BbfpElement(NamedTuple):
    sign: int
    flag: int
    mantissa: int


def _as_block_array(x):
    return np.asarray(x, dtype=np.int64)


@dataclass(frozen=True, eq=False)
class BbfpBlock:
    """One block, or a batch of blocks along leading axes.

    ``shared_exponent`` is biased and has the batch shape; the element fields
    have shape ``batch + (N,)``.
    """

    shared_exponent: np.ndarray
    sign: np.ndarray
    flag: np.ndarray
    mantissa: np.ndarray
    cfg: BbfpConfig

    def __post_init__(self):
        for name in ("shared_exponent", "sign", "flag", "mantissa"):
            object.__setattr__(self, name, _as_block_array(getattr(self, name)))
        if self.mantissa.shape[-1:] != (self.cfg.block_size,):
            raise BbfpError(
                f"block holds {self.mantissa.shape[-1:]} elements, config expects {self.cfg.block_size}"
            )

    @property
    def batch_shape(self):
        return self.shared_exponent.shape

    def __len__(self):
        return self.mantissa.shape[-1]

    def __getitem__(self, idx):
        return BbfpBlock(self.shared_exponent[idx], self.sign[idx], self.flag[idx],
                         self.mantissa[idx], self.cfg)

    @property
    def elements(self):
        if self.batch_shape:
            raise BbfpError("elements is defined for a single block only")
        return [BbfpElement(int(s), int(f), int(m))
                for s, f, m in zip(self.sign, self.flag, self.mantissa)]

    @property
    def effective_exponent(self):
        """Unbiased exponent of each element's grid, flag shift included."""
        es = self.shared_exponent[..., None] - self.cfg.bias
        return es + self.flag * self.cfg.shift_span

    def __eq__(self, other):
        if not isinstance(other, BbfpBlock):
            return NotImplemented
        return (self.cfg == other.cfg
                and np.array_equal(self.shared_exponent, other.shared_exponent)
                and np.array_equal(self.sign, other.sign)
                and np.array_equal(self.flag, other.flag)
                and np.array_equal(self.mantissa, other.mantissa))


@dataclass(frozen=True, eq=False)
class BfpBlock:
    shared_exponent: np.ndarray
    sign: np.ndarray
    mantissa: np.ndarray
    cfg: BbfpConfig

    def __post_init__(self):
        for name in ("shared_exponent", "sign", "mantissa"):
            object.__setattr__(self, name, _as_block_array(getattr(self, name)))

    @property
    def batch_shape(self):
        return self.shared_exponent.shape

    def __len__(self):
        return self.mantissa.shape[-1]


def to_source(values, exponent_bits=5):
    """Split floats into ``(sign, biased_exponent, M)`` integer arrays.

    The significand is rounded to 11 bits (nearest-even).  Results below the
    smallest normal are flushed to a signed zero with exponent 0 and M = 0.
    """
    x = np.asarray(values, dtype=np.float64)
    bad = ~np.isfinite(x)
    if bad.any():
        raise NonFiniteInput(index=int(np.flatnonzero(bad.ravel())[0]))
    bias = 2 ** (exponent_bits - 1) - 1
    sign = np.signbit(x).astype(np.int64)
    frac, exp = np.frexp(np.abs(x))
    mant = np.rint(frac * 2.0 ** SOURCE_MANTISSA_BITS).astype(np.int64)
    exp = exp.astype(np.int64)
    carry = mant == 2 ** SOURCE_MANTISSA_BITS
    mant = np.where(carry, 2 ** (SOURCE_MANTISSA_BITS - 1), mant)
    biased = exp + carry - 1 + bias
    over = biased > 2 ** exponent_bits - 1
    if over.any():
        raise NonFiniteInput(
            f"value out of source range at index {int(np.flatnonzero(over.ravel())[0])}",
        )
    tiny = (biased < 1) | (mant == 0)
    mant = np.where(tiny, 0, mant)
    biased = np.where(tiny, 0, biased)
    return sign, biased, mant


def _round_shift(x, k, rounding):
    """``x >> k`` for non-negative int64 arrays with the requested rounding."""
    k = np.minimum(np.asarray(k, dtype=np.int64), _MAX_SHIFT)
    q = x >> k
    if rounding is Rounding.TRUNCATE:
        return q
    rem = x - (q << k)
    half = np.where(k > 0, np.left_shift(1, np.maximum(k - 1, 0)), 0)
    up = (k > 0) & ((rem > half) | ((rem == half) & ((q & 1) == 1)))
    return q + up


def _shared_exponents(exponents, cfg, offset):
    exponents = np.asarray(exponents, dtype=np.int64)
    if exponents.shape[-1] == 0:
        raise EmptyBlock("EmptyBlock")
    k = cfg.shift_span if offset is None else int(offset)
    return np.clip(exponents.max(axis=-1) - k, 0, cfg.max_exponent)


def select_shared_exponent(exponents, cfg, offset=None):
    """Shared exponent ``clamp(max(E) - (m - o), 0, 2^e - 1)``.

    ``offset`` replaces ``m - o`` to realise the alternative ``max - k``
    strategies.  Accepts a 1-D list (returns an int) or a batch array.
    """
    exponents = np.asarray(exponents, dtype=np.int64)
    if exponents.ndim == 0 or exponents.shape[-1] == 0:
        raise EmptyBlock("EmptyBlock")
    if ((exponents < 0) | (exponents > cfg.max_exponent)).any():
        raise BbfpError(f"exponents must lie in [0, {cfg.max_exponent}]")
    out = _shared_exponents(exponents, cfg, offset)
    return int(out) if out.ndim == 0 else out


def _align(sign, exp, mant, shared, cfg):
    """Place each source significand in the flag-0 or flag-1 window."""
    m, o, span = cfg.m, cfg.o, cfg.shift_span
    shared = shared[..., None]
    flag = (exp > shared).astype(np.int64)
    delta = np.abs(exp - shared)

    low = _round_shift(mant, delta + (SOURCE_MANTISSA_BITS - m), cfg.rounding)
    # delta > m - o only happens when the shared exponent sits more than m - o
    # below the maximum; such elements saturate.
    high = _round_shift(mant << np.minimum(delta, span), SOURCE_MANTISSA_BITS - o, cfg.rounding)
    high = np.where(delta > span, cfg.max_mantissa, high)

    mantissa = np.minimum(np.where(flag == 1, high, low), cfg.max_mantissa)
    return flag, mantissa


def _check_block_shape(x, cfg):
    if x.ndim == 0 or x.shape[-1] == 0:
        raise EmptyBlock("EmptyBlock")
    if x.shape[-1] != cfg.block_size:
        raise BbfpError(f"expected blocks of {cfg.block_size} values, got {x.shape[-1]}")


def encode_block(values, cfg, offset=None, shared_exponent=None):
    """Encode ``values`` (shape ``(..., N)``) into BBFP.

    ``offset`` selects ``E_shared = max - offset`` instead of ``max - (m - o)``;
    ``shared_exponent`` (biased) forces the shared exponent outright.
    """
    x = np.asarray(values, dtype=np.float64)
    _check_block_shape(x, cfg)
    sign, exp, mant = to_source(x, cfg.exponent_bits)
    if shared_exponent is None:
        shared = _shared_exponents(exp, cfg, offset)
    else:
        shared = np.broadcast_to(np.asarray(shared_exponent, dtype=np.int64), x.shape[:-1]).copy()
        if ((shared < 0) | (shared > cfg.max_exponent)).any():
            raise BbfpError("forced shared exponent out of range")
    flag, mantissa = _align(sign, exp, mant, shared, cfg)
    return BbfpBlock(shared, sign, flag, mantissa, cfg)


def _check_cfg(block, cfg):
    if cfg is not None and cfg != block.cfg:
        raise ConfigMismatch(f"block encoded with {block.cfg!r}, asked to use {cfg!r}")


def decode_block(block, cfg=None):
    """Exact float64 values of a BBFP block (zeros decode to +0.0)."""
    _check_cfg(block, cfg)
    c = block.cfg
    scaled = block.mantissa << (block.flag * c.shift_span)
    exp = block.shared_exponent[..., None] - c.bias + 1 - c.m
    mag = np.ldexp(scaled.astype(np.float64), exp)
    return np.where(block.mantissa == 0, 0.0, np.where(block.sign == 1, -mag, mag))


def encode_block_bfp(values, cfg):
    """Classic BFP: every mantissa right-aligned to the block maximum exponent."""
    x = np.asarray(values, dtype=np.float64)
    _check_block_shape(x, cfg)
    sign, exp, mant = to_source(x, cfg.exponent_bits)
    shared = exp.max(axis=-1)
    delta = shared[..., None] - exp
    mantissa = _round_shift(mant, delta + (SOURCE_MANTISSA_BITS - cfg.m), cfg.rounding)
    return BfpBlock(shared, sign, np.minimum(mantissa, cfg.max_mantissa), cfg)


def decode_block_bfp(block, cfg=None):
    if cfg is not None and cfg != block.cfg:
        raise ConfigMismatch("BFP block config mismatch")
    c = block.cfg
    exp = block.shared_exponent[..., None] - c.bias + 1 - c.m
    mag = np.ldexp(block.mantissa.astype(np.float64), exp)
    return np.where(block.mantissa == 0, 0.0, np.where(block.sign == 1, -mag, mag))


def split_blocks(values, block_size, axis=-1):
    """Move ``axis`` last, zero-pad it to a multiple of ``block_size`` and
    reshape to ``(..., n_blocks, block_size)``.  Returns ``(blocks, length)``.
    """
    x = np.moveaxis(np.asarray(values, dtype=np.float64), axis, -1)
    length = x.shape[-1]
    pad = (-length) % block_size
    if pad:
        x = np.concatenate([x, np.zeros(x.shape[:-1] + (pad,))], axis=-1)
    return x.reshape(x.shape[:-1] + (-1, block_size)), length


def quantize(values, cfg, kind="bbfp", offset=None, axis=-1):
    """Round-trip a tensor through BBFP (or BFP) blocks along ``axis``."""
    blocks, length = split_blocks(values, cfg.block_size, axis)
    if kind == "bbfp":
        out = decode_block(encode_block(blocks, cfg, offset=offset))
    elif kind == "bfp":
        out = decode_block_bfp(encode_block_bfp(blocks, cfg))
    else:
        raise ValueError(f"kind must be 'bbfp' or 'bfp', got {kind!r}")
    out = out.reshape(out.shape[:-2] + (-1,))[..., :length]
    return np.moveaxis(out, -1, axis)


# -- packed serialisation -----------------------------------------------------
# header: m:u8 o:u8 e:u8 N:u16 rounding:u8 (little-endian), then per block one
# e_s byte followed by N fields of (sign, flag, mantissa) in m+2 bits, MSB
# first, zero-padded to a byte boundary.

_HEADER = struct.Struct("<BBBHB")


def _record_size(cfg):
    return 1 + (cfg.block_size * (cfg.m + 2) + 7) // 8


def pack_blocks(block):
    """Serialise a block (or batch of blocks, flattened in C order)."""
    cfg = block.cfg
    width = cfg.m + 2
    fields = ((block.sign << (cfg.m + 1)) | (block.flag << cfg.m) | block.mantissa)
    fields = fields.reshape(-1, cfg.block_size)
    shifts = np.arange(width - 1, -1, -1)
    bits = ((fields[..., None] >> shifts) & 1).astype(np.uint8).reshape(fields.shape[0], -1)
    payload = np.packbits(bits, axis=-1)
    es = block.shared_exponent.reshape(-1, 1).astype(np.uint8)
    header = _HEADER.pack(cfg.m, cfg.o, cfg.exponent_bits, cfg.block_size,
                          _ROUNDING_CODES[cfg.rounding])
    return header + np.concatenate([es, payload], axis=1).tobytes()


def unpack_blocks(data):
    """Inverse of :func:`pack_blocks`; always returns a ``(n_blocks,)`` batch."""
    if len(data) < _HEADER.size:
        raise TruncatedPayload("TruncatedPayload: header")
    m, o, e, n, rcode = _HEADER.unpack_from(data)
    rounding = {v: k for k, v in _ROUNDING_CODES.items()}.get(rcode)
    if rounding is None:
        raise BbfpError(f"unknown rounding code {rcode}")
    cfg = BbfpConfig(m, o, e, n, rounding)
    body = np.frombuffer(data, dtype=np.uint8, offset=_HEADER.size)
    rec = _record_size(cfg)
    if body.size % rec:
        raise TruncatedPayload("TruncatedPayload")
    body = body.reshape(-1, rec)
    width = m + 2
    bits = np.unpackbits(body[:, 1:], axis=-1)[:, : n * width].reshape(-1, n, width)
    fields = (bits.astype(np.int64) << np.arange(width - 1, -1, -1)).sum(axis=-1)
    return BbfpBlock(
        shared_exponent=body[:, 0].astype(np.int64),
        sign=(fields >> (m + 1)) & 1,
        flag=(fields >> m) & 1,
        mantissa=fields & (2 ** m - 1),
        cfg=cfg,
    )
