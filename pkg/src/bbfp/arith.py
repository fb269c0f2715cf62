"""Bit-exact model of the BBFP multiply-accumulate datapath.

Intra-block products keep the raw ``m x m`` mantissa product plus a 2-bit
flag code recording how far it must be shifted (0, m-o or 2(m-o) bits).  The
partial-sum adder is emulated cell by cell: full adders where the shifted
product can carry ones, carry-chain cells (``S = C ^ a``, ``C' = C & a``)
where its bits are structurally zero.

Negative products are added as ``acc - x = ~(~acc + x)``: the accumulator
passes through a row of XOR gates driven by the product sign on the way in
and out, so the adder itself only ever sees a non-negative sparse addend.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import AccOverflow, BbfpError, ConfigMismatch
from .format import BbfpBlock, BfpBlock, encode_block, encode_block_bfp, split_blocks

__all__ = [
    "FLAG2_NONE",
    "FLAG2_ONE",
    "FLAG2_BOTH",
    "ProductElement",
    "ProductBlock",
    "Accumulator",
    "accumulator_width",
    "full_adder",
    "carry_chain_cell",
    "product_shift",
    "multiply_elements",
    "multiply_blocks",
    "sparse_adder",
    "sparse_add",
    "dot_product",
    "gemm",
]

FLAG2_NONE = 0b00
FLAG2_ONE = 0b01
FLAG2_BOTH = 0b11


@dataclass(frozen=True, eq=False)
class ProductElement:
    flag2: np.ndarray
    sign: np.ndarray
    mantissa: np.ndarray

    def __post_init__(self):
        for name in ("flag2", "sign", "mantissa"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=np.int64))

    def __getitem__(self, idx):
        return ProductElement(self.flag2[idx], self.sign[idx], self.mantissa[idx])


@dataclass(frozen=True, eq=False)
class ProductBlock:
    exponent_sum: np.ndarray  # e_s1 + e_s2 - 2 * bias, unbiased
    elements: ProductElement

    def __len__(self):
        return self.elements.mantissa.shape[-1]


def accumulator_width(cfg):
    return 2 * cfg.m + 2 * cfg.shift_span + math.ceil(math.log2(cfg.block_size)) + 1


@dataclass(frozen=True, eq=False)
class Accumulator:
    """Two's-complement register of ``width`` bits.

    ``bits`` holds the raw pattern in ``[0, 2^width)``; the register value is
    ``signed(bits) * 2^-frac_bits``.
    """

    bits: np.ndarray
    width: int
    frac_bits: int

    @classmethod
    def zeros(cls, cfg, shape=()):
        return cls(np.zeros(shape, dtype=np.int64), accumulator_width(cfg), 2 * (cfg.m - 1))

    def signed(self):
        b = np.asarray(self.bits, dtype=np.int64)
        return np.where(b >> (self.width - 1), b - (1 << self.width), b)

    def to_float(self, exponent=0):
        return np.ldexp(self.signed().astype(np.float64), exponent - self.frac_bits)


def full_adder(a, b, c):
    s = c ^ a ^ b
    cout = (a & b) | (c & (a ^ b))
    return s, cout


def carry_chain_cell(a, c):
    return c ^ a, c & a


def product_shift(flag2, cfg):
    flag2 = np.asarray(flag2, dtype=np.int64)
    return ((flag2 & 1) + (flag2 >> 1)) * cfg.shift_span


def _fields(x):
    if isinstance(x, BfpBlock):
        return x.sign, np.zeros_like(x.mantissa), x.mantissa
    return (np.asarray(x.sign, dtype=np.int64), np.asarray(x.flag, dtype=np.int64),
            np.asarray(x.mantissa, dtype=np.int64))


def multiply_elements(a, b, cfg):
    """Element-wise product of two BBFP elements (or element arrays/blocks)."""
    sa, fa, ma = _fields(a)
    sb, fb, mb = _fields(b)
    both = fa & fb
    either = fa | fb
    flag2 = np.where(both == 1, FLAG2_BOTH, np.where(either == 1, FLAG2_ONE, FLAG2_NONE))
    return ProductElement(flag2, sa ^ sb, ma * mb)


def _check_pair(x, y, cfg):
    if x.cfg != y.cfg or (cfg is not None and cfg != x.cfg):
        raise ConfigMismatch("ConfigMismatch: blocks use different configurations")
    if isinstance(x, BfpBlock) != isinstance(y, BfpBlock):
        raise ConfigMismatch("ConfigMismatch: cannot mix BFP and BBFP blocks")
    if len(x) != len(y):
        raise ConfigMismatch("ConfigMismatch: block lengths differ")
    return x.cfg


def multiply_blocks(x, y, cfg=None):
    cfg = _check_pair(x, y, cfg)
    es = x.shared_exponent + y.shared_exponent - 2 * cfg.bias
    return ProductBlock(es, multiply_elements(x, y, cfg))


def sparse_adder(a, b, lo, hi, width, carry_in=0):
    """Gate-level ``width``-bit adder: full-adder cells on bit positions
    ``[lo, hi)``, carry-chain cells everywhere else (where ``b`` must be 0).

    Returns ``(sum, carry into the MSB, carry out)``, all arrays.
    """
    a, b, lo, hi, carry = np.broadcast_arrays(np.asarray(a, dtype=np.int64),
                                              np.asarray(b, dtype=np.int64), lo, hi,
                                              np.asarray(carry_in, dtype=np.int64))
    out = np.zeros_like(a)
    carry_into_msb = carry
    for i in range(width):
        ai = (a >> i) & 1
        bi = (b >> i) & 1
        s_fa, c_fa = full_adder(ai, bi, carry)
        s_cc, c_cc = carry_chain_cell(ai, carry)
        dense = (lo <= i) & (i < hi)
        if i == width - 1:
            carry_into_msb = carry
        out |= np.where(dense, s_fa, s_cc) << i
        carry = np.where(dense, c_fa, c_cc)
    return out, carry_into_msb, carry


def sparse_add(acc, p, cfg):
    """Add one signed product into the accumulator through the sparse adder.

    Positions ``[shift, shift + 2m)`` of the addend use full-adder cells; all
    other positions are carry-chain cells, valid because the addend is
    structurally zero there.
    """
    if acc.width != accumulator_width(cfg) or acc.frac_bits != 2 * (cfg.m - 1):
        raise ConfigMismatch("accumulator binary point does not match config")
    width = acc.width
    shift = product_shift(p.flag2, cfg)
    addend = p.mantissa << shift
    lo, hi = shift, shift + 2 * cfg.m
    if (addend >> hi).any() or (addend & ((1 << lo) - 1)).any():
        raise BbfpError("addend violates its structural-zero pattern")

    invert = np.where(p.sign == 1, (1 << width) - 1, 0)
    a = np.asarray(acc.bits, dtype=np.int64) ^ invert
    out, c_msb, c_out = sparse_adder(a, addend, lo, hi, width)
    # addend < 2^(width-1), so signed overflow is exactly carry-in != carry-out at the MSB
    if (c_msb ^ c_out).any():
        raise AccOverflow("AccOverflow")
    return Accumulator(out ^ invert, width, acc.frac_bits)


def _as_bbfp(block):
    if isinstance(block, BfpBlock):
        return BbfpBlock(block.shared_exponent, block.sign, np.zeros_like(block.mantissa),
                         block.mantissa, block.cfg)
    return block


def dot_product(x, y, cfg=None, method="gate"):
    """Dot product of two blocks (or equal-shaped batches of blocks).

    ``method="gate"`` runs every addition through :func:`sparse_add`;
    ``method="int"`` sums the expanded products with plain integer arithmetic.
    Both are exact; the result is ``sum * 2^(exponent_sum + 2(1-m))``.
    """
    cfg = _check_pair(x, y, cfg)
    prod = multiply_blocks(_as_bbfp(x), _as_bbfp(y))
    el = prod.elements
    n = el.mantissa.shape[-1]
    if method == "gate":
        acc = Accumulator.zeros(cfg, el.mantissa.shape[:-1])
        for i in range(n):
            acc = sparse_add(acc, el[..., i], cfg)
        return acc.to_float(prod.exponent_sum)
    if method == "int":
        expanded = el.mantissa << product_shift(el.flag2, cfg)
        total = np.where(el.sign == 1, -expanded, expanded).sum(axis=-1)
        return np.ldexp(total.astype(np.float64), prod.exponent_sum + 2 * (1 - cfg.m))
    raise ValueError(f"unknown method {method!r}")


def _encode(blocks, cfg, kind, offset):
    if kind == "bbfp":
        return encode_block(blocks, cfg, offset=offset)
    if kind == "bfp":
        return encode_block_bfp(blocks, cfg)
    raise ValueError(f"kind must be 'bbfp' or 'bfp', got {kind!r}")


def _gemm_rows(a_blocks, b_enc, cfg, kind, offset, method, accumulate):
    a_enc = _encode(a_blocks, cfg, kind, offset)
    rows, nb = a_blocks.shape[0], a_blocks.shape[1]
    cols = b_enc.shared_exponent.shape[0]

    def pair(enc, axis):
        def expand(arr):
            return np.expand_dims(arr, axis)
        cls = type(enc)
        fields = {k: np.broadcast_to(expand(getattr(enc, k)), (rows, cols, nb) + getattr(enc, k).shape[2:])
                  for k in enc.__dataclass_fields__ if k != "cfg"}
        return cls(cfg=enc.cfg, **fields)

    partial = dot_product(pair(a_enc, 1), pair(b_enc, 0), cfg, method=method)
    dtype = np.float32 if accumulate == "fp32" else np.float64
    out = np.zeros((rows, cols), dtype=dtype)
    for j in range(nb):
        out = (out + partial[..., j].astype(dtype)).astype(dtype)
    return out


def gemm(a, b, cfg, kind="bbfp", block_size=None, offset=None, method="gate",
         accumulate="fp64", workers=1):
    """Blocked GEMM: quantise rows of ``a`` and columns of ``b`` in blocks
    along the reduction axis, take exact block dot products, and sum the
    per-block results in floating point in block order.

    ``block_size=16`` gives the 4x4 PE-tile feed; ``accumulate="fp32"``
    rounds the cross-block sum to single precision after every add.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise BbfpError(f"dimension mismatch: {a.shape} @ {b.shape}")
    if accumulate not in ("fp64", "fp32"):
        raise ValueError("accumulate must be 'fp64' or 'fp32'")
    if block_size is not None:
        cfg = cfg.replace(block_size=block_size)
    a_blocks, _ = split_blocks(a, cfg.block_size, axis=1)
    b_blocks, _ = split_blocks(b.T, cfg.block_size, axis=1)
    b_enc = _encode(b_blocks, cfg, kind, offset)

    if workers <= 1 or a.shape[0] < 2:
        return _gemm_rows(a_blocks, b_enc, cfg, kind, offset, method, accumulate)
    chunks = np.array_split(np.arange(a.shape[0]), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(lambda idx: _gemm_rows(a_blocks[idx], b_enc, cfg, kind, offset,
                                                method, accumulate),
                         [c for c in chunks if len(c)])
        return np.concatenate(list(parts), axis=0)
