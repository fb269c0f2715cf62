"""Functional model of the segmented-LUT nonlinear unit.

Function samples live in sub-tables keyed by ``(sign, exponent)``.  An input
element of a BBFP block selects its sub-table by sign and *effective*
exponent (shared exponent plus ``m - o`` when the flag is set) and indexes it
with the top ``address_bits`` bits of its mantissa, with no leading-one
normalisation.  Sub-table ``t`` therefore covers magnitudes ``[0, 2^(t+1))``
in ``2^address_bits`` equal cells, each holding ``f`` at the cell midpoint.

Exponents outside a bank's covered range are handled by shifting the
mantissa onto the nearest covered table (always exact when moving down in
value, saturating when the value does not fit).

Dataflows:

* softmax: max -> align -> sub -> LUT(exp) -> adder tree -> div -> encode
* sigmoid: align -> LUT(1 + e^-x) -> div (1 / v) -> encode
* silu:    sigmoid dataflow, then mul by the aligned input -> encode
* gelu:    align -> LUT(gelu) -> encode
"""

from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass, field
from functools import reduce
from pathlib import Path

import numpy as np
from scipy.special import erf

from .errors import BbfpError, TruncatedPayload
from .format import (
    BbfpBlock,
    BbfpConfig,
    Rounding,
    SOURCE_MANTISSA_BITS,
    decode_block,
    encode_block,
    pack_blocks,
    split_blocks,
    unpack_blocks,
)

__all__ = [
    "Function",
    "NonlinearConfig",
    "Coverage",
    "COVERAGE",
    "reference",
    "LutBank",
    "build_lut",
    "lut_lookup",
    "fixed_divide",
    "Stage",
    "Pipeline",
    "softmax_stages",
    "sigmoid_stages",
    "silu_stages",
    "gelu_stages",
    "softmax",
    "sigmoid",
    "silu",
    "gelu",
    "save_bank",
    "load_bank",
    "bank_to_bytes",
    "bank_from_bytes",
]


class Function(enum.IntEnum):
    EXP = 0
    ONE_PLUS_EXP_NEG = 1
    SILU = 2
    GELU = 3


def _gelu(x):
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def _silu(x):
    return x / (1.0 + np.exp(-x))


_REFERENCE = {
    Function.EXP: np.exp,
    Function.ONE_PLUS_EXP_NEG: lambda x: 1.0 + np.exp(-x),
    Function.SILU: _silu,
    Function.GELU: _gelu,
}


def reference(function, x):
    """64-bit reference of a bank's stored function."""
    with np.errstate(over="ignore"):
        return _REFERENCE[Function(function)](np.asarray(x, dtype=np.float64))


IDENTITY = "identity"


@dataclass(frozen=True)
class Coverage:
    """Per-sign inclusive range of table exponents and out-of-range value."""

    tables: dict
    saturation: dict

    def keys(self):
        return [(s, t) for s in sorted(self.tables) for t in range(self.tables[s][0], self.tables[s][1] + 1)]


def _source_max(exponent_bits):
    bias = 2 ** (exponent_bits - 1) - 1
    return math.ldexp(2 ** SOURCE_MANTISSA_BITS - 1, 2 ** exponent_bits - 1 - bias - 10)


# Softmax inputs are <= 0 after max subtraction: 17 negative tables reaching
# magnitude 16 plus one positive table that catches exact zeros.  The SILU
# family spans |x| < 32 with 12 tables per sign.
COVERAGE = {
    Function.EXP: Coverage({1: (-13, 3), 0: (-13, -13)}, {1: 0.0, 0: 1.0}),
    Function.ONE_PLUS_EXP_NEG: Coverage({0: (-7, 4), 1: (-7, 4)}, {0: 1.0, 1: "max"}),
    Function.SILU: Coverage({0: (-7, 4), 1: (-7, 4)}, {0: IDENTITY, 1: 0.0}),
    Function.GELU: Coverage({0: (-7, 4), 1: (-7, 4)}, {0: IDENTITY, 1: 0.0}),
}


@dataclass(frozen=True)
class NonlinearConfig:
    fmt: BbfpConfig = field(default_factory=lambda: BbfpConfig(10, 5))
    address_bits: int = 7
    divider_frac_bits: int = 16
    divisor_bits: int = 16
    # entries sharing one stored exponent; 1 keeps every sample at full precision
    lut_block_size: int = 1

    def __post_init__(self):
        if not 1 <= self.address_bits <= self.fmt.m:
            raise BbfpError("address_bits must be in [1, m]")
        entries = 2 ** self.address_bits
        if self.lut_block_size < 1 or entries % self.lut_block_size:
            raise BbfpError("lut_block_size must divide the sub-table size")

    @property
    def entry_fmt(self):
        return self.fmt.replace(block_size=self.lut_block_size, rounding=Rounding.NEAREST_EVEN)


@dataclass(frozen=True, eq=False)
class LutBank:
    function: Function
    cfg: NonlinearConfig
    keys: tuple
    entries: BbfpBlock  # batch (n_subtables, entries / lut_block_size)

    def __post_init__(self):
        index = {key: i for i, key in enumerate(self.keys)}
        object.__setattr__(self, "_index", index)
        flat = decode_block(self.entries).reshape(len(self.keys), -1)
        object.__setattr__(self, "values", flat)

    @property
    def n_subtables(self):
        return len(self.keys)

    def coverage(self):
        out = {}
        for s, t in self.keys:
            lo, hi = out.get(s, (t, t))
            out[s] = (min(lo, t), max(hi, t))
        return out

    def __eq__(self, other):
        if not isinstance(other, LutBank):
            return NotImplemented
        return (self.function == other.function and self.keys == other.keys
                and self.entries == other.entries)


def _sample_points(sign, t, address_bits):
    width = math.ldexp(1.0, t + 1 - address_bits)
    x = (np.arange(2 ** address_bits) + 0.5) * width
    return -x if sign else x


def build_lut(function, cfg=None, coverage=None):
    """Sample ``function`` at every cell midpoint and store it in BBFP."""
    function = Function(function)
    cfg = cfg or NonlinearConfig()
    coverage = coverage or COVERAGE[function]
    levels = 2 ** cfg.fmt.exponent_bits
    for s, (lo, hi) in coverage.tables.items():
        if hi - lo + 1 > levels:
            raise BbfpError(f"sign {s} covers {hi - lo + 1} exponents, more than 2^e = {levels}")
    keys = tuple(coverage.keys())
    limit = _source_max(cfg.fmt.exponent_bits)
    samples = np.stack([_sample_points(s, t, cfg.address_bits) for s, t in keys])
    values = np.clip(reference(function, samples), -limit, limit)
    fmt = cfg.entry_fmt
    entries = encode_block(values.reshape(len(keys), -1, fmt.block_size), fmt)
    return LutBank(function, cfg, keys, entries)


def _saturation_value(bank, sign):
    sat = COVERAGE[bank.function].saturation.get(sign, 0.0)
    if sat == "max":
        return _source_max(bank.cfg.fmt.exponent_bits)
    return sat


def _single(values, bank):
    """Encode values as one-element blocks in the bank's entry format."""
    fmt = bank.cfg.entry_fmt.replace(block_size=1)
    return encode_block(np.asarray(values, dtype=np.float64)[..., None], fmt)


def lut_lookup(x, bank):
    """Look up every element of block(s) ``x``.

    Returns the stored entries as a batch of single-element blocks with shape
    ``x.batch_shape + (N,)``: each result keeps the shared exponent it was
    stored with.
    """
    cfg = bank.cfg
    if x.cfg.m != cfg.fmt.m or x.cfg.o != cfg.fmt.o or x.cfg.exponent_bits != cfg.fmt.exponent_bits:
        raise BbfpError("bank was built for a different BBFP format")
    m, a = cfg.fmt.m, cfg.address_bits
    sign = x.sign
    mant = x.mantissa
    e_eff = x.effective_exponent

    table = np.full(mant.shape, -1, dtype=np.int64)
    addr = np.zeros(mant.shape, dtype=np.int64)
    saturated = np.ones(mant.shape, dtype=bool)
    for s, (lo, hi) in bank.coverage().items():
        sel = sign == s
        t = np.clip(e_eff, lo, hi)
        shift = t - e_eff
        down = mant >> np.minimum(np.maximum(shift, 0), 62)
        up = mant << np.minimum(np.maximum(-shift, 0), 62)
        aligned = np.where(shift >= 0, down, up)
        fits = (shift >= 0) | (np.maximum(-shift, 0) <= m) & (aligned < 2 ** m)
        ok = sel & fits
        saturated &= ~ok
        index = np.array([bank._index[(s, tt)] for tt in range(lo, hi + 1)])
        table = np.where(ok, index[t - lo], table)
        addr = np.where(ok, aligned >> (m - a), addr)

    per_block = cfg.lut_block_size
    blk = np.where(saturated, 0, addr // per_block)
    pos = np.where(saturated, 0, addr % per_block)
    tab = np.where(saturated, 0, table)
    e = bank.entries
    out_es = e.shared_exponent[tab, blk]
    out_sign = e.sign[tab, blk, pos]
    out_flag = e.flag[tab, blk, pos]
    out_mant = e.mantissa[tab, blk, pos]

    if saturated.any():
        xval = decode_block(x)
        sat = np.zeros(mant.shape)
        for s in (0, 1):
            value = _saturation_value(bank, s)
            sat = np.where(sign == s, xval if value == IDENTITY else value, sat)
        fill = _single(sat, bank)
        out_es = np.where(saturated, fill.shared_exponent, out_es)
        out_sign = np.where(saturated, fill.sign[..., 0], out_sign)
        out_flag = np.where(saturated, fill.flag[..., 0], out_flag)
        out_mant = np.where(saturated, fill.mantissa[..., 0], out_mant)

    fmt = cfg.entry_fmt.replace(block_size=1)
    return BbfpBlock(out_es, out_sign[..., None], out_flag[..., None], out_mant[..., None], fmt)


def _entry_values(block):
    return decode_block(block)[..., 0]


def fixed_divide(a, b, frac_bits=16, divisor_bits=16):
    """Divider model: ``floor(a / b' * 2^F) * 2^-F`` with the divisor ``b``
    truncated to ``divisor_bits`` significant bits.

    Inputs are exact binary fractions with magnitude ratio below
    ``2^(53 - F - divisor_bits)`` so the correction step stays exact.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if (b == 0).any():
        raise ZeroDivisionError("divisor is zero")
    neg = np.signbit(a) ^ np.signbit(b)
    a, b = np.abs(a), np.abs(b)
    frac, exp = np.frexp(b)
    b_t = np.ldexp(np.floor(np.ldexp(frac, divisor_bits)), exp - divisor_bits)
    target = np.ldexp(a, frac_bits)
    q = np.floor(target / b_t)
    if (q >= 2.0 ** (53 - divisor_bits)).any():
        raise BbfpError("quotient exceeds the divider's exact range")
    q = np.where(q * b_t > target, q - 1, q)
    q = np.where((q + 1) * b_t <= target, q + 1, q)
    out = np.ldexp(q, -frac_bits)
    return np.where(neg & (q != 0), -out, out)


# -- pipeline ------------------------------------------------------------------


@dataclass
class Stage:
    name: str
    fn: object
    latency: int = 1

    def __call__(self, payload):
        return self.fn(payload)


class Pipeline:
    """Cycle-stepped emulation of a linear pipeline with one buffer per stage.

    ``busy_cycles`` counts, per stage, the cycles it held an item.  These are
    bookkeeping only and carry no timing claims.
    """

    def __init__(self, stages):
        self.stages = list(stages)
        self.busy_cycles = {s.name: 0 for s in self.stages}
        self.cycles = 0

    def compose(self, item):
        return reduce(lambda acc, st: st(acc), self.stages, item)

    def run(self, items):
        queue = list(items)
        slots = [None] * len(self.stages)  # (payload, remaining latency)
        done = []
        while queue or any(s is not None for s in slots):
            self.cycles += 1
            for i in range(len(self.stages) - 1, -1, -1):
                if slots[i] is None:
                    continue
                payload, left = slots[i]
                self.busy_cycles[self.stages[i].name] += 1
                if left > 1:
                    slots[i] = (payload, left - 1)
                    continue
                out = self.stages[i](payload)
                if i + 1 == len(self.stages):
                    done.append(out)
                    slots[i] = None
                elif slots[i + 1] is None:
                    slots[i + 1] = (out, self.stages[i + 1].latency)
                    slots[i] = None
                else:
                    slots[i] = (payload, 1)  # stall: downstream buffer full
            if queue and slots[0] is None:
                slots[0] = (queue.pop(0), self.stages[0].latency)
        return done


@dataclass
class _Vec:
    """Payload travelling through the unit for one input vector."""

    x: np.ndarray
    n: int
    argmax: int = 0
    aligned: BbfpBlock | None = None
    work: object = None
    total: float = 0.0
    quotient: np.ndarray | None = None
    out: np.ndarray | None = None


def _blocks(values, fmt):
    blocks, n = split_blocks(np.asarray(values, dtype=np.float64), fmt.block_size)
    return blocks, n


def _unblock(values, n):
    return values.reshape(-1)[:n]


def _start(x):
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty input vector")
    return _Vec(x=x, n=x.size)


def _max_unit(v):
    v.argmax = int(np.argmax(v.x))
    return v


def _align_unit(fmt):
    def align(v):
        blocks, _ = _blocks(v.x, fmt)
        v.aligned = encode_block(blocks, fmt)
        return v
    return align


def _sub_unit(fmt):
    def sub(v):
        xq = _unblock(decode_block(v.aligned), v.n)
        # cross-block alignment can leave tiny positive residues; clamp them
        d = np.minimum(xq - xq[v.argmax], 0.0)
        blocks, _ = _blocks(d, fmt)
        v.work = encode_block(blocks, fmt)
        return v
    return sub


def _lut_unit(bank, source="work"):
    def lut(v):
        v.work = lut_lookup(getattr(v, source), bank)
        return v
    return lut


def _adder_tree(v):
    # entries are exact binary fractions well inside 53 bits: the float sum is exact
    vals = _unblock(_entry_values(v.work), v.n)
    v.total = float(np.sum(vals))
    return v


def _div_unit(cfg, numerator=None):
    def div(v):
        vals = _unblock(_entry_values(v.work), v.n)
        if numerator is None:
            v.quotient = fixed_divide(vals, v.total, cfg.divider_frac_bits, cfg.divisor_bits)
        else:
            v.quotient = fixed_divide(np.full(v.n, numerator), vals,
                                      cfg.divider_frac_bits, cfg.divisor_bits)
        return v
    return div


def _mul_unit(v):
    xq = _unblock(decode_block(v.aligned), v.n)
    v.quotient = xq * v.quotient  # 10-bit x 17-bit products are exact
    return v


def _passthrough_entries(v):
    v.quotient = _unblock(_entry_values(v.work), v.n)
    return v


def _encoder(fmt):
    def encode(v):
        blocks, _ = _blocks(v.quotient, fmt)
        v.out = _unblock(decode_block(encode_block(blocks, fmt)), v.n)
        return v
    return encode


def _finish(v):
    return v.out


def softmax_stages(cfg, bank):
    f = cfg.fmt
    return [Stage("max", _max_unit), Stage("align", _align_unit(f)), Stage("sub", _sub_unit(f)),
            Stage("lut", _lut_unit(bank)), Stage("adder_tree", _adder_tree),
            Stage("div", _div_unit(cfg)), Stage("encode", _encoder(f))]


def sigmoid_stages(cfg, bank):
    f = cfg.fmt
    return [Stage("align", _align_unit(f)), Stage("lut", _lut_unit(bank, "aligned")),
            Stage("div", _div_unit(cfg, numerator=1.0)), Stage("encode", _encoder(f))]


def silu_stages(cfg, bank):
    f = cfg.fmt
    return [Stage("align", _align_unit(f)), Stage("lut", _lut_unit(bank, "aligned")),
            Stage("div", _div_unit(cfg, numerator=1.0)), Stage("mul", _mul_unit),
            Stage("encode", _encoder(f))]


def gelu_stages(cfg, bank):
    f = cfg.fmt
    return [Stage("align", _align_unit(f)), Stage("lut", _lut_unit(bank, "aligned")),
            Stage("select", _passthrough_entries), Stage("encode", _encoder(f))]


_BANK_CACHE = {}


def _bank(function, cfg):
    key = (Function(function), cfg)
    if key not in _BANK_CACHE:
        _BANK_CACHE[key] = build_lut(function, cfg)
    return _BANK_CACHE[key]


def _run(stages, x):
    return _finish(Pipeline(stages).compose(_start(x)))


def softmax(x, cfg=None, bank=None):
    cfg = cfg or NonlinearConfig()
    return _run(softmax_stages(cfg, bank or _bank(Function.EXP, cfg)), x)


def sigmoid(x, cfg=None, bank=None):
    cfg = cfg or NonlinearConfig()
    return _run(sigmoid_stages(cfg, bank or _bank(Function.ONE_PLUS_EXP_NEG, cfg)), x)


def silu(x, cfg=None, bank=None):
    cfg = cfg or NonlinearConfig()
    return _run(silu_stages(cfg, bank or _bank(Function.ONE_PLUS_EXP_NEG, cfg)), x)


def gelu(x, cfg=None, bank=None):
    cfg = cfg or NonlinearConfig()
    return _run(gelu_stages(cfg, bank or _bank(Function.GELU, cfg)), x)


# -- bank files ----------------------------------------------------------------
# header: function:u8 m:u8 o:u8 address_bits:u8 n_subtables:u16 e:u8
#         lut_block_size:u16, then per sub-table: sign:u8, exponent:u8 (key,
# biased), followed by the sub-table's entry blocks, each one e_s byte plus its
# packed (sign, flag, mantissa) fields.

_BANK_HEADER = struct.Struct("<BBBBHBH")
_SUB_HEADER_SIZE = struct.calcsize("<BBBHB")
_KEY = struct.Struct("<BB")


def bank_to_bytes(bank):
    cfg = bank.cfg
    fmt = cfg.entry_fmt
    out = [_BANK_HEADER.pack(int(bank.function), fmt.m, fmt.o, cfg.address_bits,
                             bank.n_subtables, fmt.exponent_bits, fmt.block_size)]
    for i, (s, t) in enumerate(bank.keys):
        out.append(_KEY.pack(s, t + fmt.bias))
        # drop the header that pack_blocks prepends
        out.append(pack_blocks(bank.entries[i])[_SUB_HEADER_SIZE:])
    return b"".join(out)


def bank_from_bytes(data):
    if len(data) < _BANK_HEADER.size:
        raise TruncatedPayload("TruncatedPayload: bank header")
    func, m, o, a, n_sub, e, lbs = _BANK_HEADER.unpack_from(data)
    cfg = NonlinearConfig(fmt=BbfpConfig(m, o, e), address_bits=a, lut_block_size=lbs)
    fmt = cfg.entry_fmt
    n_blocks = 2 ** a // lbs
    rec = 1 + (lbs * (m + 2) + 7) // 8
    body_len = _KEY.size + n_blocks * rec
    pos = _BANK_HEADER.size
    if len(data) != pos + n_sub * body_len:
        raise TruncatedPayload("TruncatedPayload: bank body")
    sub_header = struct.pack("<BBBHB", m, o, e, lbs, 1)
    keys, blocks = [], []
    for _ in range(n_sub):
        s, tb = _KEY.unpack_from(data, pos)
        keys.append((s, tb - fmt.bias))
        chunk = data[pos + _KEY.size: pos + body_len]
        blocks.append(unpack_blocks(sub_header + chunk))
        pos += body_len
    entries = BbfpBlock(
        np.stack([b.shared_exponent for b in blocks]),
        np.stack([b.sign for b in blocks]),
        np.stack([b.flag for b in blocks]),
        np.stack([b.mantissa for b in blocks]),
        fmt,
    )
    return LutBank(Function(func), cfg, tuple(keys), entries)


def save_bank(bank, path):
    Path(path).write_bytes(bank_to_bytes(bank))


def load_bank(path):
    return bank_from_bytes(Path(path).read_bytes())
