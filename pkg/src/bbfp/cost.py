"""Storage cost (equivalent bit-width, memory efficiency) and a relative gate
estimator for MAC units.

The gate estimator is *relative only*: unit weights per gate type, no
calibration to any process.  Defaults are AND = OR = 1, XOR = 2, giving a
full adder of ``2 XOR + 2 AND + 1 OR = 7`` units.  A carry-chain cell is
priced as a full adder minus one AND and two XOR gates, i.e. 2 units.  Its
literal netlist (one XOR, one AND) would be 3 units; set ``chain_cell`` to
price it that way.
"""

from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass

from .format import BbfpConfig

__all__ = [
    "FormatSpec",
    "GateWeights",
    "parse_format",
    "equivalent_bit_width",
    "memory_efficiency",
    "adder_cost",
    "multiplier_cost",
    "gate_estimate",
    "TABLE_ONE",
    "table_one_rows",
    "cost_csv",
]

KINDS = ("FP16", "INT", "BFP", "BBFP")


@dataclass(frozen=True)
class FormatSpec:
    kind: str
    mantissa_bits: int
    overlap_bits: int = 0
    exponent_bits: int = 5
    block_size: int = 32

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "BBFP":
            # reuse the config invariants
            BbfpConfig(self.mantissa_bits, self.overlap_bits, self.exponent_bits, self.block_size)
        elif self.mantissa_bits < 1 or self.block_size < 1:
            raise ValueError("mantissa_bits and block_size must be positive")

    def to_config(self, **kw) -> BbfpConfig:
        """BbfpConfig for BFP/BBFP specs (BFP carries o = 0, which it ignores)."""
        if self.kind not in ("BFP", "BBFP"):
            raise ValueError(f"{self.kind} has no block configuration")
        return BbfpConfig(self.mantissa_bits, self.overlap_bits, self.exponent_bits,
                          self.block_size, **kw)

    @property
    def label(self):
        if self.kind == "BBFP":
            return f"BBFP({self.mantissa_bits},{self.overlap_bits})"
        if self.kind == "FP16":
            return "FP16"
        return f"{self.kind}{self.mantissa_bits}"


_PATTERNS = [
    (re.compile(r"^FP ?16$"), lambda g: FormatSpec("FP16", 11, block_size=1)),
    (re.compile(r"^INT ?(\d+)$"), lambda g: FormatSpec("INT", int(g[0]), block_size=1)),
    (re.compile(r"^BFP ?(\d+)$"), lambda g: FormatSpec("BFP", int(g[0]))),
    (re.compile(r"^BBFP ?\( ?(\d+) ?, ?(\d+) ?\)$"),
     lambda g: FormatSpec("BBFP", int(g[0]), int(g[1]))),
]


def parse_format(text, exponent_bits=5, block_size=None):
    """Parse labels such as ``FP16``, ``INT8``, ``BFP4`` or ``BBFP(6,3)``."""
    key = text.strip().upper()
    for pattern, build in _PATTERNS:
        match = pattern.match(key)
        if match:
            spec = build(match.groups())
            changes = {"exponent_bits": exponent_bits}
            if block_size is not None and spec.kind in ("BFP", "BBFP"):
                changes["block_size"] = block_size
            return FormatSpec(**{**spec.__dict__, **changes})
    raise ValueError(f"unrecognised format {text!r}")


def equivalent_bit_width(spec):
    """Average stored bits per element, shared exponent amortised over the block."""
    if spec.kind == "FP16":
        return 16.0
    if spec.kind == "INT":
        return float(spec.mantissa_bits)
    shared = spec.exponent_bits / spec.block_size
    if spec.kind == "BFP":
        return 1 + spec.mantissa_bits + shared
    return 2 + spec.mantissa_bits + shared


def memory_efficiency(spec):
    """Compression relative to FP16; round to two decimals for reporting."""
    return 16.0 / equivalent_bit_width(spec)


@dataclass(frozen=True)
class GateWeights:
    and_: float = 1.0
    or_: float = 1.0
    xor: float = 2.0
    chain_cell: float | None = None

    @property
    def full_adder(self):
        return 2 * self.xor + 2 * self.and_ + self.or_

    @property
    def carry_chain(self):
        if self.chain_cell is not None:
            return self.chain_cell
        return self.full_adder - self.and_ - 2 * self.xor


def adder_cost(full_adder_bits, chain_bits=0, weights=GateWeights()):
    return full_adder_bits * weights.full_adder + chain_bits * weights.carry_chain


def multiplier_cost(mantissa_bits):
    # array multiplier area grows with the partial-product count, m^2
    return float(mantissa_bits ** 2)


def _adder_layout(spec):
    """(full-adder positions, carry-chain positions) of the partial-sum adder."""
    guard = math.ceil(math.log2(spec.block_size)) if spec.block_size > 1 else 0
    if spec.kind == "FP16":
        return 2 * spec.mantissa_bits, 0
    if spec.kind == "INT":
        return 2 * spec.mantissa_bits, guard
    if spec.kind == "BFP":
        return 2 * spec.mantissa_bits, guard
    shift = spec.mantissa_bits - spec.overlap_bits
    return 2 * spec.mantissa_bits, 2 * shift + guard


def gate_estimate(spec, weights=GateWeights()):
    """Relative multiplier and adder cost of one MAC lane (non-calibrated)."""
    fa, chain = _adder_layout(spec)
    return {
        "rel_mult_cost": multiplier_cost(spec.mantissa_bits),
        "rel_add_cost": adder_cost(fa, chain, weights),
    }


TABLE_ONE = ("FP16", "INT8", "BFP8", "BFP6", "BBFP(8,4)", "BBFP(6,3)")


def table_one_rows(labels=TABLE_ONE, weights=GateWeights()):
    rows = []
    for label in labels:
        spec = parse_format(label)
        gates = gate_estimate(spec, weights)
        rows.append({
            "kind": spec.kind,
            "m": spec.mantissa_bits,
            "o": spec.overlap_bits,
            "e": spec.exponent_bits if spec.kind in ("BFP", "BBFP") else 0,
            "N": spec.block_size,
            "equiv_bits": round(equivalent_bit_width(spec), 2),
            "mem_eff": round(memory_efficiency(spec), 2),
            **gates,
        })
    return rows


COST_COLUMNS = ("kind", "m", "o", "e", "N", "equiv_bits", "mem_eff", "rel_mult_cost", "rel_add_cost")


def cost_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=COST_COLUMNS, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
