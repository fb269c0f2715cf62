"""Quantisation-error measurement and the block-exponent variance model.

For round-to-nearest with ``L_m`` fraction bits, an element aligned to an
exponent ``gamma`` sees a uniform error of width ``2^(gamma - L_m)``, so the
error variance over a population is::

    sigma^2 = 2^(-2 L_m) / 12 * sum_i p(gamma_i) * 2^(2 gamma_i)

Exponents here are *unbiased*.  A BBFP/BFP mantissa of ``m`` bits holds the
leading one plus ``m - 1`` fraction bits relative to its alignment exponent,
so :func:`predicted_variance` uses ``L_m = m - 1``.  For BBFP the alignment
exponent of a flag-1 element is ``e_s + (m - o)``; pass ``level="element"``
to :func:`exponent_histogram` to tally those per-element grids.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .format import decode_block, decode_block_bfp, encode_block, encode_block_bfp, split_blocks

__all__ = [
    "ExponentHistogram",
    "ErrorReport",
    "strategy_label",
    "empirical_error",
    "exponent_histogram",
    "model_variance",
    "predicted_variance",
    "sweep",
    "SWEEP_COLUMNS",
    "sweep_csv",
]


@dataclass(frozen=True, eq=False)
class ExponentHistogram:
    levels: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        levels = np.asarray(self.levels, dtype=np.int64)
        masses = np.asarray(self.masses, dtype=np.float64)
        if levels.shape != masses.shape or levels.ndim != 1 or levels.size == 0:
            raise ValueError("levels and masses must be equal-length non-empty vectors")
        if (masses < 0).any() or abs(masses.sum() - 1.0) > 1e-12:
            raise ValueError("masses must be non-negative and sum to 1")
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "masses", masses)

    @classmethod
    def from_samples(cls, exponents):
        levels, counts = np.unique(np.asarray(exponents, dtype=np.int64).ravel(),
                                   return_counts=True)
        return cls(levels, counts / counts.sum())

    @property
    def mean(self):
        return float(np.dot(self.levels, self.masses))

    def __len__(self):
        return self.levels.size


@dataclass(frozen=True)
class ErrorReport:
    strategy: str
    mse: float
    variance: float
    mean: float
    count: int
    n_blocks: int


def strategy_label(offset):
    return "max" if offset == 0 else f"max-{offset}"


def _blocked(values, cfg):
    flat = np.asarray(values, dtype=np.float64).ravel()
    if flat.size == 0:
        raise ValueError("empty tensor")
    blocks, n = split_blocks(flat, cfg.block_size)
    return flat, blocks, n


def _roundtrip(blocks, cfg, offset, kind):
    if kind == "bfp":
        enc = encode_block_bfp(blocks, cfg)
        return enc, decode_block_bfp(enc)
    enc = encode_block(blocks, cfg, offset=offset)
    return enc, decode_block(enc)


def empirical_error(values, cfg, offset=None, kind="bbfp"):
    """Statistics of ``decode(encode(x)) - x`` over a tensor split into blocks.

    ``offset`` k sets ``E_shared = max - k`` (default ``m - o``).  ``kind="bfp"``
    aligns to the maximum with no flag bit.
    """
    flat, blocks, n = _blocked(values, cfg)
    if offset is None:
        offset = 0 if kind == "bfp" else cfg.shift_span
    _, deq = _roundtrip(blocks, cfg, offset, kind)
    err = deq.ravel()[:n] - flat
    return ErrorReport(
        strategy=strategy_label(offset),
        mse=float(np.mean(err * err)),
        variance=float(np.var(err)),
        mean=float(np.mean(err)),
        count=n,
        n_blocks=blocks.shape[0],
    )


def exponent_histogram(values, cfg, offset=None, kind="bbfp", level="block"):
    """PMF of realised (unbiased) alignment exponents.

    ``level="block"`` tallies one shared exponent per block.  ``level="element"``
    tallies, for every non-padding element, the exponent of the grid it was
    quantised on (``e_s`` or ``e_s + m - o`` for flag-1 elements).
    """
    flat, blocks, n = _blocked(values, cfg)
    if offset is None:
        offset = 0 if kind == "bfp" else cfg.shift_span
    enc, _ = _roundtrip(blocks, cfg, offset, kind)
    es = enc.shared_exponent - cfg.bias
    if level == "block":
        return ExponentHistogram.from_samples(es)
    if level != "element":
        raise ValueError("level must be 'block' or 'element'")
    if kind == "bfp":
        per_elem = np.broadcast_to(es[:, None], blocks.shape)
    else:
        per_elem = enc.effective_exponent
    return ExponentHistogram.from_samples(per_elem.ravel()[:n])


def model_variance(fraction_bits, hist):
    """``2^(-2 L_m) / 12 * sum p_i 2^(2 gamma_i)``."""
    weights = np.ldexp(1.0, 2 * hist.levels)
    return float(2.0 ** (-2 * fraction_bits) / 12.0 * np.dot(hist.masses, weights))


def predicted_variance(cfg, hist):
    return model_variance(cfg.m - 1, hist)


SWEEP_COLUMNS = ("format", "strategy", "m", "o", "mse", "var", "mean", "n_blocks", "seed")


def sweep(values, formats, offsets=None, seed=None, rounding="rne"):
    """Error rows for each (format, strategy).

    ``formats`` holds :class:`~bbfp.cost.FormatSpec`-like objects with a
    ``kind`` of ``"BFP"`` or ``"BBFP"`` and a ``to_config`` method.  BFP
    formats produce one ``max`` row; BBFP formats one row per offset
    (default: only ``m - o``).
    """
    rows = []
    for spec in formats:
        cfg = spec.to_config(rounding=rounding)
        if spec.kind == "BFP":
            plan = [(0, "bfp")]
        else:
            plan = [(k, "bbfp") for k in (offsets if offsets is not None else [cfg.shift_span])]
        for k, kind in plan:
            rep = empirical_error(values, cfg, offset=k, kind=kind)
            rows.append({
                "format": spec.label,
                "strategy": rep.strategy,
                "m": cfg.m,
                "o": cfg.o if spec.kind == "BBFP" else 0,
                "mse": rep.mse,
                "var": rep.variance,
                "mean": rep.mean,
                "n_blocks": rep.n_blocks,
                "seed": "" if seed is None else seed,
            })
    return rows


def sweep_csv(rows):
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()
