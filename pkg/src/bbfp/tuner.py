"""Overlap-width selection.

Each candidate ``o`` in ``[0, m-1]`` gets a quality figure (lower is better)
and a hardware overhead.  Both vectors are divided by their maxima and
combined as ``w * overhead + (1 - w) * quality``; the smallest score wins,
ties going to the smaller ``o``.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .cost import FormatSpec, equivalent_bit_width, gate_estimate
from .errors import CandidateEvaluationError
from .format import BbfpConfig, quantize

__all__ = [
    "score_candidates",
    "select_from_tables",
    "select_overlap",
    "proxy_quality",
    "proxy_evaluator",
    "gate_overhead",
    "bitwidth_overhead",
    "OVERHEADS",
    "load_quality_table",
]


def score_candidates(quality, overhead, w):
    quality = np.asarray(quality, dtype=np.float64)
    overhead = np.asarray(overhead, dtype=np.float64)
    if quality.shape != overhead.shape or quality.ndim != 1 or quality.size == 0:
        raise ValueError("quality and overhead must be equal-length vectors")
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"w must lie in [0, 1], got {w}")
    if (overhead <= 0).any():
        raise ValueError("overheads must be positive")
    return w * overhead / overhead.max() + (1.0 - w) * quality / quality.max()


def select_from_tables(quality, overhead, w):
    # np.argmin returns the first minimum, i.e. the smaller o on ties
    return int(np.argmin(score_candidates(quality, overhead, w)))


def _evaluate(fn, m):
    out = []
    for o in range(m):
        try:
            out.append(float(fn(o)))
        except Exception as exc:  # noqa: BLE001 - re-raised with the candidate index
            raise CandidateEvaluationError(o, exc) from exc
    return out


def bitwidth_overhead(m, exponent_bits=5, block_size=32):
    """Default overhead evaluator: equivalent stored bits per element.

    This figure does not depend on ``o``, so after max-normalisation the
    overhead term is the same for every candidate and the choice falls to
    quality alone.  Use :func:`gate_overhead` for an ``o``-sensitive cost.
    """
    def overhead(o):
        return equivalent_bit_width(FormatSpec("BBFP", m, o, exponent_bits, block_size))
    return overhead


def gate_overhead(m, exponent_bits=5, block_size=32):
    """Relative multiplier + adder gate units of one MAC lane."""
    def overhead(o):
        g = gate_estimate(FormatSpec("BBFP", m, o, exponent_bits, block_size))
        return g["rel_mult_cost"] + g["rel_add_cost"]
    return overhead


OVERHEADS = {"bitwidth": bitwidth_overhead, "gate": gate_overhead}


def select_overlap(quality_fn, w, m, overhead_fn=None):
    """Score ``o = 0 .. m-1`` and return the best overlap width.

    ``quality_fn(o)`` and ``overhead_fn(o)`` are called once per candidate;
    an exception from either is re-raised as
    :class:`~bbfp.errors.CandidateEvaluationError` carrying ``o``.
    """
    if m < 2:
        raise ValueError("m must be >= 2")
    overhead_fn = overhead_fn or bitwidth_overhead(m)
    quality = _evaluate(quality_fn, m)
    overhead = _evaluate(overhead_fn, m)
    return select_from_tables(quality, overhead, w)


def proxy_quality(values, cfg):
    """Quantisation error power relative to signal power over a corpus.

    Stand-in for a model-level metric such as perplexity; 0 for a corpus
    that BBFP represents exactly.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("empty corpus")
    # correctly rounded sums keep the figure independent of corpus order/duplication
    power = math.fsum(x * x)
    if power == 0.0:
        return 0.0
    err = quantize(x, cfg) - x
    return math.fsum(err * err) / power


def proxy_evaluator(values, m, **cfg_kw):
    """``o -> proxy_quality(values, BBFP(m, o))``."""
    return lambda o: proxy_quality(values, BbfpConfig(m, o, **cfg_kw))


def load_quality_table(path):
    """Read ``{"m": int, "entries": [{"o": int, "quality": float}, ...]}``.

    Entries may also carry an ``"overhead"`` figure.  Returns
    ``(m, quality_fn, overhead_fn_or_None)``.
    """
    doc = json.loads(Path(path).read_text())
    m = int(doc["m"])
    entries = {int(e["o"]): e for e in doc["entries"]}
    missing = [o for o in range(m) if o not in entries]
    if missing:
        raise ValueError(f"quality table lacks candidates {missing}")

    def quality(o):
        return float(entries[o]["quality"])

    overhead = None
    if all("overhead" in entries[o] for o in range(m)):
        def overhead(o):
            return float(entries[o]["overhead"])
    return m, quality, overhead
