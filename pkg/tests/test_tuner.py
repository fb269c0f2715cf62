import json

import numpy as np
import pytest

from bbfp.errors import CandidateEvaluationError
from bbfp.format import BbfpConfig
from bbfp.tuner import (
    bitwidth_overhead,
    gate_overhead,
    load_quality_table,
    proxy_evaluator,
    proxy_quality,
    score_candidates,
    select_from_tables,
    select_overlap,
)
from bbfp.tensor_io import synth_tensor

QUALITY = [10, 8, 9]
OVERHEAD = [5, 6, 7]


def test_worked_example():
    scores = score_candidates(QUALITY, OVERHEAD, 0.5)
    assert scores == pytest.approx([0.857142857, 0.828571429, 0.95])
    assert select_from_tables(QUALITY, OVERHEAD, 0.5) == 1
    assert select_from_tables(QUALITY, OVERHEAD, 0.0) == 1
    assert select_from_tables(QUALITY, OVERHEAD, 1.0) == 0


def test_select_overlap_calls_evaluators():
    got = select_overlap(lambda o: QUALITY[o], 0.5, 3, lambda o: OVERHEAD[o])
    assert got == 1


def test_ties_go_to_smaller_o():
    assert select_from_tables([1, 1, 1], [2, 2, 2], 0.3) == 0


def test_validation():
    with pytest.raises(ValueError):
        score_candidates(QUALITY, OVERHEAD, 1.5)
    with pytest.raises(ValueError):
        score_candidates(QUALITY, [1, 0, 2], 0.5)
    with pytest.raises(ValueError):
        select_overlap(lambda o: 1.0, 0.5, 1)


def test_evaluator_failure_carries_index():
    def quality(o):
        if o == 2:
            raise RuntimeError("boom")
        return 1.0

    with pytest.raises(CandidateEvaluationError) as info:
        select_overlap(quality, 0.5, 4)
    assert info.value.index == 2


def test_scale_invariance_random():
    rng = np.random.default_rng(0)
    for _ in range(300):
        m = int(rng.integers(2, 9))
        q, h = rng.uniform(0.1, 10, m), rng.uniform(0.1, 10, m)
        w = float(rng.uniform())
        base = select_from_tables(q, h, w)
        assert select_from_tables(q * rng.uniform(0.01, 100), h, w) == base
        assert select_from_tables(q, h * rng.uniform(0.01, 100), w) == base


def test_monotone_weighting():
    # quality improves with o, overhead grows with o
    q, h = [5, 4, 3, 2, 1], [1, 2, 3, 4, 5]
    picks = [select_from_tables(q, h, w) for w in np.linspace(0, 1, 21)]
    assert all(b <= a for a, b in zip(picks, picks[1:]))
    assert picks[0] == 4 and picks[-1] == 0


def test_default_overheads():
    bw = bitwidth_overhead(6)
    assert [bw(o) for o in range(6)] == [8.15625] * 6
    gate = gate_overhead(6)
    assert gate(3) < gate(1)


def test_proxy_quality():
    x = synth_tensor("gaussian", (2000, 32), seed=4)
    assert proxy_quality(np.full(64, 0.5), BbfpConfig(4, 2)) == 0.0
    assert proxy_quality(x, BbfpConfig(6, 3)) < proxy_quality(x, BbfpConfig(6, 1))
    assert proxy_quality(np.concatenate([x, x]), BbfpConfig(6, 3)) == proxy_quality(x, BbfpConfig(6, 3))
    o = select_overlap(proxy_evaluator(x, 6, rounding="rne"), 0.0, 6)
    assert 0 <= o < 6


def test_quality_table(tmp_path):
    path = tmp_path / "q.json"
    path.write_text(json.dumps({"m": 3, "entries": [
        {"o": o, "quality": q, "overhead": h} for o, (q, h) in enumerate(zip(QUALITY, OVERHEAD))]}))
    m, quality, overhead = load_quality_table(path)
    assert m == 3 and select_overlap(quality, 0.5, m, overhead) == 1
    path.write_text(json.dumps({"m": 3, "entries": [{"o": 0, "quality": 1.0}]}))
    with pytest.raises(ValueError):
        load_quality_table(path)
    path.write_text(json.dumps({"m": 2, "entries": [{"o": 0, "quality": 1.0}, {"o": 1, "quality": 2.0}]}))
    assert load_quality_table(path)[2] is None
