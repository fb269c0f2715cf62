import math

import numpy as np
import pytest

from bbfp.errors import BbfpError
from bbfp.format import BbfpConfig, decode_block, encode_block
from bbfp.nonlinear import (
    COVERAGE,
    Coverage,
    Function,
    NonlinearConfig,
    Pipeline,
    bank_from_bytes,
    bank_to_bytes,
    build_lut,
    fixed_divide,
    gelu,
    gelu_stages,
    load_bank,
    lut_lookup,
    save_bank,
    sigmoid,
    sigmoid_stages,
    silu,
    silu_stages,
    softmax,
    softmax_stages,
)

CFG = NonlinearConfig()

REF = {
    Function.EXP: math.exp,
    Function.ONE_PLUS_EXP_NEG: lambda x: 1.0 + math.exp(-x),
    Function.SILU: lambda x: x / (1.0 + math.exp(-x)),
    Function.GELU: lambda x: 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0))),
}


@pytest.fixture(scope="module")
def banks():
    return {f: build_lut(f, CFG) for f in Function}


def test_bank_sizes_and_entries(banks):
    assert banks[Function.EXP].n_subtables == 18
    for f in (Function.ONE_PLUS_EXP_NEG, Function.SILU, Function.GELU):
        assert banks[f].n_subtables == 24
    for bank in banks.values():
        assert bank.n_subtables <= 2 * 2 ** CFG.fmt.exponent_bits
        assert np.isfinite(bank.values).all()
        assert bank.values.shape == (bank.n_subtables, 128)
    exp = banks[Function.EXP].values
    assert exp.min() >= 0.0 and exp.max() <= 1.0
    # entries are zero only where the sample underflows the 5-bit exponent range
    keys = banks[Function.EXP].keys
    for row, (s, t) in zip(exp, keys):
        xs = (np.arange(128) + 0.5) * 2.0 ** (t - 6) * (-1 if s else 1)
        assert ((row > 0) | (np.exp(xs) < 2.0 ** -14)).all()


def test_one_plus_exp_neg_near_zero(banks):
    bank = banks[Function.ONE_PLUS_EXP_NEG]
    lowest = bank.keys.index((0, -7))
    assert abs(bank.values[lowest, 0] - 2.0) <= 2.0 ** -9


def test_coverage_too_wide():
    with pytest.raises(BbfpError):
        build_lut(Function.EXP, CFG, Coverage({1: (-20, 20)}, {1: 0.0}))


def test_config_validation():
    with pytest.raises(BbfpError):
        NonlinearConfig(address_bits=11)
    with pytest.raises(BbfpError):
        NonlinearConfig(lut_block_size=3)


@pytest.mark.parametrize("function", list(Function))
def test_bank_serialisation(tmp_path, banks, function):
    bank = banks[function]
    data = bank_to_bytes(bank)
    assert data[:6] == bytes([int(function), 10, 5, 7, bank.n_subtables, 0])
    assert bank_from_bytes(data) == bank
    save_bank(bank, tmp_path / "b.lut")
    again = load_bank(tmp_path / "b.lut")
    assert again == bank and (again.values == bank.values).all()


def test_packed_entry_bank_roundtrip():
    cfg = NonlinearConfig(lut_block_size=16)
    bank = build_lut(Function.GELU, cfg)
    assert bank_from_bytes(bank_to_bytes(bank)) == bank


def _in_range_inputs(function, rng, n):
    if function is Function.EXP:
        return -rng.uniform(0, 16, (n, 32)) * (rng.random((n, 32)) < 0.97)
    return rng.uniform(-31.9, 31.9, (n, 32)) * 2.0 ** -rng.integers(0, 8, (n, 1))


@pytest.mark.parametrize("function", list(Function))
def test_lookup_within_one_cell(banks, function):
    """Oracle: the entry must match f on the addressed cell up to the spread
    of f over that cell plus entry rounding.  Entries live in the 5-bit
    exponent source range, so f is clamped to its largest value and anything
    below the smallest normal (2^-14) may flush to zero."""
    rng = np.random.default_rng(int(function))
    x = encode_block(_in_range_inputs(function, rng, 3200), CFG.fmt)  # ~10^5 elements
    got = decode_block(lut_lookup(x, banks[function]))[..., 0]
    xs = decode_block(x)
    t = x.effective_exponent
    cover = COVERAGE[function].tables
    top = (2 ** 11 - 1) * 2.0 ** (31 - 15 - 10)
    f = np.vectorize(lambda v: min(max(REF[function](v), -top), top), otypes=[float])
    for s, (lo, hi) in cover.items():
        sel = (x.sign == s)
        tt = np.clip(t[sel], lo, hi)
        w = np.ldexp(1.0, tt + 1 - CFG.address_bits)
        cell = np.floor(np.abs(xs[sel]) / w)
        sgn = -1.0 if s else 1.0
        pts = sgn * (cell[:, None] + np.linspace(0, 1, 17)[None, :]) * w[:, None]
        fv = f(pts)
        spread = fv.max(axis=1) - fv.min(axis=1)
        err = np.abs(got[sel] - f(xs[sel]))
        assert (err <= spread + 2.0 ** -9 * np.abs(fv).max(axis=1) + 2.0 ** -14).all()


def test_lookup_saturation(banks):
    cfg = CFG.fmt.replace(block_size=1)
    deep = encode_block(np.array([[-100.0]]), cfg)
    assert decode_block(lut_lookup(deep, banks[Function.EXP]))[0, 0, 0] == 0.0
    big = encode_block(np.array([[100.0], [-100.0]]), cfg)
    out = decode_block(lut_lookup(big, banks[Function.SILU]))[..., 0, 0]
    assert out.tolist() == [100.0, 0.0]
    with pytest.raises(BbfpError):
        lut_lookup(encode_block(np.zeros(32), BbfpConfig(8, 4)), banks[Function.EXP])


def test_fixed_divide():
    rng = np.random.default_rng(0)
    a = np.ldexp(rng.integers(1, 2 ** 16, 5000), rng.integers(-20, 0, 5000)).astype(float)
    b = a * rng.uniform(1, 50, 5000)
    b = np.ldexp(np.floor(np.ldexp(*np.frexp(b)[:1], 16)), np.frexp(b)[1] - 16)  # 16-bit divisors
    q = fixed_divide(a, b)
    assert (q <= a / b).all() and (a / b - q < 2.0 ** -16).all()
    assert (np.abs(q * b - a) < b * 2.0 ** -16).all()
    assert fixed_divide(-1.0, 4.0) == -0.25
    with pytest.raises(ZeroDivisionError):
        fixed_divide(1.0, 0.0)


def test_sigmoid_silu_at_zero():
    assert sigmoid(np.array([0.0]))[0] == 0.5
    assert silu(np.array([0.0]))[0] == 0.0
    assert gelu(np.array([0.0]))[0] == 0.0


def test_silu_three():
    got = silu(np.array([3.0]))[0]
    ref = 3.0 / (1.0 + math.exp(-3.0))
    assert ref == pytest.approx(2.857722, abs=1e-6)
    # cell of 2^-5 with silu' < 1.1, entry and divider rounding, 2^-8 output grid
    bound = 1.1 * 2.0 ** -5 + 3 * 2.0 ** -9 + 3 * 2.0 ** -16 + 2.0 ** -8
    assert abs(got - ref) <= bound


def test_sigmoid_symmetry_and_monotonicity():
    rng = np.random.default_rng(3)
    for _ in range(50):
        v = rng.uniform(-8, 8, 16)
        x = np.concatenate([v, -v])
        y = sigmoid(x)
        blk = encode_block(x, CFG.fmt)
        w = np.ldexp(1.0, np.clip(blk.effective_exponent, -7, 4) + 1 - 7)
        assert (np.abs(y[:16] + y[16:] - 1) <= 2 * (0.25 * w[:16] + 2.0 ** -8)).all()
    x = np.sort(rng.uniform(-30, 30, 32))
    y = sigmoid(x)
    assert (np.diff(y) >= 0).all()


def test_softmax_examples():
    for n in (1, 7, 32, 100):
        y = softmax(np.full(n, 0.3))
        assert (np.abs(y - 1 / n) <= 2.0 ** -7).all()
    x = np.zeros(64)
    x[10] = 20.0
    assert softmax(x)[10] >= 1 - 2.0 ** -6
    rng = np.random.default_rng(1)
    for _ in range(200):
        y = softmax(rng.normal(0, 4, int(rng.integers(1, 300))))
        assert (y >= 0).all() and abs(y.sum() - 1) <= 2.0 ** -6


@pytest.mark.parametrize("stages,function", [
    (softmax_stages, Function.EXP), (sigmoid_stages, Function.ONE_PLUS_EXP_NEG),
    (silu_stages, Function.ONE_PLUS_EXP_NEG), (gelu_stages, Function.GELU)])
def test_pipeline_matches_composition(banks, stages, function):
    from bbfp.nonlinear import _start, _finish
    rng = np.random.default_rng(5)
    vecs = [rng.normal(0, 3, int(rng.integers(1, 100))) for _ in range(12)]
    pipe = Pipeline(stages(CFG, banks[function]))
    staged = [_finish(v) for v in pipe.run([_start(v) for v in vecs])]
    direct = [_finish(pipe.compose(_start(v))) for v in vecs]
    assert all((a == b).all() for a, b in zip(staged, direct))
    assert pipe.cycles >= len(vecs) + len(pipe.stages) - 1
    assert all(c == len(vecs) for c in pipe.busy_cycles.values())


def test_empty_vector_rejected():
    with pytest.raises(ValueError):
        softmax(np.array([]))
