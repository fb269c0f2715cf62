"""``bbfp`` command line: reproducible experiments over the library.

Exit codes: 0 ok, 1 an ``--assert``/``--check`` failed, 2 usage or
validation error, 3 I/O error.  Reports go to ``--out`` (or stdout) as CSV
or JSON; JSON reports follow :data:`REPORT_SCHEMA`.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import re
import sys
from pathlib import Path

import numpy as np

from . import analysis, arith, cost, format as fmt, nonlinear, tensor_io, tuner
from .errors import BadMagic, BbfpError, CandidateEvaluationError, TruncatedPayload

EXIT_OK, EXIT_ASSERT, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

REPORT_SCHEMA = {
    "type": "object",
    "required": ["command", "seed", "rows", "checks"],
    "additionalProperties": False,
    "properties": {
        "command": {"type": "string"},
        "seed": {"type": "integer"},
        "rows": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": {"type": ["string", "number", "integer", "boolean", "null"]},
            },
        },
        "checks": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["check", "passed"],
                "additionalProperties": False,
                "properties": {"check": {"type": "string"}, "passed": {"type": "boolean"},
                               "detail": {"type": "string"}},
            },
        },
    },
}


class UsageError(Exception):
    pass


class IOFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def split_formats(text):
    """Split ``"BFP4,BBFP(4,2)"`` on commas outside parentheses."""
    parts, depth, cur = [], 0, ""
    for ch in text:
        depth += (ch == "(") - (ch == ")")
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
        else:
            cur += ch
    parts.append(cur)
    return [p.strip() for p in parts if p.strip()]


def _parse_strategy(label):
    label = label.strip().lower()
    if label == "max":
        return 0
    match = re.fullmatch(r"max-(\d+)", label)
    if match:
        return int(match.group(1))
    if label.isdigit():
        return int(label)
    raise UsageError(f"bad strategy {label!r}; use max, max-1, ...")


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


def _load(path):
    try:
        return np.asarray(tensor_io.read_tensor(path), dtype=np.float64)
    except (OSError, BadMagic, TruncatedPayload) as exc:
        raise IOFailure(f"{path}: {exc}") from exc


def _data(args, shape_default):
    if getattr(args, "input", None):
        return _load(args.input)
    shape = _ints(args.shape) if args.shape else shape_default
    return tensor_io.synth_tensor(args.dist, shape, args.seed)


def _block_format(label, args):
    spec = cost.parse_format(label, exponent_bits=args.exponent_bits, block_size=args.block_size)
    if spec.kind not in ("BFP", "BBFP"):
        raise UsageError(f"{label} is not a block format")
    return spec


# -- subcommands -----------------------------------------------------------------


def cmd_synth(args):
    if not args.tensor_out:
        raise UsageError("synth needs --tensor-out")
    x = tensor_io.synth_tensor(args.dist, _ints(args.shape), args.seed)
    _write_tensor(x.astype(np.float32), args.tensor_out)
    rows = [{"dist": args.dist, "shape": args.shape, "mean": float(np.mean(x)),
             "std": float(np.std(x)), "path": args.tensor_out}]
    return rows, []


def _write_tensor(x, path):
    try:
        tensor_io.write_tensor(x, path)
    except OSError as exc:
        raise IOFailure(f"{path}: {exc}") from exc


def cmd_quantize(args):
    x = _data(args, (1024, 32))
    spec = _block_format(args.dtype, args)
    cfg = spec.to_config(rounding=args.rounding)
    kind = spec.kind.lower()
    offset = None if args.offset is None else _parse_strategy(args.offset)
    rep = analysis.empirical_error(x, cfg, offset=offset, kind=kind)
    if args.blocks_out:
        blocks, _ = fmt.split_blocks(x.ravel(), cfg.block_size)
        if kind == "bfp":
            # BFP is BBFP aligned to the maximum; its packed form uses that encoding
            enc = fmt.encode_block(blocks, cfg, offset=0)
        else:
            enc = fmt.encode_block(blocks, cfg, offset=offset)
        try:
            Path(args.blocks_out).write_bytes(fmt.pack_blocks(enc))
        except OSError as exc:
            raise IOFailure(f"{args.blocks_out}: {exc}") from exc
    rows = [{"format": spec.label, "strategy": rep.strategy, "m": cfg.m,
             "o": cfg.o if spec.kind == "BBFP" else 0, "mse": rep.mse, "var": rep.variance,
             "mean": rep.mean, "count": rep.count, "n_blocks": rep.n_blocks}]
    return rows, []


def _check_sweep(expr, rows):
    tokens = re.split(r"([<>])", expr.replace(" ", ""))
    names, ops = tokens[0::2], tokens[1::2]
    if len(names) < 2 or any(not n for n in names):
        raise UsageError(f"bad assertion {expr!r}")

    def cmp(a, op, b):
        return a < b if op == "<" else a > b

    by_format = {}
    for row in rows:
        by_format.setdefault(row["format"], []).append(row)
    formats = [cost.parse_format(n).label if _is_format(n) else None for n in names]
    if all(formats):
        vals = []
        for label in formats:
            if label not in by_format:
                raise UsageError(f"format {label} not in the sweep")
            vals.append(_representative(by_format[label])["mse"])
        return all(cmp(vals[i], ops[i], vals[i + 1]) for i in range(len(ops)))
    if any(formats):
        raise UsageError(f"assertion {expr!r} mixes formats and strategies")
    labels = [analysis.strategy_label(_parse_strategy(n)) for n in names]
    checked = False
    for label, group in by_format.items():
        mse = {r["strategy"]: r["mse"] for r in group if not label.startswith("BFP")}
        if not mse:
            continue
        missing = [s for s in labels if s not in mse]
        if missing:
            raise UsageError(f"strategies {missing} not swept for {label}")
        checked = True
        if not all(cmp(mse[labels[i]], ops[i], mse[labels[i + 1]]) for i in range(len(ops))):
            return False
    if not checked:
        raise UsageError("strategy assertions need a BBFP format")
    return True


def _is_format(token):
    try:
        cost.parse_format(token)
    except ValueError:
        return False
    return True


def _representative(group):
    # BBFP: the default max-(m-o) row when swept, else the first row
    for row in group:
        if row["strategy"] == analysis.strategy_label(row["m"] - row["o"]):
            return row
    return group[0]


def cmd_sweep(args):
    strategies = [s for s in args.strategies.split(",") if s.strip()]
    if not strategies:
        raise UsageError("empty strategy list")
    offsets = [_parse_strategy(s) for s in strategies]
    labels = split_formats(args.formats)
    if not labels:
        raise UsageError("empty format list")
    specs = [_block_format(label, args) for label in labels]
    x = _data(args, (args.blocks, 32))
    rows = analysis.sweep(x, specs, offsets=offsets, seed=args.seed, rounding=args.rounding)
    checks = [{"check": expr, "passed": bool(_check_sweep(expr, rows))} for expr in args.asserts]
    return rows, checks


def cmd_gemm(args):
    spec = _block_format(args.dtype, args)
    cfg = spec.to_config(rounding=args.rounding)
    if args.a or args.b:
        if not (args.a and args.b):
            raise UsageError("give both --a and --b")
        a, b = _load(args.a), _load(args.b)
    else:
        m, k, n = _ints(args.shape)
        rng_a = tensor_io.synth_tensor(args.dist, (m, k), args.seed)
        a, b = rng_a, tensor_io.synth_tensor(args.dist, (k, n), args.seed + 1)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise UsageError(f"incompatible shapes {a.shape} x {b.shape}")
    kind = spec.kind.lower()
    c = arith.gemm(a, b, cfg, kind=kind, method=args.method, accumulate=args.accumulate,
                   workers=args.workers)
    if args.tensor_out:
        _write_tensor(c.astype(np.float32), args.tensor_out)
    rows = [{"format": spec.label, "M": a.shape[0], "K": a.shape[1], "N": b.shape[1],
             "accumulate": args.accumulate, "checksum": float(np.sum(c))}]
    checks = []
    if args.check:
        ref = _gemm_oracle(a, b, cfg, kind)
        diff = float(np.max(np.abs(c - ref))) if c.size else 0.0
        rows[0]["max_abs_diff"] = diff
        checks.append({"check": "blockwise-oracle", "passed": diff == 0.0})
    return rows, checks


def _gemm_oracle(a, b, cfg, kind):
    qa = fmt.quantize(a, cfg, kind=kind, axis=1)
    qb = fmt.quantize(b, cfg, kind=kind, axis=0)
    n = cfg.block_size
    out = np.zeros((a.shape[0], b.shape[1]))
    for start in range(0, a.shape[1], n):
        out += qa[:, start:start + n] @ qb[start:start + n, :]
    return out


_NONLINEAR = {
    "softmax": (nonlinear.softmax, None),
    "sigmoid": (nonlinear.sigmoid, lambda x: 1.0 / (1.0 + np.exp(-x))),
    "silu": (nonlinear.silu, lambda x: x / (1.0 + np.exp(-x))),
    "gelu": (nonlinear.gelu, lambda x: nonlinear.reference(nonlinear.Function.GELU, x)),
}
_BANK_FOR = {"softmax": nonlinear.Function.EXP, "sigmoid": nonlinear.Function.ONE_PLUS_EXP_NEG,
             "silu": nonlinear.Function.ONE_PLUS_EXP_NEG, "gelu": nonlinear.Function.GELU}


def cmd_nonlinear(args):
    cfg = nonlinear.NonlinearConfig(address_bits=args.address_bits)
    if args.lut_in:
        try:
            bank = nonlinear.load_bank(args.lut_in)
        except (OSError, TruncatedPayload) as exc:
            raise IOFailure(f"{args.lut_in}: {exc}") from exc
        if bank.function != _BANK_FOR[args.fn]:
            raise UsageError(f"{args.lut_in} holds a {bank.function.name} bank")
        cfg = bank.cfg
    else:
        bank = nonlinear.build_lut(_BANK_FOR[args.fn], cfg)
    if args.lut_out:
        try:
            nonlinear.save_bank(bank, args.lut_out)
        except OSError as exc:
            raise IOFailure(f"{args.lut_out}: {exc}") from exc
    fn, ref = _NONLINEAR[args.fn]
    if args.input:
        x = _load(args.input)
        x = x.reshape(-1, x.shape[-1]) if x.ndim else x.reshape(1, 1)
    else:
        rng = np.random.Generator(np.random.Philox(key=args.seed))
        x = rng.uniform(-args.range, args.range, (args.count, args.length))
    ys = np.stack([fn(v, cfg, bank) for v in x])
    row = {"fn": args.fn, "vectors": x.shape[0], "length": x.shape[1]}
    checks = []
    if args.fn == "softmax":
        dev = float(np.max(np.abs(ys.sum(axis=1) - 1.0)))
        row["max_sum_deviation"] = dev
        if "sums-to-one" in args.check:
            checks.append({"check": "sums-to-one", "passed": dev <= 2.0 ** -6,
                           "detail": f"max |sum - 1| = {dev!r}, bound 2^-6"})
    else:
        r = ref(x)
        rel = float(np.max(np.abs(ys - r) / np.maximum(np.abs(r), 2.0 ** -8)))
        row["max_rel_error"] = rel
        if "reference" in args.check:
            checks.append({"check": "reference", "passed": rel <= args.tolerance,
                           "detail": f"max rel error {rel!r}, bound {args.tolerance!r}"})
    if "sums-to-one" in args.check and args.fn != "softmax":
        raise UsageError("sums-to-one applies to softmax only")
    if args.tensor_out:
        _write_tensor(ys.astype(np.float32), args.tensor_out)
    return [row], checks


def cmd_cost(args):
    if args.all:
        labels = list(cost.TABLE_ONE)
    elif args.formats:
        labels = split_formats(args.formats)
    else:
        raise UsageError("give --all or --formats")
    weights = cost.GateWeights(chain_cell=args.chain_cell)
    try:
        rows = cost.table_one_rows(labels, weights)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return rows, []


def cmd_tune(args):
    if args.table:
        try:
            m, quality, overhead = tuner.load_quality_table(args.table)
        except OSError as exc:
            raise IOFailure(f"{args.table}: {exc}") from exc
        except (KeyError, json.JSONDecodeError) as exc:
            raise UsageError(f"{args.table}: malformed quality table ({exc})") from exc
    else:
        if args.m is None:
            raise UsageError("give --table or --m")
        m = args.m
        x = _data(args, (args.blocks, 32))
        quality = tuner.proxy_evaluator(x, m, exponent_bits=args.exponent_bits,
                                        block_size=args.block_size, rounding=args.rounding)
        overhead = None
    if overhead is None or args.overhead_source == "model":
        overhead = tuner.OVERHEADS[args.overhead](m, args.exponent_bits, args.block_size)
    q = [quality(o) for o in range(m)]
    h = [overhead(o) for o in range(m)]
    scores = tuner.score_candidates(q, h, args.w)
    best = tuner.select_from_tables(q, h, args.w)
    rows = [{"o": o, "quality": q[o], "overhead": h[o], "score": float(scores[o]),
             "selected": o == best} for o in range(m)]
    checks = []
    if args.expect is not None:
        checks.append({"check": f"selected o == {args.expect}", "passed": best == args.expect})
    return rows, checks


# -- parser ----------------------------------------------------------------------


def _global_flags(defaults):
    p = argparse.ArgumentParser(add_help=False)
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    p.add_argument("--seed", type=int, help="RNG seed for synthetic data (default 0)",
                   **({"default": 0} if defaults else kw))
    p.add_argument("--out", help="report path (default: stdout)",
                   **({"default": None} if defaults else kw))
    p.add_argument("--format", choices=("csv", "json"), help="report format (default csv)",
                   **({"default": "csv"} if defaults else kw))
    return p


def _data_flags(p, blocks=True):
    p.add_argument("--input", help="tensor file (BBT1) instead of synthetic data")
    p.add_argument("--dist", choices=tensor_io.DISTRIBUTIONS, default="gaussian",
                   help="synthetic distribution (default gaussian)")
    p.add_argument("--shape", help="synthetic shape, e.g. 1024,32")
    if blocks:
        p.add_argument("--blocks", type=int, default=10_000,
                       help="synthetic blocks of 32 when --shape is absent (default 10000)")


def _block_flags(p):
    p.add_argument("--exponent-bits", type=int, default=5, help="shared exponent width e (default 5)")
    p.add_argument("--block-size", type=int, default=32, help="elements per block N (default 32)")


def _rounding_flag(p, default):
    p.add_argument("--rounding", choices=("truncate", "rne"), default=default,
                   help=f"mantissa rounding (default {default})")


def build_parser():
    parser = _Parser(prog="bbfp", parents=[_global_flags(True)],
                     description="Bidirectional block floating point experiments.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_global_flags(False)]

    p = sub.add_parser("synth", parents=common, help="write a seeded synthetic tensor")
    p.add_argument("--dist", choices=tensor_io.DISTRIBUTIONS, default="gaussian",
                   help="distribution (default gaussian)")
    p.add_argument("--shape", default="1024,32", help="tensor shape (default 1024,32)")
    p.add_argument("--tensor-out", help="destination tensor file")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("quantize", parents=common, help="quantise a tensor and report the error")
    _data_flags(p, blocks=False)
    _block_flags(p)
    _rounding_flag(p, "truncate")
    p.add_argument("--dtype", default="BBFP(4,2)", help="block format, e.g. BBFP(4,2) or BFP4")
    p.add_argument("--offset", help="shared-exponent strategy, e.g. max-2 (default max-(m-o))")
    p.add_argument("--blocks-out", help="write the packed blocks here")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("sweep", parents=common, help="error table over formats and strategies")
    _data_flags(p)
    _block_flags(p)
    _rounding_flag(p, "rne")
    p.add_argument("--formats", default="BFP4,BBFP(4,2)", help="comma-separated block formats")
    p.add_argument("--strategies", default="max,max-1,max-2,max-3",
                   help="comma-separated shared-exponent strategies for BBFP formats")
    p.add_argument("--assert", dest="asserts", action="append", default=[],
                   help="ordering to check, e.g. 'max-3>max-1>max-2' or 'BBFP(4,2)<BFP4'")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gemm", parents=common, help="block GEMM through the MAC datapath model")
    p.add_argument("--a", help="left operand tensor file (M x K)")
    p.add_argument("--b", help="right operand tensor file (K x N)")
    p.add_argument("--shape", default="16,64,16", help="synthetic M,K,N (default 16,64,16)")
    p.add_argument("--dist", choices=tensor_io.DISTRIBUTIONS, default="gaussian",
                   help="synthetic distribution (default gaussian)")
    _block_flags(p)
    _rounding_flag(p, "truncate")
    p.add_argument("--dtype", default="BBFP(4,2)", help="block format")
    p.add_argument("--method", choices=("gate", "int"), default="int",
                   help="gate-level or integer dot-product kernel (default int)")
    p.add_argument("--accumulate", choices=("fp64", "fp32"), default="fp64",
                   help="cross-block accumulation precision (default fp64)")
    p.add_argument("--workers", type=int, default=1, help="threads (default 1)")
    p.add_argument("--check", action="store_true", help="compare with the dequantised oracle")
    p.add_argument("--tensor-out", help="write the product here")
    p.set_defaults(func=cmd_gemm)

    p = sub.add_parser("nonlinear", parents=common, help="run the LUT nonlinear unit")
    p.add_argument("--fn", choices=sorted(_NONLINEAR), required=True, help="function")
    p.add_argument("--input", help="tensor file; rows are vectors")
    p.add_argument("--count", type=int, default=100, help="random vectors (default 100)")
    p.add_argument("--length", type=int, default=128, help="random vector length (default 128)")
    p.add_argument("--range", type=float, default=8.0, help="random inputs in [-r, r] (default 8)")
    p.add_argument("--address-bits", type=int, default=7, help="LUT address bits (default 7)")
    p.add_argument("--check", action="append", default=[], choices=("sums-to-one", "reference"),
                   help="sums-to-one (softmax) or reference (max relative error <= --tolerance)")
    p.add_argument("--tolerance", type=float, default=0.25, help="bound for --check reference")
    p.add_argument("--lut-in", help="load the LUT bank from this file")
    p.add_argument("--lut-out", help="save the LUT bank to this file")
    p.add_argument("--tensor-out", help="write the outputs here")
    p.set_defaults(func=cmd_nonlinear)

    p = sub.add_parser("cost", parents=common, help="equivalent bit-width and gate estimates")
    p.add_argument("--all", action="store_true", help="all six reference formats")
    p.add_argument("--formats", help="comma-separated formats, e.g. FP16,INT8,BBFP(6,3)")
    p.add_argument("--chain-cell", type=float, default=None,
                   help="override the carry-chain cell weight (default FA - AND - 2 XOR)")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("tune", parents=common, help="select the overlap width")
    p.add_argument("--table", help='JSON {"m": .., "entries": [{"o", "quality", "overhead"?}]}')
    p.add_argument("--m", type=int, help="mantissa width when tuning on data")
    p.add_argument("--w", type=float, default=0.5, help="overhead weight in [0, 1] (default 0.5)")
    p.add_argument("--overhead", choices=sorted(tuner.OVERHEADS), default="bitwidth",
                   help="overhead model when the table has none (default bitwidth)")
    p.add_argument("--overhead-source", choices=("table", "model"), default="table",
                   help="prefer table overheads when present, or always use --overhead")
    p.add_argument("--expect", type=int, help="fail unless this o is selected")
    _data_flags(p)
    _block_flags(p)
    _rounding_flag(p, "rne")
    p.set_defaults(func=cmd_tune)
    return parser


def _render(command, seed, rows, checks, kind):
    if kind == "json":
        doc = {"command": command, "seed": seed, "rows": rows, "checks": checks}
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"
    buf = io.StringIO()
    if rows:
        fields = list(dict.fromkeys(k for row in rows for k in row))
        writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return buf.getvalue()


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        rows, checks = args.func(args)
        text = _render(args.command, args.seed, rows, checks, args.format)
        if args.out:
            try:
                Path(args.out).write_text(text)
            except OSError as exc:
                raise IOFailure(f"{args.out}: {exc}") from exc
        else:
            sys.stdout.write(text)
    except UsageError as exc:
        print(f"bbfp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IOFailure as exc:
        print(f"bbfp: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (BbfpError, CandidateEvaluationError, ValueError) as exc:
        print(f"bbfp: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for check in checks:
        if not check["passed"]:
            print(f"bbfp: check failed: {check['check']}", file=sys.stderr)
    return EXIT_ASSERT if any(not c["passed"] for c in checks) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
