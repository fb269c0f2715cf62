"""
The LUT nonlinear unit
======================

Function samples live in sub-tables selected by (sign, exponent) and
addressed by the top 7 mantissa bits.  Softmax runs max -> align ->
subtract -> exp LUT -> adder tree -> divide -> encode; sigmoid divides one
by a 1 + e^-x lookup, and SILU multiplies that by the input.
"""

import numpy as np

from bbfp.nonlinear import Function, Pipeline, build_lut, gelu, sigmoid, silu, softmax, softmax_stages, NonlinearConfig
from bbfp.nonlinear import _finish, _start

cfg = NonlinearConfig()
for f in Function:
    print(f"{f.name:18s} {build_lut(f, cfg).n_subtables} sub-tables")

rng = np.random.default_rng(0)
x = rng.normal(0, 3, 128)
y = softmax(x)
ref = np.exp(x - x.max()) / np.exp(x - x.max()).sum()
print(f"softmax: sum={y.sum():.5f}  max abs error={np.abs(y - ref).max():.2e}")

t = np.linspace(-6, 6, 9)
print("x      ", np.round(t, 2))
print("sigmoid", np.round(sigmoid(t), 4))
print("silu   ", np.round(silu(t), 4))
print("gelu   ", np.round(gelu(t), 4))

# the staged emulation gives the same bits as the plain composition
pipe = Pipeline(softmax_stages(cfg, build_lut(Function.EXP, cfg)))
outs = [_finish(v) for v in pipe.run([_start(v) for v in rng.normal(size=(4, 64))])]
print("pipeline cycles:", pipe.cycles, "busy:", pipe.busy_cycles)
