"""
Picking the overlap width
=========================

Each candidate o gets a quality figure and an overhead; both are divided by
their maximum and mixed with weight w.  Here quality is the relative
quantisation error on a synthetic corpus and overhead the gate estimate.
"""

import numpy as np

from bbfp.tensor_io import synth_tensor
from bbfp.tuner import gate_overhead, proxy_evaluator, score_candidates, select_overlap

# the hand-worked example
print("worked example ->", select_overlap(lambda o: [10, 8, 9][o], 0.5, 3, lambda o: [5, 6, 7][o]))

m = 6
x = synth_tensor("laplacian", (4000, 32), seed=5)
quality = proxy_evaluator(x, m, rounding="rne")
overhead = gate_overhead(m)
q = [quality(o) for o in range(m)]
h = [overhead(o) for o in range(m)]
for o in range(m):
    print(f"o={o}: quality={q[o]:.5f} overhead={h[o]:.0f}")
for w in (0.0, 0.25, 0.5, 0.75, 1.0):
    s = score_candidates(q, h, w)
    print(f"w={w:.2f} -> o={int(np.argmin(s))}")
