"""
Choosing the shared exponent
============================

Sweep the shared-exponent offset k (E_shared = max - k) for BBFP(4,2) on
three synthetic corpora and compare with BFP4.  k = m - o = 2 is the
default; k = 3 pushes the largest elements out of the flag-1 window.
"""

from bbfp.analysis import sweep, sweep_csv
from bbfp.cost import parse_format
from bbfp.tensor_io import synth_tensor

formats = [parse_format("BFP4"), parse_format("BBFP(4,2)")]
for seed, dist in enumerate(("gaussian", "laplacian", "outlier"), start=1):
    x = synth_tensor(dist, (10_000, 32), seed=seed)
    rows = sweep(x, formats, offsets=[0, 1, 2, 3], seed=seed)
    print(f"# {dist}")
    print(sweep_csv(rows))

# the same table from the command line:
#   bbfp sweep --dist outlier --seed 3 --assert 'max-3>max-1>max-2' --assert 'BBFP(4,2)<BFP4'
