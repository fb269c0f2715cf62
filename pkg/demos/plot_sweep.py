"""
Companion plot for the sweep report
===================================

Reads a CSV written by ``bbfp sweep`` and draws MSE per strategy, one group
of bars per format.  Usage::

    bbfp sweep --dist gaussian --out sweep.csv
    python demos/plot_sweep.py sweep.csv sweep.png
"""

import csv
import sys

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

src, dst = sys.argv[1], sys.argv[2] if len(sys.argv) > 2 else "sweep.png"
with open(src) as fh:
    rows = list(csv.DictReader(fh))

labels = [f"{r['format']}\n{r['strategy']}" for r in rows]
fig, ax = plt.subplots(figsize=(1 + 0.9 * len(rows), 3.5))
ax.bar(range(len(rows)), [float(r["mse"]) for r in rows], color="tab:blue")
ax.set_xticks(range(len(rows)), labels, fontsize=8)
ax.set_yscale("log")
ax.set_ylabel("MSE")
fig.tight_layout()
fig.savefig(dst, dpi=120)
print("wrote", dst)
