"""
Block dot products and GEMM
===========================

Products of two BBFP elements carry a 2-bit flag telling the adder how far
to shift them (0, m-o or 2(m-o) bits).  The gate-level adder uses full
adders only where a shifted product can have ones and cheaper carry-chain
cells elsewhere.  Results are exact.
"""

import numpy as np

from bbfp import BbfpConfig, decode_block, dot_product, encode_block, gemm
from bbfp.arith import multiply_blocks, product_shift

cfg = BbfpConfig(4, 2, block_size=4)
x = encode_block(np.array([1.5, 0.25, -3.0, 0.0]), cfg)
prod = multiply_blocks(x, x)
print("flag2:   ", prod.elements.flag2)
print("mantissa:", prod.elements.mantissa)
print("shift:   ", product_shift(prod.elements.flag2, cfg))
print("x . x =", dot_product(x, x), "(decoded:", float(decode_block(x) @ decode_block(x)), ")")

rng = np.random.default_rng(1)
a, b = rng.normal(size=(16, 96)), rng.normal(size=(96, 8))
for m, o in [(4, 2), (6, 3), (8, 4)]:
    c = gemm(a, b, BbfpConfig(m, o), method="int")
    rel = np.linalg.norm(c - a @ b) / np.linalg.norm(a @ b)
    print(f"BBFP({m},{o}) GEMM relative error vs float64: {rel:.4f}")

# 16-element blocks mirror a 4x4 PE tile; fp32 rounds the cross-block sum
c16 = gemm(a, b, BbfpConfig(6, 3), block_size=16, accumulate="fp32", workers=2)
print("PE-tile / fp32 accumulate:", c16[0, :4])
