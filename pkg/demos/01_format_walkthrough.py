"""
Encoding a block in BBFP
========================

A BBFP block stores one shared exponent and, per element, a sign, a flag and
an m-bit mantissa.  The shared exponent sits m - o below the block maximum;
elements above it set the flag and use a window m - o bits higher.
"""

import numpy as np

from bbfp import BbfpConfig, decode_block, encode_block, encode_block_bfp, decode_block_bfp

cfg = BbfpConfig(4, 2, block_size=4)
x = np.array([1.5, 0.25, -3.0, 0.0])
blk = encode_block(x, cfg)

print("shared exponent (unbiased):", int(blk.shared_exponent) - cfg.bias)
for v, el in zip(x, blk.elements):
    print(f"{v:6.2f} -> sign={el.sign} flag={el.flag} mantissa={el.mantissa:2d}")
print("decoded:", decode_block(blk))

bfp = encode_block_bfp(x, cfg)
print("BFP4 shared exponent:", int(bfp.shared_exponent) - cfg.bias, "mantissas:", bfp.mantissa)
print("BFP4 decoded:", decode_block_bfp(bfp))

# over many Gaussian blocks the lower shared exponent keeps more small-value bits
rng = np.random.default_rng(0)
y = rng.normal(size=(1000, 32))
big = BbfpConfig(4, 2)
mse_bbfp = np.mean((decode_block(encode_block(y, big)) - y) ** 2)
mse_bfp = np.mean((decode_block_bfp(encode_block_bfp(y, big)) - y) ** 2)
print(f"MSE  BBFP(4,2): {mse_bbfp:.5f}  BFP4: {mse_bfp:.5f}")
