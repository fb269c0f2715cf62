"""Bidirectional block floating point: format, arithmetic, analysis and
nonlinear-unit models."""

from .errors import (
    AccOverflow,
    BadMagic,
    BbfpError,
    CandidateEvaluationError,
    ConfigMismatch,
    EmptyBlock,
    NonFiniteInput,
    TruncatedPayload,
)
from .format import (
    BbfpBlock,
    BbfpConfig,
    BfpBlock,
    Rounding,
    decode_block,
    decode_block_bfp,
    encode_block,
    encode_block_bfp,
    pack_blocks,
    quantize,
    unpack_blocks,
)
from .arith import dot_product, gemm, multiply_blocks, sparse_add
from .analysis import empirical_error, exponent_histogram, model_variance, predicted_variance, sweep
from .cost import equivalent_bit_width, gate_estimate, memory_efficiency, parse_format
from .tuner import select_overlap
from .tensor_io import read_tensor, synth_tensor, write_tensor

__version__ = "0.1.0"
