"""Tensor files and seeded synthetic data.

File layout (all integers little-endian)::

    b"BBT1" | dtype:u8 (0 = float32, 1 = float16) | ndim:u8 | dims: ndim x u64
    | row-major payload
"""

from __future__ import annotations

import struct
import warnings
from pathlib import Path

import numpy as np

from .errors import BadMagic, NonFiniteInput, TruncatedPayload

__all__ = ["MAGIC", "DISTRIBUTIONS", "write_tensor", "read_tensor", "synth_tensor"]

MAGIC = b"BBT1"
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f2")}
_CODES = {np.dtype("float32"): 0, np.dtype("float16"): 1}

DISTRIBUTIONS = ("gaussian", "laplacian", "outlier")
OUTLIER_FRACTION = 0.01
OUTLIER_RANGE = (20.0, 60.0)


def _first_nonfinite(a):
    bad = ~np.isfinite(a)
    if bad.any():
        raise NonFiniteInput(index=int(np.flatnonzero(bad.ravel())[0]))


def write_tensor(tensor, path):
    """Write ``tensor`` as float16 if it already is, otherwise float32."""
    a = np.asarray(tensor)
    if a.dtype != np.float16:
        a = a.astype(np.float32)
    _first_nonfinite(a)
    if a.ndim > 255:
        raise ValueError("too many dimensions")
    header = MAGIC + struct.pack("<BB", _CODES[a.dtype], a.ndim)
    header += struct.pack(f"<{a.ndim}Q", *a.shape)
    payload = np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path):
    """Read a tensor file; float16 subnormals are flushed to signed zero."""
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    if len(data) < 6:
        raise TruncatedPayload("TruncatedPayload: header")
    code, ndim = struct.unpack_from("<BB", data, 4)
    if code not in _DTYPES:
        raise BadMagic(f"unknown dtype code {code}")
    dims_end = 6 + 8 * ndim
    if len(data) < dims_end:
        raise TruncatedPayload("TruncatedPayload: dims")
    shape = struct.unpack_from(f"<{ndim}Q", data, 6)
    dtype = _DTYPES[code]
    need = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(data) - dims_end < need:
        raise TruncatedPayload("TruncatedPayload")
    a = np.frombuffer(data, dtype=dtype, count=need // dtype.itemsize, offset=dims_end)
    a = a.reshape(shape).astype(dtype.newbyteorder("="))
    _first_nonfinite(a)
    if code == 1:
        sub = (a != 0) & (np.abs(a) < np.finfo(np.float16).tiny)
        if sub.any():
            warnings.warn(f"flushed {int(sub.sum())} float16 subnormals to zero", stacklevel=2)
            a = np.where(sub, np.copysign(np.float16(0), a), a)
    return a


def synth_tensor(dist, shape, seed, outlier_fraction=OUTLIER_FRACTION):
    """Seeded synthetic data from a counter-based (Philox) generator.

    ``outlier`` is N(0, 1) with a ``outlier_fraction`` share of entries
    replaced by values of magnitude uniform in [20, 60] and random sign.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    if dist == "gaussian":
        return rng.standard_normal(shape)
    if dist == "laplacian":
        return rng.laplace(0.0, 1.0, shape)
    if dist == "outlier":
        x = rng.standard_normal(shape)
        hit = rng.random(shape) < outlier_fraction
        mag = rng.uniform(*OUTLIER_RANGE, size=shape)
        sign = np.where(rng.random(shape) < 0.5, -1.0, 1.0)
        return np.where(hit, sign * mag, x)
    raise ValueError(f"unknown distribution {dist!r}; choose from {DISTRIBUTIONS}")
