"""Embedding representations, quantizers and distance kernels.

Vectors are plain numpy arrays:

* FP32 embeddings: ``float32`` arrays of shape ``(D,)`` or ``(n, D)``.
* Binary embeddings: bit-packed ``uint8`` arrays of shape ``(D // 8,)``,
  most significant bit first (``np.packbits`` order).
* INT8 embeddings: ``int8`` arrays with components in ``[-127, 127]``.

Batch variants accept 2-D inputs and operate row-wise.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

QUANTIZER_MAGIC = b"RQNT"
DEFAULT_DIM = 1024
INT8_MAX = 127


class DimensionError(ValueError):
    """Raised when vector dimensionalities disagree."""


def as_fp32_matrix(vectors, *, name="vectors", byte_aligned=False) -> np.ndarray:
    """Validate and convert input to a finite ``(n, D)`` float32 matrix.

    ``byte_aligned`` additionally requires D to be a multiple of 8, which
    anything stored as packed bits on flash needs.
    """
    try:
        arr = np.asarray(vectors, dtype=np.float32)
    except ValueError:
        raise DimensionError(f"{name} has ragged dimensions") from None
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    d = arr.shape[1]
    if d == 0:
        raise DimensionError(f"{name} has zero dimensions")
    if byte_aligned and d % 8:
        raise DimensionError(f"dimension must be a multiple of 8, got {d}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite components")
    return arr


@dataclass(frozen=True)
class QuantizerModel:
    """Per-dimension binarization cutoffs and INT8 scales."""

    thresholds: np.ndarray
    int8_scales: np.ndarray

    def __post_init__(self):
        th = np.ascontiguousarray(self.thresholds, dtype=np.float32)
        sc = np.ascontiguousarray(self.int8_scales, dtype=np.float32)
        if th.ndim != 1 or th.shape != sc.shape:
            raise DimensionError("thresholds and int8_scales must be 1-D of equal length")
        if not np.all(sc > 0):
            raise ValueError("int8_scales must be strictly positive")
        object.__setattr__(self, "thresholds", th)
        object.__setattr__(self, "int8_scales", sc)

    @property
    def dim(self) -> int:
        return int(self.thresholds.shape[0])

    def to_bytes(self) -> bytes:
        header = QUANTIZER_MAGIC + struct.pack("<I", self.dim)
        return header + self.thresholds.astype("<f4").tobytes() + self.int8_scales.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "QuantizerModel":
        if len(blob) < 8 or blob[:4] != QUANTIZER_MAGIC:
            raise ValueError("not a quantizer blob (bad magic)")
        (d,) = struct.unpack_from("<I", blob, 4)
        if len(blob) != 8 + 8 * d:
            raise ValueError(f"quantizer blob length {len(blob)} does not match D={d}")
        th = np.frombuffer(blob, dtype="<f4", count=d, offset=8)
        sc = np.frombuffer(blob, dtype="<f4", count=d, offset=8 + 4 * d)
        return cls(th.astype(np.float32), sc.astype(np.float32))

    def __eq__(self, other):
        if not isinstance(other, QuantizerModel):
            return NotImplemented
        return np.array_equal(self.thresholds, other.thresholds) and np.array_equal(
            self.int8_scales, other.int8_scales
        )

    __hash__ = None


def train_quantizer(sample) -> QuantizerModel:
    """Mean thresholds and max-abs INT8 scales over ``sample``."""
    x = as_fp32_matrix(sample, name="sample")
    thresholds = x.astype(np.float64).mean(axis=0)
    scales = np.abs(x - thresholds).max(axis=0)
    scales = np.where(scales > 0, scales, 1.0)
    return QuantizerModel(thresholds.astype(np.float32), scales.astype(np.float32))


def _check_dims(x: np.ndarray, q: QuantizerModel):
    if x.shape[-1] != q.dim:
        raise DimensionError(f"vector has D={x.shape[-1]}, quantizer expects {q.dim}")


def binarize(v, q: QuantizerModel) -> np.ndarray:
    """Bit ``d`` is set iff ``v[d] > thresholds[d]``; output is bit-packed."""
    x = np.asarray(v, dtype=np.float32)
    _check_dims(x, q)
    return np.packbits(x > q.thresholds, axis=-1)


def quantize_int8(v, q: QuantizerModel) -> np.ndarray:
    x = np.asarray(v, dtype=np.float32)
    _check_dims(x, q)
    scaled = INT8_MAX * (x.astype(np.float64) - q.thresholds) / q.int8_scales
    return np.clip(np.rint(scaled), -INT8_MAX, INT8_MAX).astype(np.int8)


def dequantize_int8(codes, q: QuantizerModel) -> np.ndarray:
    """Approximate inverse of :func:`quantize_int8`."""
    c = np.asarray(codes, dtype=np.float64)
    return (c * q.int8_scales / INT8_MAX + q.thresholds).astype(np.float32)


def popcount(packed: np.ndarray) -> np.ndarray:
    """Number of set bits along the last axis of a uint8 array."""
    return np.bitwise_count(np.asarray(packed, dtype=np.uint8)).sum(axis=-1, dtype=np.int64)


def hamming_distance(a, b) -> int:
    a = np.asarray(a, dtype=np.uint8)
    b = np.asarray(b, dtype=np.uint8)
    if a.shape != b.shape:
        raise DimensionError(f"bit-vector lengths differ: {a.shape} vs {b.shape}")
    return int(popcount(np.bitwise_xor(a, b)))


def hamming_to_many(query_bits, db_bits) -> np.ndarray:
    """Hamming distance from one packed query to each row of ``db_bits``."""
    q = np.asarray(query_bits, dtype=np.uint8)
    db = np.asarray(db_bits, dtype=np.uint8)
    if db.shape[-1] != q.shape[-1]:
        raise DimensionError("bit-vector lengths differ")
    if q.shape[-1] % 8 == 0 and db.flags.c_contiguous:
        qw = np.ascontiguousarray(q).view(np.uint64)
        dw = db.view(np.uint64)
        return np.bitwise_count(dw ^ qw).sum(axis=-1, dtype=np.int64)
    return popcount(db ^ q)


def int8_squared_l2(a, b) -> int:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"INT8 vector shapes differ: {a.shape} vs {b.shape}")
    diff = a.astype(np.int64) - b.astype(np.int64)
    return int(np.dot(diff, diff))


def int8_squared_l2_many(query, db) -> np.ndarray:
    q = np.asarray(query).astype(np.int32)
    d = np.asarray(db).astype(np.int32)
    if d.shape[-1] != q.shape[-1]:
        raise DimensionError("INT8 vector lengths differ")
    diff = d - q
    # per-row sum of at most D * 254^2 fits easily in int64
    return np.einsum("ij,ij->i", diff, diff, dtype=np.int64)


def fp32_squared_l2(a, b) -> float:
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.shape != b.shape:
        raise DimensionError(f"FP32 vector shapes differ: {a.shape} vs {b.shape}")
    diff = a.astype(np.float64) - b.astype(np.float64)
    return float(np.dot(diff, diff))


class BinaryQuantizer(TransformerMixin, BaseEstimator):
    """Estimator wrapper around :func:`train_quantizer`.

    ``transform`` returns packed bits by default; ``output="int8"`` returns
    INT8 codes instead.

    Parameters
    ----------
    output : {"binary", "int8"}
        Representation produced by :meth:`transform`.
    """

    def __init__(self, output="binary"):
        self.output = output

    def fit(self, X, y=None):
        self.model_ = train_quantizer(X)
        self.n_features_in_ = self.model_.dim
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        x = as_fp32_matrix(X, name="X")
        if self.output == "binary":
            return binarize(x, self.model_)
        if self.output == "int8":
            return quantize_int8(x, self.model_)
        raise ValueError(f"unknown output {self.output!r}; expected 'binary' or 'int8'")
