"""Deterministic vector math and splittable counter-based random streams.

Vectors are 1-D float64 numpy arrays. Every reduction in this module fixes
its accumulation order (left to right over components), so results are
bit-identical across runs, platforms, and batched/unbatched call paths.
`matmul_fixed_order` extends the same guarantee to dense layers: each output
element is accumulated in ascending inner-index order regardless of batch
size, which makes a batch-of-one forward pass literally equal to a batched
one.

Random streams wrap the Philox counter-based bit generator keyed by
(seed, stream_id): the same pair reproduces the same draw sequence on any
platform, and distinct stream ids are statistically independent. Stream ids
are partitioned by purpose so independent components never share a stream:

    TRAIN_STREAM         training batch assembly
    EVAL_STREAM          training-time evaluation probes
    MODEL_INIT_STREAM    parameter initialization
    CHAIN_STREAM_BASE+i  sampler chain i (initial noise, then per-step noise)
    VERIFY_STREAM_BASE+k verification probes
    BANK_STREAM_BASE+k   oracle trajectory banks
    METRIC_STREAM_BASE+k metric projections (sliced distances)
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericError

TRAIN_STREAM = 0
EVAL_STREAM = 1
MODEL_INIT_STREAM = 2
CHAIN_STREAM_BASE = 1 << 32
VERIFY_STREAM_BASE = 2 << 32
BANK_STREAM_BASE = 3 << 32
METRIC_STREAM_BASE = 4 << 32

_MASK64 = (1 << 64) - 1


class RngStream:
    """Deterministic random stream keyed by (seed, stream_id).

    Thin wrapper over numpy's Philox generator. Single-owner by
    convention: never share one stream across concurrent consumers;
    give each its own stream id instead.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def standard_normal(self, size) -> np.ndarray:
        return self._gen.standard_normal(size)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        return self._gen.uniform(low, high, size)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream={self.stream})"


def sample_standard_normal(rng: RngStream, d: int) -> np.ndarray:
    """d i.i.d. N(0,1) draws (numpy ziggurat transform, float64)."""
    if d < 1:
        raise DimensionError(f"need d >= 1, got {d}")
    return rng.standard_normal(d)


def vector(values) -> np.ndarray:
    """Validate and convert to a finite 1-D float64 vector."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 1 or a.shape[0] < 1:
        raise DimensionError(f"expected a 1-D vector, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericError("vector contains non-finite entries")
    return a


def dot(a, b) -> float:
    """Inner product with pinned left-to-right accumulation order."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"dot requires equal-length vectors, got {a.shape} and {b.shape}")
    acc = 0.0
    for i in range(a.shape[0]):
        acc += a[i] * b[i]
    return float(acc)


def l2_norm(a) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sqrt(dot(a, a)))


def rowwise_dot(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Per-row inner products of (n, d) arrays, same accumulation order as `dot`."""
    if A.shape != B.shape or A.ndim != 2:
        raise DimensionError(f"rowwise_dot requires equal (n, d) arrays, got {A.shape} and {B.shape}")
    acc = A[:, 0] * B[:, 0]
    for k in range(1, A.shape[1]):
        acc = acc + A[:, k] * B[:, k]
    return acc


def rowwise_norm(A: np.ndarray) -> np.ndarray:
    return np.sqrt(rowwise_dot(A, A))


def matmul_fixed_order(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """A @ B with accumulation pinned to ascending inner-index order.

    Each output element is a left-to-right sum over the inner dimension,
    independent of the number of rows in A, so batched and single-row
    results are bit-identical.
    """
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise DimensionError(f"matmul_fixed_order: incompatible shapes {A.shape} and {B.shape}")
    out = A[:, 0, None] * B[0]
    for k in range(1, A.shape[1]):
        out += A[:, k, None] * B[k]
    return out


def ensure_finite(a: np.ndarray, context: str, step_index: int | None = None) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NumericError(f"non-finite values in {context}", step_index=step_index)
    return a
