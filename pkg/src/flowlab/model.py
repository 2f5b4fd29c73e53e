"""Learnable conditional velocity field: a small dense net with SiLU units.

The network maps [x, t, embed(cond)] through fully connected layers to a
velocity in R^d. Conditioning concatenates a learned embedding row at the
input; the null condition owns its own trained row (index n_labels), it is
never a zero constant. Forward passes use fixed-order accumulation
(`matmul_fixed_order`) so outputs are bit-identical for batched and
single-point evaluation and across platforms.

Checkpoints are little-endian binary: magic "FGV1", an int64 header
(d, n_labels, embed_dim, n_hidden, widths...), metadata (epochs int64,
final_loss float64, seed int64), then raw float64 parameter arrays in
declaration order: embedding table (n_labels+1, embed_dim) row-major, then
per layer W (fan_in, fan_out) row-major followed by b (fan_out,).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import CheckpointFormatError, DimensionError, LabelError, RangeError
from .numerics import RngStream, matmul_fixed_order

_MAGIC = b"FGV1"


def _silu(z: np.ndarray) -> np.ndarray:
    # sigmoid via tanh: stable for large |z|, no overflow warnings
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return z * sig


def _silu_prime(z: np.ndarray) -> np.ndarray:
    sig = 0.5 * (1.0 + np.tanh(0.5 * z))
    return sig * (1.0 + z * (1.0 - sig))


@dataclass
class TrainMeta:
    """Checkpoint metadata recorded by the training loop."""

    epochs: int = 0
    final_loss: float = 0.0
    seed: int = 0


class MlpVelocityField:
    """v(x, t, cond) -> R^d with a learned null-condition pathway.

    cond is an int label in [0, n_labels), None for the null condition,
    or an int array mixing label indices with n_labels (the null row).
    """

    def __init__(
        self,
        dim: int,
        n_labels: int,
        embed_dim: int = 8,
        hidden: tuple[int, ...] = (64, 64, 64),
        rng: RngStream | None = None,
    ):
        if dim < 1 or n_labels < 1 or embed_dim < 1:
            raise DimensionError("dim, n_labels and embed_dim must all be >= 1")
        self.dim = dim
        self.n_labels = n_labels
        self.embed_dim = embed_dim
        self.hidden = tuple(int(w) for w in hidden)
        if any(w < 1 for w in self.hidden):
            raise DimensionError(f"hidden widths must be >= 1, got {hidden}")

        in_dim = dim + 1 + embed_dim
        dims = [in_dim, *self.hidden, dim]
        self.embed = np.zeros((n_labels + 1, embed_dim), dtype=np.float64)
        self.weights: list[np.ndarray] = [
            np.zeros((dims[i], dims[i + 1]), dtype=np.float64) for i in range(len(dims) - 1)
        ]
        self.biases: list[np.ndarray] = [
            np.zeros(dims[i + 1], dtype=np.float64) for i in range(len(dims) - 1)
        ]
        if rng is not None:
            self._init_params(rng)

    def _init_params(self, rng: RngStream) -> None:
        # symmetric uniform scaled by 1/sqrt(fan_in); draw order pinned to
        # declaration order (embedding, then per-layer W, b)
        bound = 1.0 / np.sqrt(self.embed_dim)
        self.embed = rng.uniform((self.n_labels + 1, self.embed_dim), -bound, bound)
        for i, w in enumerate(self.weights):
            bound = 1.0 / np.sqrt(w.shape[0])
            self.weights[i] = rng.uniform(w.shape, -bound, bound)
            self.biases[i] = rng.uniform(self.biases[i].shape, -bound, bound)

    # -- condition handling -------------------------------------------------

    @property
    def null_index(self) -> int:
        return self.n_labels

    def _cond_rows(self, cond, n: int) -> np.ndarray:
        if cond is None:
            return np.full(n, self.null_index, dtype=np.int64)
        idx = np.asarray(cond, dtype=np.int64)
        if idx.ndim == 0:
            idx = np.full(n, int(idx), dtype=np.int64)
        elif idx.shape != (n,):
            raise DimensionError(f"cond array must have shape ({n},), got {idx.shape}")
        if idx.min() < 0 or idx.max() > self.null_index:
            raise LabelError(
                f"condition indices must lie in [0, {self.null_index}] "
                f"(labels 0..{self.n_labels - 1}, null={self.null_index})"
            )
        return idx

    # -- forward / backward --------------------------------------------------

    def forward(self, x, t: float, cond) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.dim,):
            raise DimensionError(f"x must have shape ({self.dim},), got {x.shape}")
        return self.forward_batch(x[None, :], t, cond)[0]

    def forward_batch(self, X: np.ndarray, t, cond) -> np.ndarray:
        inp = self._assemble_input(X, t, cond)
        h = inp
        for i in range(len(self.weights) - 1):
            h = _silu(matmul_fixed_order(h, self.weights[i]) + self.biases[i])
        return matmul_fixed_order(h, self.weights[-1]) + self.biases[-1]

    def _assemble_input(self, X, t, cond) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise DimensionError(f"X must have shape (n, {self.dim}), got {X.shape}")
        n = X.shape[0]
        tcol = np.broadcast_to(np.asarray(t, dtype=np.float64), (n,))
        if tcol.min() < 0.0 or tcol.max() > 1.0:
            raise RangeError("t must lie in [0, 1]")
        rows = self._cond_rows(cond, n)
        return np.concatenate([X, tcol[:, None], self.embed[rows]], axis=1)

    def backward(self, X: np.ndarray, t, cond, residual: np.ndarray) -> np.ndarray:
        """Gradient of 0.5 * sum_i ||residual_i||^2 w.r.t. all parameters (flat).

        `residual` must equal forward_batch(X, t, cond) - target, one row
        per item. Layout matches `params_flat`.
        """
        X = np.asarray(X, dtype=np.float64)
        residual = np.asarray(residual, dtype=np.float64)
        if residual.shape != (X.shape[0], self.dim):
            raise DimensionError(f"residual must have shape ({X.shape[0]}, {self.dim})")
        n = X.shape[0]
        rows = self._cond_rows(cond, n)

        inp = self._assemble_input(X, t, cond)
        acts = [inp]
        pre = []
        h = inp
        for i in range(len(self.weights) - 1):
            z = matmul_fixed_order(h, self.weights[i]) + self.biases[i]
            pre.append(z)
            h = _silu(z)
            acts.append(h)

        g_w = [np.empty(0)] * len(self.weights)
        g_b = [np.empty(0)] * len(self.biases)
        dz = residual  # output layer is linear, so this is its pre-activation grad
        d_in0 = None
        for i in range(len(self.weights) - 1, -1, -1):
            g_w[i] = acts[i].T @ dz
            g_b[i] = dz.sum(axis=0)
            d_act = dz @ self.weights[i].T
            if i > 0:
                dz = d_act * _silu_prime(pre[i - 1])
            else:
                d_in0 = d_act

        g_embed = np.zeros_like(self.embed)
        np.add.at(g_embed, rows, d_in0[:, self.dim + 1 :])

        return self._flatten(g_embed, g_w, g_b)

    # -- parameter access ----------------------------------------------------

    def _flatten(self, embed, weights, biases) -> np.ndarray:
        parts = [embed.ravel()]
        for w, b in zip(weights, biases):
            parts.append(w.ravel())
            parts.append(b.ravel())
        return np.concatenate(parts)

    def params_flat(self) -> np.ndarray:
        return self._flatten(self.embed, self.weights, self.biases)

    def set_params_flat(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got {flat.shape}")
        pos = 0

        def take(shape):
            nonlocal pos
            size = int(np.prod(shape))
            out = flat[pos : pos + size].reshape(shape).copy()
            pos += size
            return out

        self.embed = take(self.embed.shape)
        for i in range(len(self.weights)):
            self.weights[i] = take(self.weights[i].shape)
            self.biases[i] = take(self.biases[i].shape)

    @property
    def n_params(self) -> int:
        total = self.embed.size
        for w, b in zip(self.weights, self.biases):
            total += w.size + b.size
        return total


# -- checkpoint serialization ------------------------------------------------


def save_model(field: MlpVelocityField, meta: TrainMeta | None = None) -> bytes:
    meta = meta or TrainMeta()
    head = [field.dim, field.n_labels, field.embed_dim, len(field.hidden), *field.hidden]
    out = bytearray(_MAGIC)
    out += struct.pack("<" + "q" * len(head), *head)
    out += struct.pack("<qdq", meta.epochs, meta.final_loss, meta.seed)
    out += field.embed.astype("<f8").tobytes()
    for w, b in zip(field.weights, field.biases):
        out += w.astype("<f8").tobytes()
        out += b.astype("<f8").tobytes()
    return bytes(out)


def load_model(data: bytes) -> tuple[MlpVelocityField, TrainMeta]:
    if len(data) < 4 or data[:4] != _MAGIC:
        raise CheckpointFormatError("bad magic: not a recognized checkpoint")
    pos = 4

    def unpack(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise CheckpointFormatError("truncated checkpoint header")
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    dim, n_labels, embed_dim, n_hidden = unpack("<qqqq")
    if min(dim, n_labels, embed_dim) < 1 or n_hidden < 0 or n_hidden > 1024:
        raise CheckpointFormatError("implausible checkpoint header values")
    hidden = unpack("<" + "q" * n_hidden) if n_hidden else ()
    epochs, final_loss, seed = unpack("<qdq")

    field = MlpVelocityField(int(dim), int(n_labels), int(embed_dim), tuple(int(w) for w in hidden))
    expected = field.n_params * 8
    if len(data) - pos != expected:
        raise CheckpointFormatError(
            f"parameter payload has {len(data) - pos} bytes, expected {expected}"
        )
    flat = np.frombuffer(data, dtype="<f8", count=field.n_params, offset=pos).astype(np.float64)
    if not np.all(np.isfinite(flat)):
        raise CheckpointFormatError("checkpoint contains non-finite parameters")
    field.set_params_flat(flat)
    return field, TrainMeta(epochs=int(epochs), final_loss=float(final_loss), seed=int(seed))


def save_model_file(field: MlpVelocityField, path, meta: TrainMeta | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(save_model(field, meta))


def load_model_file(path) -> tuple[MlpVelocityField, TrainMeta]:
    with open(path, "rb") as fh:
        return load_model(fh.read())
