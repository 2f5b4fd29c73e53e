"""Flow-matching training loop with randomized condition dropout.

One epoch = one optimization step on a freshly sampled batch (the toy
distributions are generative, there is no finite dataset to cycle).
Per step: draw labels, pairs (x0, x1), times t ~ U[0,1]; replace each
label by the null condition with probability p_uncond; regress the
network onto x0 - x1 at the interpolated point with a squared-error
loss, and apply one Adam update. Everything is driven by fixed-purpose
random streams, so identical configs reproduce bit-identical parameters.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .datasets import GaussianMixture, GaussianSingle, oracle_velocity_batch, sample_pair_batch
from .errors import ConfigError, DimensionError, TrainingDiverged
from .model import MlpVelocityField
from .numerics import EVAL_STREAM, TRAIN_STREAM, RngStream


@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    p_uncond: float = 0.1
    seed: int = 0
    eval_every: int = 0  # 0 disables oracle-RMSE tracking
    eval_probes: int = 2048

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.p_uncond <= 1.0:
            raise ConfigError(f"p_uncond must lie in [0, 1], got {self.p_uncond}")


@dataclass
class TrainReport:
    loss_curve: list[tuple[int, float]] = field(default_factory=list)
    oracle_rmse_curve: list[tuple[int, float]] = field(default_factory=list)
    wall_seconds: float = 0.0


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n_params: int) -> "AdamState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), step=0)


def adam_step(
    params: np.ndarray, grads: np.ndarray, state: AdamState, config: TrainConfig
) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; returns fresh arrays."""
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise DimensionError("params, grads and optimizer state must share one shape")
    step = state.step + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grads
    v = config.beta2 * state.v + (1.0 - config.beta2) * grads * grads
    m_hat = m / (1.0 - config.beta1**step)
    v_hat = v / (1.0 - config.beta2**step)
    new_params = params - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.eps)
    return new_params, AdamState(m=m, v=v, step=step)


def cfm_loss(
    field: MlpVelocityField, dataset, batch_size: int, p_uncond: float, rng: RngStream
) -> tuple[float, np.ndarray]:
    """Mean squared velocity-regression error over one batch, plus its gradient.

    Draw order is pinned (labels, pairs, times, dropout mask) so batches
    are reproducible from the stream state alone.
    """
    ys = rng.integers(0, dataset.n_labels, batch_size)
    x0, x1 = sample_pair_batch(dataset, ys, rng)
    t = rng.uniform(batch_size)
    drop = rng.uniform(batch_size) < p_uncond

    xt = (1.0 - t)[:, None] * x0 + t[:, None] * x1
    target = x0 - x1
    cond = np.where(drop, field.null_index, ys)

    pred = field.forward_batch(xt, t, cond)
    residual = pred - target
    loss = float(np.mean(np.sum(residual * residual, axis=1)))
    # backward returns d(0.5 * sum ||r||^2); rescale to the batch-mean loss
    grad = field.backward(xt, t, cond, residual) * (2.0 / batch_size)
    return loss, grad


def oracle_rmse(field: MlpVelocityField, dataset, probes: np.ndarray, ts: np.ndarray, ys: np.ndarray) -> float:
    """RMSE (per-probe L2) between the learned and analytic velocities."""
    err = 0.0
    total = 0
    for t in np.unique(ts):
        sel = ts == t
        pred = field.forward_batch(probes[sel], float(t), ys[sel])
        truth = oracle_velocity_batch(dataset, probes[sel], float(t), ys[sel])
        err += float(np.sum((pred - truth) ** 2))
        total += int(sel.sum())
    return float(np.sqrt(err / total))


def draw_oracle_probes(dataset, n: int, rng: RngStream, t_levels: int = 16):
    """On-path probe set (x_t, t, y) for oracle-RMSE evaluation."""
    ys = rng.integers(0, dataset.n_labels, n)
    x0, x1 = sample_pair_batch(dataset, ys, rng)
    levels = (np.arange(t_levels) + 0.5) / t_levels
    ts = levels[rng.integers(0, t_levels, n)]
    probes = (1.0 - ts)[:, None] * x0 + ts[:, None] * x1
    return probes, ts, ys


def train(field: MlpVelocityField, dataset, config: TrainConfig) -> TrainReport:
    """Run the training session in place and return its report.

    Raises TrainingDiverged on a non-finite loss; parameters are left at
    the last finite state and never clamped.
    """
    start = time.perf_counter()
    report = TrainReport()
    batch_rng = RngStream(config.seed, TRAIN_STREAM)
    has_oracle = isinstance(dataset, (GaussianSingle, GaussianMixture))
    if config.eval_every > 0 and has_oracle:
        eval_rng = RngStream(config.seed, EVAL_STREAM)
        probes, ts, ys = draw_oracle_probes(dataset, config.eval_probes, eval_rng)

    params = field.params_flat()
    state = AdamState.zeros(field.n_params)
    for epoch in range(config.epochs):
        loss, grad = cfm_loss(field, dataset, config.batch_size, config.p_uncond, batch_rng)
        if not np.isfinite(loss):
            report.wall_seconds = time.perf_counter() - start
            last = report.loss_curve[-1][0] if report.loss_curve else -1
            raise TrainingDiverged(
                f"non-finite loss at epoch {epoch} (last finite epoch {last})",
                last_finite_epoch=last,
            )
        report.loss_curve.append((epoch, loss))
        params, state = adam_step(params, grad, state, config)
        field.set_params_flat(params)
        if config.eval_every > 0 and has_oracle and (epoch + 1) % config.eval_every == 0:
            report.oracle_rmse_curve.append(
                (epoch, oracle_rmse(field, dataset, probes, ts, ys))
            )
    report.wall_seconds = time.perf_counter() - start
    return report
