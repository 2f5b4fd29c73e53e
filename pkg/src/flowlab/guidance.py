"""Per-step effective-velocity rules for every guidance strategy.

Strategies and their per-step field-evaluation cost:

    none          v = v_c                                             1 eval
    cfg           v = (1-omega)*v_u + omega*v_c                       2 evals
    cfg_zero_star v = (1-omega)*s*v_u + omega*v_c, s least-squares    2 evals
    apg           v = v_c + momentum-smoothed, saturated, orthogonal  2 evals
                  component of (v_c - v_u)
    rect_cfgpp    predictor-corrector: half step along v_c, then      3 evals
                  v = v_c + alpha(t) * (v_c_mid - v_u_mid) with the
                  guidance difference evaluated at the predicted
                  midpoint and alpha(t) = lambda_max * (1-t)^gamma

Reduction lattice: rect_cfgpp(lambda_max=0), cfg(omega=1) and none all
produce the conditional velocity bit-exactly, so their sampled
trajectories coincide under shared seeds.

Every rule is implemented once as a batched kernel over (n, d) states;
the single-point operations are batch-of-one views and therefore
bit-identical to what the sampler computes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, RangeError, ScheduleError
from .numerics import RngStream, rowwise_dot, rowwise_norm

_NORM_FLOOR = 1e-12


# -- strategy definitions -----------------------------------------------------


@dataclass(frozen=True)
class NoGuidance:
    name = "none"


@dataclass(frozen=True)
class Cfg:
    omega: float = 1.0

    name = "cfg"


@dataclass(frozen=True)
class RectCfgPP:
    lambda_max: float = 0.5
    gamma: float = 1.0
    sigma_noise: float = 0.0
    schedule: str = "power"  # "power" | "constant" | "table"
    table: tuple[tuple[float, float], ...] | None = None

    name = "rect_cfgpp"

    def __post_init__(self):
        if self.lambda_max < 0 or self.gamma < 0 or self.sigma_noise < 0:
            raise ConfigError("lambda_max, gamma and sigma_noise must all be >= 0")
        if self.schedule not in ("power", "constant", "table"):
            raise ConfigError(f"unknown schedule kind '{self.schedule}'")
        if self.schedule == "table":
            if not self.table or len(self.table) < 2:
                raise ConfigError("table schedule needs at least two (t, alpha) points")
            ts = [p[0] for p in self.table]
            if ts != sorted(ts) or ts[0] < 0 or ts[-1] > 1:
                raise ConfigError("table times must be ascending within [0, 1]")


@dataclass(frozen=True)
class Apg:
    eta: float = 1.0
    r: float = 1.0
    beta: float = 0.0

    name = "apg"

    def __post_init__(self):
        if not self.r > 0:
            raise ConfigError(f"r must be > 0, got {self.r}")
        if not 0.0 <= self.beta < 1.0:
            raise ConfigError(f"beta must lie in [0, 1), got {self.beta}")


@dataclass(frozen=True)
class CfgZeroStar:
    omega: float = 1.0
    zero_init_steps: int = 0

    name = "cfg_zero_star"

    def __post_init__(self):
        if self.zero_init_steps < 0:
            raise ConfigError(f"zero_init_steps must be >= 0, got {self.zero_init_steps}")


GuidanceStrategy = NoGuidance | Cfg | RectCfgPP | Apg | CfgZeroStar

STRATEGY_CLASSES = {
    "none": NoGuidance,
    "cfg": Cfg,
    "rect_cfgpp": RectCfgPP,
    "apg": Apg,
    "cfg_zero_star": CfgZeroStar,
}


def nfe_per_step(strategy: GuidanceStrategy) -> int:
    """Field evaluations one step costs: none=1, cfg/apg/cfg_zero_star=2, rect_cfgpp=3."""
    return {"none": 1, "cfg": 2, "apg": 2, "cfg_zero_star": 2, "rect_cfgpp": 3}[strategy.name]


# -- corrector weight schedule -------------------------------------------------


def alpha_schedule(t: float, lambda_max: float, gamma: float) -> float:
    """Power-law corrector weight lambda_max * (1-t)^gamma; 0^0 is taken as 1."""
    if not 0.0 <= t <= 1.0:
        raise RangeError(f"t must lie in [0, 1], got {t}")
    return lambda_max * (1.0 - t) ** gamma


def strategy_alpha(strategy: RectCfgPP, t: float) -> float:
    if strategy.schedule == "power":
        return alpha_schedule(t, strategy.lambda_max, strategy.gamma)
    if strategy.schedule == "constant":
        return strategy.lambda_max
    pts = np.asarray(strategy.table, dtype=np.float64)
    return float(np.interp(t, pts[:, 0], pts[:, 1]))


# -- diagnostics and per-trajectory state --------------------------------------


@dataclass
class StepDiagnostics:
    """Per-step observability record.

    alpha_t is the corrector weight (0 for strategies without one);
    dv_norm is the guidance-difference norm the rule actually used
    (midpoint difference for rect_cfgpp, current-point otherwise);
    deviation_from_conditional is the distance between the guided update
    and a pure conditional Euler step from the same state — it is filled
    by the sampler, which knows the step size; standalone guidance calls
    without a step size report 0.
    """

    alpha_t: float
    dv_norm: float
    v_c_norm: float
    deviation_from_conditional: float
    nfe: int


@dataclass
class ApgState:
    """Momentum accumulator for the smoothed guidance difference (per trajectory)."""

    momentum: np.ndarray

    @classmethod
    def zeros(cls, n: int, d: int) -> "ApgState":
        return cls(momentum=np.zeros((n, d), dtype=np.float64))


@dataclass
class StepBatch:
    """Batched result of one guidance step over n chains."""

    v_hat: np.ndarray  # (n, d) effective velocity
    v_cond: np.ndarray  # (n, d) conditional velocity at the current state
    alpha: np.ndarray  # (n,)
    dv_norm: np.ndarray  # (n,)
    nfe: int  # per-chain field evaluations this step


# -- batched kernels ------------------------------------------------------------


def _step_none(field, X, t, y) -> StepBatch:
    v_c = field.forward_batch(X, t, y)
    zeros = np.zeros(X.shape[0])
    return StepBatch(v_hat=v_c, v_cond=v_c, alpha=zeros, dv_norm=zeros.copy(), nfe=1)


def _step_cfg(field, X, t, y, omega: float) -> StepBatch:
    v_c = field.forward_batch(X, t, y)
    v_u = field.forward_batch(X, t, None)
    v_hat = (1.0 - omega) * v_u + omega * v_c
    return StepBatch(
        v_hat=v_hat,
        v_cond=v_c,
        alpha=np.zeros(X.shape[0]),
        dv_norm=rowwise_norm(v_c - v_u),
        nfe=2,
    )


def _step_rect_cfgpp(field, strategy: RectCfgPP, X, t, dt, y, noise_fn) -> StepBatch:
    if dt <= 0:
        raise ScheduleError(f"dt must be > 0, got {dt}")
    t_mid = t - dt / 2.0
    if t_mid < 0:
        raise ScheduleError(f"midpoint time {t_mid} < 0 (t={t}, dt={dt})")
    v_c = field.forward_batch(X, t, y)
    x_mid = X + (dt / 2.0) * v_c
    if strategy.sigma_noise > 0:
        x_mid = x_mid + strategy.sigma_noise * noise_fn()
    v_c_mid = field.forward_batch(x_mid, t_mid, y)
    v_u_mid = field.forward_batch(x_mid, t_mid, None)
    diff = v_c_mid - v_u_mid
    alpha = strategy_alpha(strategy, t)
    v_hat = v_c + alpha * diff
    return StepBatch(
        v_hat=v_hat,
        v_cond=v_c,
        alpha=np.full(X.shape[0], alpha),
        dv_norm=rowwise_norm(diff),
        nfe=3,
    )


def _step_apg(field, strategy: Apg, X, t, y, state: ApgState) -> StepBatch:
    v_c = field.forward_batch(X, t, y)
    v_u = field.forward_batch(X, t, None)
    diff = v_c - v_u
    state.momentum = strategy.beta * state.momentum + (1.0 - strategy.beta) * diff

    # drop the component parallel to v_c, saturate the rest to norm <= r
    vc_sq = rowwise_dot(v_c, v_c)
    vc_ok = np.sqrt(vc_sq) >= _NORM_FLOOR
    proj = np.where(vc_ok, rowwise_dot(state.momentum, v_c), 0.0) / np.where(vc_ok, vc_sq, 1.0)
    orth = state.momentum - proj[:, None] * v_c
    onorm = rowwise_norm(orth)
    o_ok = onorm >= _NORM_FLOOR
    scale = np.where(o_ok, np.minimum(onorm, strategy.r), 0.0) / np.where(o_ok, onorm, 1.0)
    v_hat = v_c + strategy.eta * (scale[:, None] * orth)
    return StepBatch(
        v_hat=v_hat,
        v_cond=v_c,
        alpha=np.zeros(X.shape[0]),
        dv_norm=rowwise_norm(diff),
        nfe=2,
    )


def _step_cfg_zero_star(field, strategy: CfgZeroStar, X, t, y, step_index: int) -> StepBatch:
    # both branches are evaluated even inside the zero-init window, so the
    # per-step evaluation cost is constant and diagnostics stay populated
    v_c = field.forward_batch(X, t, y)
    v_u = field.forward_batch(X, t, None)
    if step_index < strategy.zero_init_steps:
        v_hat = np.zeros_like(v_c)
    else:
        u_sq = rowwise_dot(v_u, v_u)
        u_ok = np.sqrt(u_sq) >= _NORM_FLOOR
        s = np.where(u_ok, rowwise_dot(v_c, v_u) / np.where(u_ok, u_sq, 1.0), 0.0)
        v_hat = (1.0 - strategy.omega) * s[:, None] * v_u + strategy.omega * v_c
    return StepBatch(
        v_hat=v_hat,
        v_cond=v_c,
        alpha=np.zeros(X.shape[0]),
        dv_norm=rowwise_norm(v_c - v_u),
        nfe=2,
    )


def step_batch(
    field,
    strategy: GuidanceStrategy,
    X: np.ndarray,
    t: float,
    dt: float,
    y,
    step_index: int = 0,
    apg_state: ApgState | None = None,
    noise_fn=None,
) -> StepBatch:
    """Dispatch one guidance step over a batch of chain states."""
    if isinstance(strategy, NoGuidance):
        return _step_none(field, X, t, y)
    if isinstance(strategy, Cfg):
        return _step_cfg(field, X, t, y, strategy.omega)
    if isinstance(strategy, RectCfgPP):
        return _step_rect_cfgpp(field, strategy, X, t, dt, y, noise_fn)
    if isinstance(strategy, Apg):
        if apg_state is None:
            raise ConfigError("apg requires a per-trajectory momentum state")
        return _step_apg(field, strategy, X, t, y, apg_state)
    if isinstance(strategy, CfgZeroStar):
        return _step_cfg_zero_star(field, strategy, X, t, y, step_index)
    raise ConfigError(f"unknown strategy {strategy!r}")


# -- single-point operations -----------------------------------------------------


def _diag_from_batch(batch: StepBatch, deviation: float = 0.0) -> StepDiagnostics:
    return StepDiagnostics(
        alpha_t=float(batch.alpha[0]),
        dv_norm=float(batch.dv_norm[0]),
        v_c_norm=float(rowwise_norm(batch.v_cond)[0]),
        deviation_from_conditional=deviation,
        nfe=batch.nfe,
    )


def cfg_velocity(field, x, t: float, y, omega: float) -> tuple[np.ndarray, StepDiagnostics]:
    batch = _step_cfg(field, np.asarray(x, dtype=np.float64)[None, :], t, y, omega)
    return batch.v_hat[0], _diag_from_batch(batch)


def rect_cfgpp_velocity(
    field,
    x,
    t: float,
    dt: float,
    y,
    lambda_max: float,
    gamma: float,
    sigma_noise: float = 0.0,
    rng: RngStream | None = None,
) -> tuple[np.ndarray, StepDiagnostics]:
    x = np.asarray(x, dtype=np.float64)
    strategy = RectCfgPP(lambda_max=lambda_max, gamma=gamma, sigma_noise=sigma_noise)
    if sigma_noise > 0 and rng is None:
        raise ConfigError("sigma_noise > 0 requires an RngStream")
    noise_fn = (lambda: rng.standard_normal((1, x.shape[0]))) if sigma_noise > 0 else None
    batch = _step_rect_cfgpp(field, strategy, x[None, :], t, dt, y, noise_fn)
    deviation = dt * float(batch.alpha[0]) * float(batch.dv_norm[0])
    return batch.v_hat[0], _diag_from_batch(batch, deviation)


def apg_velocity(
    field, x, t: float, y, eta: float, r: float, beta: float, state: ApgState
) -> tuple[np.ndarray, StepDiagnostics]:
    batch = _step_apg(field, Apg(eta=eta, r=r, beta=beta), np.asarray(x, dtype=np.float64)[None, :], t, y, state)
    return batch.v_hat[0], _diag_from_batch(batch)


def cfg_zero_star_velocity(
    field, x, t: float, y, omega: float, step_index: int, zero_init_steps: int
) -> tuple[np.ndarray, StepDiagnostics]:
    strategy = CfgZeroStar(omega=omega, zero_init_steps=zero_init_steps)
    batch = _step_cfg_zero_star(
        field, strategy, np.asarray(x, dtype=np.float64)[None, :], t, y, step_index
    )
    return batch.v_hat[0], _diag_from_batch(batch)
