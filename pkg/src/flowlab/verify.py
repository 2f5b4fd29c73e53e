"""Empirical stability checks and distribution metrics.

Three families of checks back the sampler's stability story:

* Bound estimation: empirical Lipschitz constant of the field, the
  largest guidance-difference norm and the largest conditional-velocity
  norm over a probe region. True constants are unobservable, so every
  downstream check reports ratios against these estimates rather than
  asserting theorem-style inequalities.
* Midpoint guidance shift: how much the guidance difference moves between
  the current state and the predictor midpoint. Its maximum should scale
  linearly with the step size; the log-log slope is the constant-free
  check.
* Step deviation: for the predictor-corrector rule, the distance between
  a guided update and the pure conditional Euler step equals
  dt * alpha(t) * ||dv_mid|| by construction, and is bounded by
  dt * alpha(t) * B_hat.

Distribution metrics (sliced 2-Wasserstein, energy distance, histogram
KL, nearest-neighbor manifold distance) serve the ablation harness.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist

from .datasets import GaussianSingle, OracleVelocityField, oracle_marginal, sample_pair_batch
from .errors import InputError, RangeError
from .numerics import BANK_STREAM_BASE, RngStream, rowwise_norm

CHI2_2D_999 = 13.815510557964274  # 99.9% quantile of chi-square with 2 dof


@dataclass(frozen=True)
class Box:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if self.lo.shape != self.hi.shape or np.any(self.lo >= self.hi):
            raise RangeError("box needs lo < hi per coordinate")

    @property
    def dim(self) -> int:
        return self.lo.shape[0]

    def uniform(self, n: int, rng: RngStream) -> np.ndarray:
        u = rng.uniform((n, self.dim))
        return self.lo + u * (self.hi - self.lo)


def data_region(dataset, pad: float = 3.0) -> Box:
    """Axis-aligned box covering the path marginals of every label."""
    means = dataset.means if hasattr(dataset, "means") else dataset.mean[None, :]
    spread = pad * (dataset.sigma_data + 1.0)
    return Box(lo=means.min(axis=0) - spread, hi=means.max(axis=0) + spread)


@dataclass
class BoundEstimates:
    lipschitz: float
    guidance_diff_bound: float
    conditional_velocity_bound: float
    region_lo: list[float]
    region_hi: list[float]
    n_probes: int
    seed: int


@dataclass
class BoundReport:
    """Per-probe LHS values against a bound RHS."""

    lhs: np.ndarray
    rhs: float
    max_ratio: float
    violation_rate: float
    dt: float
    extra: dict = field(default_factory=dict)


# -- bound estimation ----------------------------------------------------------


def estimate_lipschitz(field, region: Box, t_grid, cond, n_pairs: int, rng: RngStream) -> float:
    """Max slope ||f(x) - f(x')|| / ||x - x'|| over sampled pairs.

    Half the pairs are box-global, half are short displacements with
    ||x - x'|| in [1e-3, 1e-1] to probe the local slope; the max also
    runs over the time grid and over both condition pathways.
    """
    if n_pairs < 100:
        raise RangeError(f"n_pairs must be >= 100, got {n_pairs}")
    n_local = n_pairs // 2
    xa_g = region.uniform(n_pairs - n_local, rng)
    xb_g = region.uniform(n_pairs - n_local, rng)
    xa_l = region.uniform(n_local, rng)
    direction = rng.standard_normal((n_local, region.dim))
    direction /= np.maximum(rowwise_norm(direction), 1e-30)[:, None]
    radii = np.exp(rng.uniform(n_local, np.log(1e-3), np.log(1e-1)))
    xb_l = xa_l + radii[:, None] * direction

    xa = np.concatenate([xa_g, xa_l])
    xb = np.concatenate([xb_g, xb_l])
    gaps = rowwise_norm(xa - xb)
    keep = gaps > 1e-30
    xa, xb, gaps = xa[keep], xb[keep], gaps[keep]

    conds = [cond, None] if cond is not None else [None]
    best = 0.0
    for t in np.asarray(t_grid, dtype=np.float64):
        for c in conds:
            num = rowwise_norm(field.forward_batch(xa, float(t), c) - field.forward_batch(xb, float(t), c))
            best = max(best, float(np.max(num / gaps)))
    return best


def estimate_velocity_bounds(
    field, region: Box, t_grid, y, n_probes: int, rng: RngStream
) -> tuple[float, float]:
    """Empirical maxima of the guidance-difference and conditional-velocity norms."""
    if n_probes < 100:
        raise RangeError(f"n_probes must be >= 100, got {n_probes}")
    b_hat = 0.0
    vmax_hat = 0.0
    for t in np.asarray(t_grid, dtype=np.float64):
        X = region.uniform(n_probes, rng)
        v_c = field.forward_batch(X, float(t), y)
        v_u = field.forward_batch(X, float(t), None)
        b_hat = max(b_hat, float(np.max(rowwise_norm(v_c - v_u))))
        vmax_hat = max(vmax_hat, float(np.max(rowwise_norm(v_c))))
    return b_hat, vmax_hat


def estimate_bounds(
    field, region: Box, t_grid, y, n_pairs: int, n_probes: int, rng: RngStream
) -> BoundEstimates:
    lip = estimate_lipschitz(field, region, t_grid, y, n_pairs, rng)
    b_hat, vmax_hat = estimate_velocity_bounds(field, region, t_grid, y, n_probes, rng)
    return BoundEstimates(
        lipschitz=lip,
        guidance_diff_bound=b_hat,
        conditional_velocity_bound=vmax_hat,
        region_lo=region.lo.tolist(),
        region_hi=region.hi.tolist(),
        n_probes=n_probes,
        seed=rng.seed,
    )


# -- midpoint guidance-shift check ----------------------------------------------


def _on_path_states(dataset, y, n: int, rng: RngStream, t_min: float) -> tuple[np.ndarray, np.ndarray]:
    ys = np.full(n, int(y), dtype=np.int64)
    x0, x1 = sample_pair_batch(dataset, ys, rng)
    t = rng.uniform(n, t_min, 1.0)
    return (1.0 - t)[:, None] * x0 + t[:, None] * x1, t


def _guidance_diff(field, X, t, y) -> np.ndarray:
    return field.forward_batch(X, t, y) - field.forward_batch(X, t, None)


def midpoint_shift_lhs(field, X, t, dt: float, y) -> tuple[np.ndarray, np.ndarray]:
    """||dv at predictor midpoint - dv at the current state|| per probe.

    Returns the shift with the midpoint difference at its own time
    (t - dt/2) and the common-time variant with both differences at t.
    """
    v_c = field.forward_batch(X, t, y)
    x_mid = X + (dt / 2.0) * v_c
    t_mid = np.asarray(t, dtype=np.float64) - dt / 2.0
    dv_now = _guidance_diff(field, X, t, y)
    lhs = rowwise_norm(_guidance_diff(field, x_mid, t_mid, y) - dv_now)
    lhs_common = rowwise_norm(_guidance_diff(field, x_mid, t, y) - dv_now)
    return lhs, lhs_common


def check_midpoint_shift(
    field, dataset, y, dt: float, n_states: int, rng: RngStream,
    lipschitz: float, velocity_bound: float,
) -> BoundReport:
    """Compare the midpoint guidance shift against lipschitz * velocity_bound * dt."""
    if not 0.0 < dt <= 1.0:
        raise RangeError(f"dt must lie in (0, 1], got {dt}")
    X, t = _on_path_states(dataset, y, n_states, rng, t_min=dt / 2.0)
    lhs, lhs_common = midpoint_shift_lhs(field, X, t, dt, y)
    rhs = lipschitz * velocity_bound * dt
    ratios = lhs / rhs if rhs > 0 else np.zeros_like(lhs)
    return BoundReport(
        lhs=lhs,
        rhs=rhs,
        max_ratio=float(ratios.max()) if len(ratios) else 0.0,
        violation_rate=float(np.mean(lhs > rhs)) if rhs > 0 else 0.0,
        dt=dt,
        extra={"common_time_max_lhs": float(lhs_common.max())},
    )


def midpoint_shift_slope(
    field, dataset, y, dts, n_states: int, rng: RngStream
) -> tuple[float, list[tuple[float, float]]]:
    """Log-log slope of max midpoint shift vs step size, on one fixed state set."""
    dts = sorted(float(d) for d in dts)
    X, t = _on_path_states(dataset, y, n_states, rng, t_min=max(dts) / 2.0)
    points = []
    for dt in dts:
        lhs, _ = midpoint_shift_lhs(field, X, t, dt, y)
        points.append((dt, float(lhs.max())))
    logs = np.log([p[0] for p in points]), np.log([p[1] for p in points])
    slope = float(np.polyfit(logs[0], logs[1], 1)[0])
    return slope, points


# -- per-step deviation check -----------------------------------------------------


@dataclass
class StepDeviationReport:
    equality_max_rel_err: float
    equality_pass: bool
    bound: BoundReport
    n_steps_checked: int


def check_step_deviation(
    trajectories, guidance_diff_bound: float, rel_tol: float = 1e-12
) -> StepDeviationReport:
    """Verify the guided-vs-conditional step gap on recorded trajectories.

    Recomputes the per-step deviation from the stored states and reference
    states (independently of the sampler's bookkeeping), checks it equals
    dt * alpha * dv_norm to `rel_tol` relative, and checks it never exceeds
    dt * alpha * guidance_diff_bound.
    """
    if not trajectories:
        raise InputError("no trajectories given")
    max_rel = 0.0
    lhs_all: list[float] = []
    rhs_all: list[float] = []
    for traj in trajectories:
        if not traj.diagnostics:
            raise InputError("trajectory carries no step diagnostics")
        if traj.reference_states is None:
            raise InputError("trajectory carries no reference states")
        dts = -np.diff(traj.times)
        for k, diag in enumerate(traj.diagnostics):
            measured = float(np.sqrt(np.sum((traj.states[k + 1] - traj.reference_states[k]) ** 2)))
            formula = float(dts[k]) * diag.alpha_t * diag.dv_norm
            denom = max(abs(measured), abs(formula))
            if denom > 0:
                max_rel = max(max_rel, abs(measured - formula) / denom)
            lhs_all.append(measured)
            rhs_all.append(float(dts[k]) * diag.alpha_t * guidance_diff_bound)

    lhs = np.asarray(lhs_all)
    rhs = np.asarray(rhs_all)
    positive = rhs > 0
    ratios = np.zeros_like(lhs)
    ratios[positive] = lhs[positive] / rhs[positive]
    # allow float-level slack on the inequality; the equality check is the sharp one
    violations = lhs > rhs * (1.0 + 1e-9) + 1e-300
    bound = BoundReport(
        lhs=lhs,
        rhs=float(rhs.max()) if len(rhs) else 0.0,
        max_ratio=float(ratios.max()) if len(ratios) else 0.0,
        violation_rate=float(np.mean(violations)) if len(lhs) else 0.0,
        dt=float(dts[0]) if len(trajectories) else 0.0,
        extra={"rhs_per_step_max": float(rhs.max()) if len(rhs) else 0.0},
    )
    return StepDeviationReport(
        equality_max_rel_err=max_rel,
        equality_pass=max_rel <= rel_tol,
        bound=bound,
        n_steps_checked=len(lhs_all),
    )


# -- manifold proximity -------------------------------------------------------------


@dataclass
class DistanceStats:
    mean: float
    median: float
    p95: float


def manifold_distance(points: np.ndarray, bank: np.ndarray) -> DistanceStats:
    """Nearest-neighbor distance statistics from query points to a reference bank."""
    bank = np.asarray(bank, dtype=np.float64)
    if bank.ndim != 2 or bank.shape[0] == 0:
        raise InputError("reference bank is empty")
    dists, _ = cKDTree(bank).query(np.asarray(points, dtype=np.float64))
    return DistanceStats(
        mean=float(np.mean(dists)),
        median=float(np.median(dists)),
        p95=float(np.percentile(dists, 95)),
    )


def oracle_trajectory_bank(
    dataset, y, t_values, m: int, n_steps: int, seed: int
) -> dict[float, np.ndarray]:
    """States of m ideal conditional trajectories at the requested times.

    Integrates the analytic oracle field from fresh noise draws on a
    uniform grid; every requested time must be a grid point.
    """
    oracle = OracleVelocityField(dataset)
    rng = RngStream(seed, BANK_STREAM_BASE)
    X = rng.standard_normal((m, dataset.dim))
    grid = 1.0 - np.arange(n_steps + 1) / n_steps
    wanted = {float(t) for t in t_values}
    banks: dict[float, np.ndarray] = {}

    def maybe_record(t_now: float):
        for t in wanted:
            if abs(t - t_now) < 1e-9 and t not in banks:
                banks[t] = X.copy()

    for k in range(n_steps):
        maybe_record(float(grid[k]))
        dt = float(grid[k] - grid[k + 1])
        X = X + dt * oracle.forward_batch(X, float(grid[k]), y)
    maybe_record(0.0)
    missing = wanted - set(banks)
    if missing:
        raise InputError(f"times {sorted(missing)} are not on the {n_steps}-step grid")
    return banks


# -- distribution metrics --------------------------------------------------------------


def _wasserstein2_1d(a: np.ndarray, b: np.ndarray) -> float:
    """Exact 2-Wasserstein distance between 1-D empirical distributions."""
    a = np.sort(a)
    b = np.sort(b)
    n, m = len(a), len(b)
    if n == m:
        d = a - b
        return float(np.sqrt(np.mean(d * d)))
    edges = np.concatenate([[0.0], np.union1d(np.arange(1, n) / n, np.arange(1, m) / m), [1.0]])
    widths = np.diff(edges)
    mids = 0.5 * (edges[:-1] + edges[1:])
    ai = np.minimum((mids * n).astype(np.int64), n - 1)
    bi = np.minimum((mids * m).astype(np.int64), m - 1)
    d = a[ai] - b[bi]
    return float(np.sqrt(np.sum(widths * d * d)))


def sliced_wasserstein(a: np.ndarray, b: np.ndarray, n_projections: int, rng: RngStream) -> float:
    """Mean exact 1-D 2-Wasserstein distance over random unit projections."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise RangeError("sliced_wasserstein needs at least two points per set")
    d = a.shape[1]
    dirs = rng.standard_normal((n_projections, d))
    norms = rowwise_norm(dirs)
    tiny = norms < 1e-12
    if tiny.any():  # astronomically unlikely; keep the direction count fixed
        dirs[tiny] = np.eye(d)[0]
        norms = rowwise_norm(dirs)
    dirs /= norms[:, None]
    total = 0.0
    for u in dirs:
        total += _wasserstein2_1d(a @ u, b @ u)
    return total / n_projections


def _mean_cross_distance(a: np.ndarray, b: np.ndarray, block: int = 2048) -> float:
    total = 0.0
    for i in range(0, len(a), block):
        total += float(np.sum(cdist(a[i : i + block], b)))
    return total / (len(a) * len(b))


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """2 E||a-b|| - E||a-a'|| - E||b-b'|| with exact double sums (diagonal included)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    return (
        2.0 * _mean_cross_distance(a, b)
        - _mean_cross_distance(a, a)
        - _mean_cross_distance(b, b)
    )


# -- distributional deviation curve ------------------------------------------------------


@dataclass
class DeviationPoint:
    t: float
    sw: float
    kl: float | None = None


def _histogram_kl(points: np.ndarray, reference: np.ndarray, center: np.ndarray, std: float,
                  bins: int = 64, smoothing: float = 1e-9) -> float:
    half = std * np.sqrt(CHI2_2D_999)
    ranges = [(center[0] - half, center[0] + half), (center[1] - half, center[1] + half)]
    hp, _, _ = np.histogram2d(points[:, 0], points[:, 1], bins=bins, range=ranges)
    hq, _, _ = np.histogram2d(reference[:, 0], reference[:, 1], bins=bins, range=ranges)
    p = hp / max(len(points), 1) + smoothing
    q = hq / max(len(reference), 1) + smoothing
    p /= p.sum()
    q /= q.sum()
    return float(np.sum(p * np.log(p / q)))


def states_at_time(trajectories, t: float) -> np.ndarray:
    times = trajectories[0].times
    idx = np.nonzero(np.isclose(times, t, atol=1e-9))[0]
    if len(idx) == 0:
        raise InputError(f"time {t} is not recorded on the trajectory grid")
    k = int(idx[0])
    return np.stack([traj.states[k] for traj in trajectories])


def distributional_deviation(
    trajectories, dataset, y, t_grid, rng: RngStream, n_reference: int = 4096,
    n_projections: int = 128,
) -> list[DeviationPoint]:
    """Per-time sliced distance between sampled states and a reference.

    With a single-Gaussian dataset the reference is drawn from the exact
    path marginal at each time (plus a 2-D histogram KL when d == 2);
    otherwise only t = 0 can be compared, against data draws.
    """
    curve: list[DeviationPoint] = []
    is_single = isinstance(dataset, GaussianSingle)
    for t in t_grid:
        t = float(t)
        X = states_at_time(trajectories, t)
        if is_single:
            mean, var = oracle_marginal(dataset, t, y)
            ref = mean + np.sqrt(var) * rng.standard_normal((n_reference, dataset.dim))
            sw = sliced_wasserstein(X, ref, n_projections, rng)
            kl = _histogram_kl(X, ref, mean, float(np.sqrt(var))) if dataset.dim == 2 else None
            curve.append(DeviationPoint(t=t, sw=sw, kl=kl))
        elif abs(t) < 1e-9:
            ys = np.full(n_reference, int(y), dtype=np.int64)
            ref = dataset.sample_x0_batch(ys, rng)
            curve.append(DeviationPoint(t=t, sw=sliced_wasserstein(X, ref, n_projections, rng)))
    return curve


# -- schedule integrability ---------------------------------------------------------------


def alpha_integral_check(lambda_max: float, gamma: float) -> tuple[float, float, float]:
    """Analytic vs quadrature integral of the corrector weight over [0, 1]."""
    from scipy.integrate import quad

    analytic = lambda_max / (gamma + 1.0)
    numeric, _ = quad(lambda t: lambda_max * (1.0 - t) ** gamma, 0.0, 1.0)
    return analytic, float(numeric), abs(analytic - numeric)
