"""Conditional toy data distributions and the linear noise-data path.

Time convention used throughout the package: t = 1 is pure noise,
t = 0 is data. A training pair couples x0 ~ p0(.|y) with independent
x1 ~ N(0, I); the path point is x_t = (1-t)*x0 + t*x1 and the regression
target is the data-direction velocity v = x0 - x1, so an Euler update
x <- x + dt * v moves toward data as t decreases.

For all-Gaussian datasets the marginal velocity E[x0 - x1 | x_t = x, y]
has a closed form (conditioning a joint Gaussian), which provides the
analytic oracle used to validate training and to build reference
trajectory banks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, LabelError, RangeError, UnsupportedDatasetError
from .numerics import RngStream

__all__ = [
    "GaussianSingle",
    "GaussianMixture",
    "TwoMoons",
    "Checkerboard",
    "PathPoint",
    "sample_pair",
    "sample_pair_batch",
    "interpolate",
    "target_velocity",
    "oracle_velocity",
    "oracle_velocity_batch",
    "oracle_marginal",
    "OracleVelocityField",
]


def _check_label(dataset, y: int) -> int:
    y = int(y)
    if not 0 <= y < dataset.n_labels:
        raise LabelError(f"label {y} invalid for dataset with {dataset.n_labels} labels")
    return y


@dataclass(frozen=True)
class GaussianSingle:
    """Single isotropic Gaussian data distribution, one label."""

    mean: np.ndarray
    sigma_data: float = 0.5

    kind = "gaussian_single"

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))
        if self.mean.ndim != 1:
            raise DimensionError("mean must be a 1-D vector")
        if not self.sigma_data > 0:
            raise RangeError(f"sigma_data must be > 0, got {self.sigma_data}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def n_labels(self) -> int:
        return 1

    def label_mean(self, y: int) -> np.ndarray:
        _check_label(self, y)
        return self.mean

    def sample_x0_batch(self, ys: np.ndarray, rng: RngStream) -> np.ndarray:
        for y in np.unique(ys):
            _check_label(self, int(y))
        n = len(ys)
        return self.mean + self.sigma_data * rng.standard_normal((n, self.dim))


@dataclass(frozen=True)
class GaussianMixture:
    """K isotropic Gaussian components with shared sigma; label selects one."""

    means: np.ndarray
    sigma_data: float = 0.3

    kind = "gaussian_mixture"

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        if self.means.ndim != 2 or self.means.shape[0] < 1:
            raise DimensionError("means must be a (K, d) array with K >= 1")
        if not self.sigma_data > 0:
            raise RangeError(f"sigma_data must be > 0, got {self.sigma_data}")
        # pairwise-distinct means keep the label -> component map well defined
        k = self.means.shape[0]
        for i in range(k):
            for j in range(i + 1, k):
                if np.array_equal(self.means[i], self.means[j]):
                    raise RangeError(f"mixture means {i} and {j} coincide")

    @classmethod
    def ring(cls, k: int = 8, radius: float = 4.0, sigma_data: float = 0.3) -> "GaussianMixture":
        angles = 2.0 * np.pi * np.arange(k) / k
        means = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
        return cls(means=means, sigma_data=sigma_data)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_labels(self) -> int:
        return self.means.shape[0]

    def label_mean(self, y: int) -> np.ndarray:
        _check_label(self, y)
        return self.means[y]

    def sample_x0_batch(self, ys: np.ndarray, rng: RngStream) -> np.ndarray:
        ys = np.asarray(ys, dtype=np.int64)
        for y in np.unique(ys):
            _check_label(self, int(y))
        n = len(ys)
        return self.means[ys] + self.sigma_data * rng.standard_normal((n, self.dim))


@dataclass(frozen=True)
class TwoMoons:
    """Two interleaving half circles; the label picks the moon. Plot-only."""

    sigma_data: float = 0.1
    scale: float = 2.0

    kind = "two_moons"
    dim = 2
    n_labels = 2

    def __post_init__(self):
        if not self.sigma_data > 0:
            raise RangeError(f"sigma_data must be > 0, got {self.sigma_data}")

    def sample_x0_batch(self, ys: np.ndarray, rng: RngStream) -> np.ndarray:
        ys = np.asarray(ys, dtype=np.int64)
        for y in np.unique(ys):
            _check_label(self, int(y))
        n = len(ys)
        theta = rng.uniform(n, 0.0, np.pi)
        upper = np.stack([np.cos(theta), np.sin(theta) - 0.25], axis=1)
        lower = np.stack([1.0 - np.cos(theta), 0.25 - np.sin(theta)], axis=1)
        pts = np.where(ys[:, None] == 0, upper, lower)
        return self.scale * pts + self.sigma_data * rng.standard_normal((n, 2))


@dataclass(frozen=True)
class Checkerboard:
    """Uniform density on alternating tiles of a board; label = tile color. Plot-only."""

    tiles: int = 4
    extent: float = 4.0

    kind = "checkerboard"
    dim = 2
    n_labels = 2

    def __post_init__(self):
        if self.tiles < 2 or self.tiles % 2 != 0:
            raise RangeError(f"tiles must be an even integer >= 2, got {self.tiles}")
        if not self.extent > 0:
            raise RangeError(f"extent must be > 0, got {self.extent}")

    def _tiles_for(self, color: int) -> np.ndarray:
        ij = [(i, j) for i in range(self.tiles) for j in range(self.tiles) if (i + j) % 2 == color]
        return np.asarray(ij, dtype=np.int64)

    def sample_x0_batch(self, ys: np.ndarray, rng: RngStream) -> np.ndarray:
        ys = np.asarray(ys, dtype=np.int64)
        for y in np.unique(ys):
            _check_label(self, int(y))
        n = len(ys)
        side = 2.0 * self.extent / self.tiles
        out = np.empty((n, 2), dtype=np.float64)
        for color in (0, 1):
            idx = np.nonzero(ys == color)[0]
            if len(idx) == 0:
                continue
            tiles = self._tiles_for(color)
            pick = rng.integers(0, len(tiles), len(idx))
            corner = -self.extent + side * tiles[pick]
            out[idx] = corner + side * rng.uniform((len(idx), 2))
        return out


@dataclass
class PathPoint:
    """One supervised point on the linear path."""

    x_t: np.ndarray
    t: float
    x0: np.ndarray
    x1: np.ndarray
    y: int = field(default=0)


def sample_pair(dataset, y: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Draw x0 ~ p0(.|y) and independent x1 ~ N(0, I)."""
    x0, x1 = sample_pair_batch(dataset, np.asarray([y]), rng)
    return x0[0], x1[0]


def sample_pair_batch(dataset, ys, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """Batched pair draws. Draw order is pinned: all x0 first, then all x1."""
    ys = np.asarray(ys, dtype=np.int64)
    x0 = dataset.sample_x0_batch(ys, rng)
    x1 = rng.standard_normal(x0.shape)
    return x0, x1


def interpolate(x0, x1, t: float) -> np.ndarray:
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise DimensionError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    if not 0.0 <= t <= 1.0:
        raise RangeError(f"t must lie in [0, 1], got {t}")
    return (1.0 - t) * x0 + t * x1


def target_velocity(x0, x1) -> np.ndarray:
    """Closed-form regression target of the linear path (data direction)."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise DimensionError(f"endpoint shapes differ: {x0.shape} vs {x1.shape}")
    return x0 - x1


def _require_gaussian(dataset):
    if not isinstance(dataset, (GaussianSingle, GaussianMixture)):
        raise UnsupportedDatasetError(
            f"analytic oracle requires an all-Gaussian dataset, got kind '{dataset.kind}'"
        )


def _path_coefficients(sigma_data: float, t: float) -> tuple[float, float, float]:
    # x_t = a*x0 + b*x1 with a = 1-t, b = t; marginal variance s2 per coordinate
    a = 1.0 - t
    b = t
    s2 = a * a * sigma_data * sigma_data + b * b
    return a, b, s2


def oracle_velocity(dataset, x, t: float, y: int) -> np.ndarray:
    """Exact marginal velocity E[x0 - x1 | x_t = x, y] for Gaussian data.

    Conditioning the joint Gaussian of (x0, x1, x_t) under the linear path
    gives an affine map in x:

        v(x, t | y) = mu_y + ((1-t) * sigma^2 - t) / s2(t) * (x - (1-t) * mu_y)

    with s2(t) = (1-t)^2 sigma^2 + t^2 the marginal variance of x_t.
    """
    return oracle_velocity_batch(dataset, np.asarray(x, dtype=np.float64)[None, :], t, y)[0]


def oracle_velocity_batch(dataset, X: np.ndarray, t: float, y) -> np.ndarray:
    _require_gaussian(dataset)
    if not 0.0 <= t <= 1.0:
        raise RangeError(f"t must lie in [0, 1], got {t}")
    X = np.asarray(X, dtype=np.float64)
    a, b, s2 = _path_coefficients(dataset.sigma_data, t)
    coef = (a * dataset.sigma_data**2 - b) / s2
    if np.ndim(y) == 0:
        mu = dataset.label_mean(int(y))
    else:
        ys = np.asarray(y, dtype=np.int64)
        for lab in np.unique(ys):
            _check_label(dataset, int(lab))
        means = dataset.means if isinstance(dataset, GaussianMixture) else dataset.mean[None, :]
        mu = means[ys]
    return mu + coef * (X - a * mu)


def oracle_marginal(dataset, t: float, y: int) -> tuple[np.ndarray, float]:
    """Exact Gaussian marginal of x_t: mean (1-t)*mu_y, variance (1-t)^2 sigma^2 + t^2."""
    if not isinstance(dataset, GaussianSingle):
        raise UnsupportedDatasetError(
            f"closed-form marginal implemented for gaussian_single only, got '{dataset.kind}'"
        )
    if not 0.0 <= t <= 1.0:
        raise RangeError(f"t must lie in [0, 1], got {t}")
    mu = dataset.label_mean(y)
    a, _, s2 = _path_coefficients(dataset.sigma_data, t)
    return a * mu, float(s2)


class OracleVelocityField:
    """Analytic velocity field for all-Gaussian datasets.

    Implements the same forward interface as the learned field so it can
    drive the sampler and the verification harness directly. The null
    condition returns the label-marginalized velocity (posterior-weighted
    mixture of the per-label affine fields, equal label priors).
    """

    def __init__(self, dataset):
        _require_gaussian(dataset)
        self.dataset = dataset
        self.dim = dataset.dim
        self.n_labels = dataset.n_labels

    def forward(self, x, t: float, cond) -> np.ndarray:
        return self.forward_batch(np.asarray(x, dtype=np.float64)[None, :], t, cond)[0]

    def forward_batch(self, X: np.ndarray, t: float, cond) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if cond is not None:
            return oracle_velocity_batch(self.dataset, X, float(t), cond)
        return self._marginal_velocity(X, float(t))

    def _marginal_velocity(self, X: np.ndarray, t: float) -> np.ndarray:
        ds = self.dataset
        if isinstance(ds, GaussianSingle):
            return oracle_velocity_batch(ds, X, t, 0)
        a, _, s2 = _path_coefficients(ds.sigma_data, t)
        # responsibilities under x_t ~ N(a*mu_k, s2 I), equal priors
        diffs = X[:, None, :] - a * ds.means[None, :, :]
        log_w = -0.5 * np.sum(diffs * diffs, axis=2) / s2
        log_w -= log_w.max(axis=1, keepdims=True)
        w = np.exp(log_w)
        w /= w.sum(axis=1, keepdims=True)
        per_label = np.stack(
            [oracle_velocity_batch(ds, X, t, k) for k in range(ds.n_labels)], axis=1
        )
        return np.sum(w[:, :, None] * per_label, axis=1)
