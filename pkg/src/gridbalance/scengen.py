"""Forecast-uncertainty scenarios: learn error statistics, sample, reduce.

Per-lag prediction errors and the variability of consecutive demand
periods are tracked as Gaussians; a large scenario space is drawn from a
bivariate normal per lag and then thinned to a small representative set
by stratifying on the sum-of-squared distance from the baseline forecast.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


class ErrorStats:
    """Online mean/std of realized prediction errors for each lag.

    Until a lag has seen two errors its std reports ``sigma_floor``.
    Uses Welford updates; population normalization.
    """

    def __init__(self, n_lags: int, sigma_floor: float = 0.0):
        if n_lags < 1:
            raise ValueError("need at least one lag")
        if sigma_floor < 0:
            raise ValueError("sigma_floor must be >= 0")
        self.n_lags = n_lags
        self.sigma_floor = float(sigma_floor)
        self._count = np.zeros(n_lags, dtype=np.int64)
        self._mean = np.zeros(n_lags)
        self._m2 = np.zeros(n_lags)

    def update(self, lag: int, actual: float, predicted: float):
        if not 0 <= lag < self.n_lags:
            raise ValueError(f"lag {lag} out of [0, {self.n_lags})")
        err = float(actual) - float(predicted)
        self._count[lag] += 1
        delta = err - self._mean[lag]
        self._mean[lag] += delta / self._count[lag]
        self._m2[lag] += delta * (err - self._mean[lag])

    def count(self, lag: int) -> int:
        return int(self._count[lag])

    def mean(self, lag: int) -> float:
        return float(self._mean[lag]) if self._count[lag] else 0.0

    def std(self, lag: int) -> float:
        if self._count[lag] < 2:
            return self.sigma_floor
        return float(np.sqrt(self._m2[lag] / self._count[lag]))


@dataclass(frozen=True)
class VariabilityStats:
    """Gaussian fit of first differences over a training window."""

    mu_p: float
    sigma_p: float

    def __post_init__(self):
        if self.sigma_p < 0:
            raise ValueError("sigma_p must be >= 0")

    @classmethod
    def from_series(cls, values) -> "VariabilityStats":
        values = np.asarray(values, dtype=float)
        if values.size < 2:
            raise ValueError("need at least two periods for variability stats")
        diffs = np.diff(values)
        return cls(float(np.mean(diffs)), float(np.std(diffs)))


def build_covariance(sigma_l: float, sigma_p: float) -> np.ndarray:
    """2x2 covariance pairing error and variability spreads.

    The off-diagonal carries the variability variance; when that exceeds
    the error variance the matrix would lose positive semidefiniteness,
    so the off-diagonal is clamped to 0.999 of the diagonal (warning).
    """
    if sigma_l < 0 or sigma_p < 0:
        raise ValueError("standard deviations must be >= 0")
    var_l = sigma_l ** 2
    off = sigma_p ** 2
    if off > var_l:
        # static message so repeated occurrences dedupe to one warning
        warnings.warn("variability spread exceeds error spread; clamping "
                      "covariance off-diagonal", stacklevel=2)
        off = 0.999 * var_l
    return np.array([[var_l, off], [off, var_l]])


def _cholesky_2x2(cov: np.ndarray) -> np.ndarray:
    a = cov[0, 0]
    if a <= 0:
        return np.zeros((2, 2))
    l11 = np.sqrt(a)
    l21 = cov[1, 0] / l11
    rem = cov[1, 1] - l21 ** 2
    l22 = np.sqrt(max(rem, 0.0))
    return np.array([[l11, 0.0], [l21, l22]])


def sample_space(error_stats: ErrorStats, variability: VariabilityStats,
                 n_space: int = 5000, w: int = 8, seed=0) -> np.ndarray:
    """Draw an ``n_space x w`` matrix of forecast perturbations.

    Per lag, pairs of standard normals are pushed through the Cholesky
    factor of that lag's covariance; the first (error) component becomes
    the perturbation.  Deterministic for a given seed.
    """
    if w > error_stats.n_lags:
        raise ValueError(f"window {w} exceeds tracked lags {error_stats.n_lags}")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    out = np.empty((n_space, w))
    for lag in range(w):
        cov = build_covariance(error_stats.std(lag), variability.sigma_p)
        chol = _cholesky_2x2(cov)
        z = rng.standard_normal((n_space, 2))
        mu = np.array([error_stats.mean(lag), variability.mu_p])
        draws = mu + z @ chol.T
        out[:, lag] = draws[:, 0]
    return out


@dataclass(frozen=True)
class ScenarioSet:
    """Reduced perturbation set around a baseline forecast window."""

    baseline: np.ndarray
    perturbations: np.ndarray
    probability: float

    def __post_init__(self):
        base = np.asarray(self.baseline, dtype=float).copy()
        pert = np.asarray(self.perturbations, dtype=float).copy()
        if base.ndim != 1 or pert.ndim != 2 or pert.shape[1] != base.size:
            raise ValueError("perturbations must be |S| x len(baseline)")
        if abs(self.probability * pert.shape[0] - 1.0) > 1e-9:
            raise ValueError("probabilities must be uniform and sum to 1")
        base.flags.writeable = False
        pert.flags.writeable = False
        object.__setattr__(self, "baseline", base)
        object.__setattr__(self, "perturbations", pert)

    @property
    def n_scenarios(self) -> int:
        return self.perturbations.shape[0]

    @property
    def window(self) -> int:
        return self.baseline.size

    def demands(self) -> np.ndarray:
        """Per-scenario demand windows, clamped at zero."""
        return np.maximum(self.baseline + self.perturbations, 0.0)

    @classmethod
    def single(cls, baseline) -> "ScenarioSet":
        baseline = np.asarray(baseline, dtype=float)
        return cls(baseline, np.zeros((1, baseline.size)), 1.0)


def reduce(space: np.ndarray, baseline, target_count: int = 57) -> ScenarioSet:
    """Thin a scenario space to ``target_count`` stratified representatives.

    Scenarios are ranked by their sum-of-squared perturbation distance
    from the baseline; one representative is taken per probability
    stratum (index ``(j + 0.5) / target_count`` of the ranking), keeping
    both near-baseline and tail scenarios.  The representative with the
    smallest distance is replaced by the exact baseline so the
    deterministic forecast is always one of the scenarios.
    """
    space = np.asarray(space, dtype=float)
    baseline = np.asarray(baseline, dtype=float)
    n_space = space.shape[0]
    if not 1 <= target_count <= n_space:
        raise ValueError("target_count must be in [1, n_space]")
    ssd = np.sum(space ** 2, axis=1)
    order = np.argsort(ssd, kind="stable")
    taken: list = []
    used = set()
    for j in range(target_count):
        idx = int((j + 0.5) / target_count * (n_space - 1))
        while idx in used and idx < n_space - 1:
            idx += 1
        while idx in used:  # fell off the top; walk down instead
            idx -= 1
        used.add(idx)
        taken.append(idx)
    pert = space[order[np.array(taken)]].copy()
    pert[int(np.argmin(taken))] = 0.0  # smallest-distance pick becomes the baseline
    return ScenarioSet(baseline, pert, 1.0 / target_count)
