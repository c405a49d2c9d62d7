"""Short-term demand forecasting with per-lag kernel regression models.

One epsilon-insensitive RBF support-vector model is trained per forecast
lag; features are the most recent block of past demands plus temporal
context (holiday/weekend flag, time-of-day harmonics, day of week).
Hyper-parameters come from a grid search with contiguous time-ordered
cross-validation folds, and the models are refreshed daily on a rolling
window of recent history.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.svm import SVR

from .core import DemandSeries

N_EXTRA_FEATURES = 4  # holiday flag, sin/cos time of day, day of week
KKT_TOL = 1e-3
MAX_PASSES = 100_000


def temporal_features(series: DemandSeries, index: int, holidays=frozenset()):
    """Calendar feature block for one (possibly future) period index."""
    ts = series.timestamp_at(index)
    dow = ts.weekday()
    flag = 1.0 if (dow >= 5 or ts.date() in holidays) else 0.0
    angle = 2.0 * np.pi * series.period_of_day(index) / series.periods_per_day
    return np.array([flag, np.sin(angle), np.cos(angle), dow / 6.0])


def build_training_set(history: DemandSeries, lag: int, n_past: int,
                       n_rows: int, holidays=frozenset()):
    """Lagged feature rows and targets for one forecast-lag model.

    Row ``i`` (the last ``n_rows`` periods of the history) maps the
    demands at ``i - lag - 1`` back through ``i - lag - n_past`` plus the
    temporal block at ``i`` onto the demand at ``i``.
    """
    length = len(history)
    needed = n_rows + n_past + lag
    if length < needed:
        raise ValueError(
            f"history of {length} periods is too short: lag {lag} with "
            f"{n_past} past periods and {n_rows} rows needs {needed}")
    values = history.values
    feats = np.empty((n_rows, n_past + N_EXTRA_FEATURES))
    targets = np.empty(n_rows)
    for r, i in enumerate(range(length - n_rows, length)):
        stop = i - lag
        feats[r, :n_past] = values[stop - n_past:stop][::-1]
        feats[r, n_past:] = temporal_features(history, i, holidays)
        targets[r] = values[i]
    return feats, targets


@dataclass(frozen=True)
class SvrModel:
    """Trained epsilon-SVR with its standardization, ready to predict."""

    support_vectors: np.ndarray
    dual_coef: np.ndarray
    bias: float
    gamma: float
    c: float
    epsilon: float
    feat_mean: np.ndarray
    feat_std: np.ndarray
    lag: int

    def predict(self, features) -> np.ndarray:
        x = np.atleast_2d(np.asarray(features, dtype=float))
        xs = (x - self.feat_mean) / self.feat_std
        if self.support_vectors.size == 0:
            return np.full(x.shape[0], self.bias)
        d2 = ((xs[:, None, :] - self.support_vectors[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-self.gamma * d2) @ self.dual_coef + self.bias


def default_grid(n_features: int, target_std: float):
    """(C, gamma, epsilon) grid; scale-aware in features and targets."""
    cs = (1.0, 10.0, 100.0)
    gammas = tuple(g / n_features for g in (0.01, 0.1, 1.0))
    eps_base = target_std if target_std > 0 else 1.0
    epsilons = tuple(f * eps_base for f in (0.005, 0.01, 0.02))
    return [(c, g, e) for c in cs for g in gammas for e in epsilons]


def _standardize(feats):
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return (feats - mean) / std, mean, std


def _fit_point(xs, targets, c, gamma, eps):
    model = SVR(kernel="rbf", C=c, gamma=gamma, epsilon=eps,
                tol=KKT_TOL, max_iter=MAX_PASSES, cache_size=100)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # benign ConvergenceWarning at max_iter
        model.fit(xs, targets)
    return model


def train_svr(features, targets, grid=None, cv_folds: int = 3, seed=0,
              lag: int = 0) -> SvrModel:
    """Grid-searched epsilon-SVR on standardized features.

    Cross-validation splits the time-ordered rows into ``cv_folds``
    contiguous blocks (no shuffling across time); the grid point with the
    lowest mean validation MAE wins, ties to the earlier point, and the
    winner is refit on all rows.  ``seed`` is accepted for interface
    stability; the fold layout is deterministic without it.
    """
    feats = np.asarray(features, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if feats.ndim != 2 or feats.shape[0] != targets.size:
        raise ValueError("features must be 2-D with one row per target")
    n_rows = targets.size
    if n_rows < 2 * cv_folds:
        raise ValueError(f"need at least {2 * cv_folds} rows for {cv_folds}-fold CV")

    xs, mean, std = _standardize(feats)
    t_std = float(np.std(targets))
    if t_std == 0.0:  # constant target: the tube holds it with no support vectors
        return SvrModel(np.zeros((0, feats.shape[1])), np.zeros(0),
                        float(targets[0]), 1.0 / feats.shape[1], 1.0, 0.0,
                        mean, std, lag)

    if grid is None:
        grid = default_grid(feats.shape[1], t_std)
    if len(grid) > 1:
        bounds = np.linspace(0, n_rows, cv_folds + 1).astype(int)
        scores = []
        for c, gamma, eps in grid:
            maes = []
            for k in range(cv_folds):
                val = slice(bounds[k], bounds[k + 1])
                train_idx = np.r_[0:bounds[k], bounds[k + 1]:n_rows]
                fit = _fit_point(xs[train_idx], targets[train_idx], c, gamma, eps)
                maes.append(np.mean(np.abs(fit.predict(xs[val]) - targets[val])))
            scores.append(np.mean(maes))
        best = grid[int(np.argmin(scores))]
    else:
        best = grid[0]

    c, gamma, eps = best
    fit = _fit_point(xs, targets, c, gamma, eps)
    return SvrModel(fit.support_vectors_.copy(), fit.dual_coef_.ravel().copy(),
                    float(fit.intercept_[0]), gamma, c, eps, mean, std, lag)


def predict_window(models, history: DemandSeries, n_past: int,
                   holidays=frozenset()) -> np.ndarray:
    """One demand estimate per lag model, clamped at zero.

    All lag models share the same most-recent demand block; they differ
    in the temporal block of their target period and in their training.
    """
    t = len(history)
    if t < n_past:
        raise ValueError(f"need {n_past} periods of history, have {t}")
    recent = history.values[t - n_past:t][::-1]
    out = np.empty(len(models))
    for l, model in enumerate(models):
        if model is None:
            raise ValueError(f"no model for lag {l}")
        row = np.concatenate([recent, temporal_features(history, t + l, holidays)])
        out[l] = model.predict(row[None, :])[0]
    return np.maximum(out, 0.0)


class RollingPredictor:
    """Per-lag models refreshed on a rolling window of whole days.

    The hyper-parameter grid is searched once on the first training pass;
    later retrains reuse the chosen point per lag and only refit.
    """

    def __init__(self, window: int = 8, n_past: int = 48,
                 training_days: int = 20, holidays=frozenset(), seed=0):
        self.window = window
        self.n_past = n_past
        self.training_days = training_days
        self.holidays = frozenset(holidays)
        self.seed = seed
        self.models = [None] * window
        self._chosen_grid = [None] * window

    @property
    def trained(self) -> bool:
        return all(m is not None for m in self.models)

    def train(self, history: DemandSeries) -> bool:
        """(Re)fit every lag on the trailing ``training_days`` of history.

        Keeps the previous models and warns instead of failing when the
        history is still too short.
        """
        n = history.periods_per_day
        span = self.training_days * n
        if len(history) < span:
            warnings.warn(
                f"only {len(history)} periods of history; keeping previous "
                f"models (need {span})", stacklevel=2)
            return False
        tail = DemandSeries(history.customer_id,
                            history.timestamp_at(len(history) - span),
                            history.values[-span:], history.granularity_minutes)
        for lag in range(self.window):
            n_rows = span - self.n_past - lag
            feats, targets = build_training_set(tail, lag, self.n_past,
                                                n_rows, self.holidays)
            self.models[lag] = train_svr(feats, targets,
                                         grid=self._chosen_grid[lag],
                                         seed=self.seed, lag=lag)
            if self._chosen_grid[lag] is None:
                m = self.models[lag]
                self._chosen_grid[lag] = [(m.c, m.gamma, m.epsilon)]
        return True

    def retrain_rolling(self, history: DemandSeries) -> bool:
        """Day-boundary refresh; alias of :meth:`train` on current history."""
        return self.train(history)

    def predict(self, history: DemandSeries) -> np.ndarray:
        if not self.trained:
            raise ValueError("predictor has not been trained yet")
        return predict_window(self.models, history, self.n_past, self.holidays)
