import datetime as dt

import numpy as np
import pytest

from gridbalance.predictor import (RollingPredictor, SvrModel,
                                   build_training_set, predict_window,
                                   temporal_features, train_svr)
from conftest import make_series


def daily_profile_series(days, seed=0, noise=0.03, start=dt.datetime(2013, 1, 1)):
    rng = np.random.default_rng(seed)
    n = 48
    idx = np.arange(days * n)
    pod = idx % n
    dow = ((idx // n) + start.weekday()) % 7
    base = 200 + 80 * np.sin(2 * np.pi * (pod - 14) / n) \
        + 40 * np.exp(-((pod - 38.0) / 6) ** 2)
    vals = base * np.where(dow < 5, 1.05, 0.95) \
        * (1 + noise * rng.standard_normal(idx.size))
    return make_series(np.maximum(vals, 0.0), start=start)


class TestBuildTrainingSet:
    def test_hand_unrolled_index_scheme(self):
        s = make_series([1.0, 2.0, 3.0, 4.0], granularity=360)
        feats, targets = build_training_set(s, lag=0, n_past=1, n_rows=2)
        assert feats[:, 0].tolist() == [2.0, 3.0]
        assert targets.tolist() == [3.0, 4.0]

    def test_lag_shifts_features_not_targets(self):
        s = make_series([1.0, 2.0, 3.0, 4.0], granularity=360)
        f0, t0 = build_training_set(s, lag=0, n_past=1, n_rows=2)
        f1, t1 = build_training_set(s, lag=1, n_past=1, n_rows=2)
        assert t0.tolist() == t1.tolist()
        assert f1[:, 0].tolist() == [1.0, 2.0]

    def test_most_recent_demand_first(self):
        s = make_series(np.arange(10.0, 20.0), granularity=144)
        feats, _ = build_training_set(s, lag=0, n_past=3, n_rows=2)
        assert feats[0, :3].tolist() == [17.0, 16.0, 15.0]

    def test_too_short_history_names_requirement(self):
        s = make_series(np.ones(4), granularity=360)
        with pytest.raises(ValueError, match="needs 7"):
            build_training_set(s, lag=2, n_past=1, n_rows=4)

    def test_feature_width(self):
        s = make_series(np.arange(48.0) + 1)
        feats, _ = build_training_set(s, lag=0, n_past=5, n_rows=10)
        assert feats.shape == (10, 9)


def test_temporal_features_holiday_flag():
    s = make_series(np.ones(96), start=dt.datetime(2013, 1, 5))  # a Saturday
    assert temporal_features(s, 0)[0] == 1.0
    weekday_series = make_series(np.ones(96), start=dt.datetime(2013, 1, 7))
    assert temporal_features(weekday_series, 0)[0] == 0.0
    hol = frozenset({dt.date(2013, 1, 7)})
    assert temporal_features(weekday_series, 0, hol)[0] == 1.0


class TestTrainSvr:
    def test_constant_target_bias_only(self):
        rng = np.random.default_rng(0)
        model = train_svr(rng.standard_normal((30, 4)), np.full(30, 100.0))
        assert model.support_vectors.shape[0] == 0
        assert model.predict(rng.standard_normal((5, 4))) == pytest.approx(100.0)

    def test_linear_relation_low_error(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, (120, 1))
        y = 40.0 * x[:, 0] + 100.0
        model = train_svr(x, y)
        mae = np.mean(np.abs(model.predict(x) - y))
        assert mae < 0.05 * (y.max() - y.min())

    def test_single_grid_point_selected(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((24, 3))
        y = x @ [1.0, -2.0, 0.5] + 5
        model = train_svr(x, y, grid=[(10.0, 0.2, 0.1)])
        assert (model.c, model.gamma, model.epsilon) == (10.0, 0.2, 0.1)

    def test_dual_feasibility(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((60, 4))
        y = np.sin(x[:, 0]) * 10 + 50 + rng.standard_normal(60)
        model = train_svr(x, y, grid=[(5.0, 0.25, 0.2)])
        assert abs(model.dual_coef.sum()) < 1e-6
        assert np.all(np.abs(model.dual_coef) <= model.c + 1e-9)

    def test_row_order_invariance(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((50, 3))
        y = x @ [2.0, 1.0, -1.0] + 20 + 0.1 * rng.standard_normal(50)
        m1 = train_svr(x, y, grid=[(10.0, 0.3, 0.05)])
        perm = rng.permutation(50)
        m2 = train_svr(x[perm], y[perm], grid=[(10.0, 0.3, 0.05)])
        probe = rng.standard_normal((10, 3))
        assert m1.predict(probe) == pytest.approx(m2.predict(probe),
                                                  abs=0.01 * y.std())

    def test_needs_enough_rows(self):
        with pytest.raises(ValueError):
            train_svr(np.ones((4, 2)), np.arange(4.0), cv_folds=3)

    def test_rbf_kernel_range(self):
        # K(x, x) = 1 and K decays but stays positive
        rng = np.random.default_rng(5)
        x = rng.standard_normal((40, 3))
        y = x[:, 0] * 5 + 30
        model = train_svr(x, y, grid=[(10.0, 0.5, 0.1)])
        sv = model.support_vectors
        d2 = ((sv[:, None, :] - sv[None, :, :]) ** 2).sum(axis=2)
        k = np.exp(-model.gamma * d2)
        assert np.allclose(np.diag(k), 1.0)
        assert np.all((k > 0) & (k <= 1.0))


class TestPredictWindow:
    def test_constant_history(self):
        s = daily_profile_series(6, noise=0.0)
        const = make_series(np.full(48 * 6, 100.0))
        models = []
        for lag in range(2):
            f, t = build_training_set(const, lag, 24, 100)
            models.append(train_svr(f, t, grid=[(10.0, 0.1, 0.5)]))
        out = predict_window(models, const, 24)
        assert out == pytest.approx(np.full(2, 100.0), abs=1.0)

    def test_negative_prediction_clamped(self):
        model = SvrModel(np.zeros((0, 28)), np.zeros(0), -5.0, 0.1, 1.0, 0.1,
                         np.zeros(28), np.ones(28), 0)
        s = make_series(np.ones(48))
        out = predict_window([model], s, 24)
        assert out[0] == 0.0

    def test_window_shape_and_finite(self):
        s = daily_profile_series(22, seed=3)
        pred = RollingPredictor(window=8, n_past=48, training_days=20)
        assert pred.train(s)
        out = pred.predict(s)
        assert out.shape == (8,)
        assert np.all(np.isfinite(out)) and np.all(out >= 0)

    def test_missing_model_rejected(self):
        s = make_series(np.ones(96))
        with pytest.raises(ValueError, match="lag 0"):
            predict_window([None], s, 10)


class TestRollingPredictor:
    def test_insufficient_history_warns_and_keeps_models(self):
        s = daily_profile_series(21, seed=1)
        pred = RollingPredictor(window=2, n_past=24, training_days=20)
        assert pred.train(s)
        old = pred.models[0]
        short = make_series(s.values[:14 * 48])
        with pytest.warns(UserWarning, match="keeping previous"):
            assert not pred.retrain_rolling(short)
        assert pred.models[0] is old

    def test_rolling_window_span(self):
        """Retraining at day d uses exactly days d-20..d-1."""
        s = daily_profile_series(25, seed=2)
        captured = {}

        pred = RollingPredictor(window=1, n_past=48, training_days=20)
        import gridbalance.predictor as mod
        orig = mod.build_training_set

        def spy(history, lag, n_past, n_rows, holidays=frozenset()):
            captured["span"] = len(history)
            captured["last"] = history.values[-1]
            return orig(history, lag, n_past, n_rows, holidays)

        mod.build_training_set = spy
        try:
            pred.train(make_series(s.values[:24 * 48]))
        finally:
            mod.build_training_set = orig
        assert captured["span"] == 20 * 48
        assert captured["last"] == s.values[24 * 48 - 1]

    def test_grid_reused_after_first_training(self):
        s = daily_profile_series(21, seed=4)
        pred = RollingPredictor(window=1, n_past=24, training_days=20)
        pred.train(make_series(s.values[:20 * 48]))
        first = (pred.models[0].c, pred.models[0].gamma, pred.models[0].epsilon)
        pred.retrain_rolling(s)
        again = (pred.models[0].c, pred.models[0].gamma, pred.models[0].epsilon)
        assert first[:2] == again[:2]  # same C and gamma reused


def test_forecast_quality_on_synthetic_profile():
    """Rolling one-day-ahead window errors stay under a 10% MAPE."""
    series = daily_profile_series(24, seed=11, noise=0.03)
    pred = RollingPredictor(window=8, n_past=48, training_days=20)
    pred.train(make_series(series.values[:20 * 48]))
    errs = []
    for t in range(20 * 48, 22 * 48):
        hist = make_series(series.values[:t])
        window = pred.predict(hist)
        horizon = min(8, series.values.size - t)
        actual = series.values[t:t + horizon]
        errs.extend(np.abs(window[:horizon] - actual) / np.maximum(actual, 1e-9))
    assert float(np.mean(errs)) < 0.10
