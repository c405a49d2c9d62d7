import datetime as dt

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridbalance.core import (BatterySpec, DacVector, DemandSeries,
                              ImbalanceTariff, aggregate_series, compute_dsd,
                              compute_mdsd, imbalance_cost, load_demand_csv,
                              load_holidays)
from conftest import make_series


class TestDemandSeries:
    def test_periods_per_day(self):
        assert make_series(np.ones(48)).periods_per_day == 48
        assert make_series(np.ones(24), granularity=60).periods_per_day == 24

    def test_rejects_negative_and_nonfinite(self):
        with pytest.raises(ValueError):
            make_series([1.0, -0.5])
        with pytest.raises(ValueError):
            make_series([1.0, np.nan])

    def test_rejects_uneven_granularity(self):
        with pytest.raises(ValueError):
            make_series(np.ones(10), granularity=7)

    def test_values_are_immutable(self):
        s = make_series(np.ones(4))
        with pytest.raises(ValueError):
            s.values[0] = 2.0

    def test_calendar_helpers(self):
        s = make_series(np.ones(96), start=dt.datetime(2013, 1, 1, 0, 0))
        assert s.period_of_day(0) == 0
        assert s.period_of_day(49) == 1
        assert s.weekday(0) == 1  # 2013-01-01 was a Tuesday
        assert s.timestamp_at(48) == dt.datetime(2013, 1, 2)


class TestDsd:
    def test_two_day_population_std(self):
        vals = np.zeros(4)
        vals[0], vals[2] = 1.0, 3.0  # period 0 on two days (N=2/day)
        s = make_series(vals, granularity=720)
        assert compute_dsd(s, 0) == pytest.approx(1.0)

    def test_constant_series_is_zero(self):
        s = make_series(np.full(96, 7.5))
        for period in (0, 13, 47):
            assert compute_dsd(s, period) == 0.0

    def test_seeded_gaussian_matches_direct_formula(self):
        rng = np.random.default_rng(11)
        samples = rng.normal(100.0, 5.0, 31)
        vals = np.tile(np.full(48, 50.0), 31)
        vals = vals.reshape(31, 48)
        vals[:, 7] = np.abs(samples)
        s = make_series(vals.ravel())
        got = compute_dsd(s, 7)
        direct = np.sqrt(np.mean((samples - samples.mean()) ** 2))
        assert got == pytest.approx(direct, abs=1e-12)
        assert 3.5 <= got <= 6.5

    def test_partial_day_rejected(self):
        s = make_series(np.ones(50))
        with pytest.raises(ValueError):
            compute_dsd(s, 0)

    def test_period_out_of_range(self):
        s = make_series(np.ones(96))
        with pytest.raises(ValueError):
            compute_dsd(s, 48)


class TestMdsd:
    def test_constant_is_zero(self):
        assert compute_mdsd(make_series(np.full(96, 3.0))) == 0.0

    def test_single_noisy_period(self):
        rng = np.random.default_rng(5)
        mat = np.full((40, 48), 20.0)
        noisy = rng.normal(20.0, 4.0, 40)
        mat[:, 30] = np.abs(noisy)
        s = make_series(mat.ravel())
        brute = max(compute_dsd(s, t) for t in range(48))
        assert compute_mdsd(s) == pytest.approx(brute, abs=1e-12)
        assert compute_mdsd(s) == pytest.approx(np.std(np.abs(noisy)), abs=1e-12)

    def test_single_day_is_zero(self):
        s = make_series(np.arange(48, dtype=float))
        assert compute_mdsd(s) == 0.0

    def test_dominates_every_period(self):
        rng = np.random.default_rng(9)
        s = make_series(rng.uniform(0, 30, 48 * 6))
        m = compute_mdsd(s)
        dsds = [compute_dsd(s, t) for t in range(48)]
        assert all(m >= d for d in dsds)
        assert m == pytest.approx(max(dsds))

    def test_invariant_under_day_permutation(self):
        rng = np.random.default_rng(13)
        mat = rng.uniform(0, 9, (8, 48))
        base = compute_mdsd(make_series(mat.ravel()))
        for seed in range(3):
            perm = np.random.default_rng(seed).permutation(8)
            assert compute_mdsd(make_series(mat[perm].ravel())) == pytest.approx(base)


class TestImbalanceTariff:
    def test_validation(self):
        with pytest.raises(ValueError):
            ImbalanceTariff(0.0)
        with pytest.raises(ValueError):
            ImbalanceTariff(50.0, (10.0, 20.0, 5.0, 0.0))  # not non-increasing
        with pytest.raises(ValueError):
            ImbalanceTariff(50.0, (10.0, 5.0, 1.0))  # odd segment count
        with pytest.raises(ValueError):
            ImbalanceTariff(50.0, big_m=40.0)  # threshold above big_m

    def test_reference_points(self, paper_tariff):
        assert imbalance_cost(0.0, paper_tariff) == 0.0
        assert imbalance_cost(-100.0, paper_tariff) == pytest.approx(3035.0)
        assert imbalance_cost(100.0, paper_tariff) == pytest.approx(-524.0)

    def test_piecewise_formula(self, paper_tariff):
        # inside the threshold on both sides
        assert imbalance_cost(-30.0, paper_tariff) == pytest.approx(15.0 * 30)
        assert imbalance_cost(30.0, paper_tariff) == pytest.approx(-10.48 * 30)
        # flat beyond +Th since the outermost sell price is zero
        assert imbalance_cost(51.0, paper_tariff) == pytest.approx(
            imbalance_cost(1000.0, paper_tariff))

    @settings(max_examples=200, deadline=None)
    @given(st.tuples(st.floats(-400, 400), st.floats(-400, 400),
                     st.floats(-400, 400)))
    def test_convexity_on_random_triples(self, points):
        tariff = ImbalanceTariff(50.0, (45.7, 15.0, 10.48, 0.0))
        a, b, c = sorted(points)
        if c - a < 1e-9:
            return
        lam = (b - a) / (c - a)
        interp = ((1 - lam) * imbalance_cost(a, tariff)
                  + lam * imbalance_cost(c, tariff))
        assert imbalance_cost(b, tariff) <= interp + 1e-7

    def test_slopes_non_decreasing(self, paper_tariff):
        xs = np.linspace(-200, 200, 401)
        ys = np.array([imbalance_cost(x, paper_tariff) for x in xs])
        slopes = np.diff(ys)
        assert np.all(np.diff(slopes) >= -1e-9)

    def test_general_segment_count(self):
        t6 = ImbalanceTariff(10.0, (50.0, 30.0, 20.0, 8.0, 4.0, 0.0))
        # shortage of 25: 10@30 + 10@... walk: inner 20, then 30, then 50
        assert imbalance_cost(-25.0, t6) == pytest.approx(
            10 * 20.0 + 10 * 30.0 + 5 * 50.0)
        assert imbalance_cost(15.0, t6) == pytest.approx(-(10 * 8.0 + 5 * 4.0))


class TestBatterySpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            BatterySpec(10.0, 5.0, 5.0, soc_min_frac=0.5, soc_max_frac=0.4)
        with pytest.raises(ValueError):
            BatterySpec(10.0, 5.0, 5.0, eta_charge=1.5)
        with pytest.raises(ValueError):
            BatterySpec(-1.0, 5.0, 5.0)

    def test_aggregate_folds_units(self):
        b = BatterySpec(6.4, 12.8, 12.8, unit_count=50)
        agg = b.aggregate()
        assert agg.capacity_kwh == pytest.approx(320.0)
        assert agg.power_charge_kw == pytest.approx(640.0)
        assert agg.unit_count == 1
        assert agg.soc_min_kwh == pytest.approx(b.soc_min_kwh)
        assert agg.soc_max_kwh == pytest.approx(b.soc_max_kwh)

    def test_energy_per_period(self):
        b = BatterySpec(320.0, 640.0, 640.0)
        assert b.energy_per_period(30) == (pytest.approx(320.0), pytest.approx(320.0))
        assert b.energy_per_period(60) == (pytest.approx(640.0), pytest.approx(640.0))

    def test_zero_power_allowed(self):
        b = BatterySpec(0.0, 0.0, 0.0)
        assert b.energy_per_period(30) == (0.0, 0.0)


class TestDacVector:
    def test_requires_ascending(self):
        with pytest.raises(ValueError):
            DacVector((("a", 2.0), ("b", 1.0)))

    def test_from_series_sorts(self):
        rng = np.random.default_rng(3)
        quiet = make_series(np.full(96, 10.0), customer_id="quiet")
        noisy_vals = np.full((2, 48), 10.0)
        noisy_vals[1, 5] = 18.0
        noisy = make_series(noisy_vals.ravel(), customer_id="noisy")
        vec = DacVector.from_series([noisy, quiet])
        assert vec.customer_ids == ["quiet", "noisy"]
        assert vec.dacs[0] == 0.0


class TestCsvLoader:
    def _write(self, tmp_path, rows, header="timestamp,customer_id,kwh"):
        path = tmp_path / "demand.csv"
        path.write_text("\n".join([header] + rows) + "\n")
        return path

    def test_round_trip_two_customers(self, tmp_path):
        rows = []
        start = dt.datetime(2013, 1, 1)
        for cid in ("a", "b"):
            for i in range(96):
                ts = start + dt.timedelta(minutes=30 * i)
                rows.append(f"{ts.isoformat(sep=' ')},{cid},{1.5 + i * 0.25}")
        series = load_demand_csv(self._write(tmp_path, rows))
        assert [s.customer_id for s in series] == ["a", "b"]
        assert all(len(s) == 96 for s in series)
        assert series[0].granularity_minutes == 30
        assert series[0].values[1] == pytest.approx(1.75)

    def test_gap_names_timestamp(self, tmp_path):
        start = dt.datetime(2013, 1, 1)
        rows = [f"{(start + dt.timedelta(minutes=30 * i)).isoformat(sep=' ')},a,1.0"
                for i in range(6) if i != 3]
        with pytest.raises(ValueError, match="01:30"):
            load_demand_csv(self._write(tmp_path, rows))

    def test_negative_kwh_rejected_with_line(self, tmp_path):
        rows = ["2013-01-01 00:00:00,a,1.0", "2013-01-01 00:30:00,a,-2.0"]
        with pytest.raises(ValueError, match=":3"):
            load_demand_csv(self._write(tmp_path, rows))

    def test_malformed_row(self, tmp_path):
        rows = ["2013-01-01 00:00:00,a,1.0", "not-a-time,a,1.0"]
        with pytest.raises(ValueError, match=":3"):
            load_demand_csv(self._write(tmp_path, rows))

    def test_bad_header(self, tmp_path):
        with pytest.raises(ValueError, match="header"):
            load_demand_csv(self._write(tmp_path, [], header="time,cust,val"))


def test_load_holidays(tmp_path):
    path = tmp_path / "holidays.txt"
    path.write_text("# national\n2013-01-01\n\n2013-01-14\n")
    days = load_holidays(path)
    assert days == {dt.date(2013, 1, 1), dt.date(2013, 1, 14)}
    path.write_text("2013-13-45\n")
    with pytest.raises(ValueError):
        load_holidays(path)


def test_aggregate_series():
    a = make_series(np.full(48, 1.0), customer_id="a")
    b = make_series(np.full(48, 2.5), customer_id="b")
    agg = aggregate_series([a, b])
    assert np.allclose(agg.values, 3.5)
    with pytest.raises(ValueError):
        aggregate_series([a, make_series(np.ones(96), customer_id="c")])
