"""Closed-loop campaign driver: predict, sample scenarios, dispatch, settle.

Builds a synthetic building fleet (stand-in for a private metering data
set), contracts day-ahead supply as noisy actual demand, and walks the
horizon period by period applying only the first step of each optimized
dispatch window.  Baselines without a battery and with a single-scenario
(deterministic) optimizer share the same data path, as does the battery
capacity sweep.
"""

from __future__ import annotations

import datetime as dt
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (BatterySpec, DemandSeries, ImbalanceTariff,
                   aggregate_series, imbalance_cost)
from .predictor import RollingPredictor
from .scengen import ErrorStats, ScenarioSet, VariabilityStats, reduce, sample_space
from .scheduler import WindowInput, solve_window_full

WARMUP_DAYS = 20
_SEED_FLEET, _SEED_CONTRACT, _SEED_SCENARIO = 1, 2, 3


def derived_seed(master: int, tag: int, k: int = 0) -> int:
    """Stable child seed; independent streams per (tag, k)."""
    return int(np.random.SeedSequence([int(master), int(tag), int(k)])
               .generate_state(1)[0])


@dataclass(frozen=True)
class CampaignConfig:
    """Experimental protocol constants for one simulation campaign."""

    horizon_days: int = 14
    window: int = 8
    n_space: int = 5000
    n_reduced: int = 57
    contract_error_frac: float = 0.10
    c0: float = 0.1
    c1: float = 1.0
    seed: int = 0
    granularity_minutes: int = 30
    n_past: int = 48
    training_days: int = WARMUP_DAYS
    sigma_floor_frac: float = 0.05
    tariff_prices: tuple = (45.7, 15.0, 10.48, 0.0)
    tariff_threshold: float | None = None   # None: 3% of max contracted supply
    tariff_big_m: float = 1e7
    sweep_capacities: tuple = ()
    holidays: frozenset = frozenset()
    start: dt.datetime = dt.datetime(2013, 1, 1)

    def __post_init__(self):
        if self.horizon_days < 1 or self.window < 1:
            raise ValueError("horizon and window must be positive")
        if self.n_space < self.n_reduced or self.n_reduced < 1:
            raise ValueError("need 1 <= n_reduced <= n_space")
        if self.contract_error_frac < 0:
            raise ValueError("contract_error_frac must be >= 0")
        n = 1440 // self.granularity_minutes
        if self.window > n:
            raise ValueError("window must fit within one day")

    @property
    def periods_per_day(self) -> int:
        return 1440 // self.granularity_minutes


def generate_synthetic_fleet(n_customers: int, cluster_spec, seed,
                             horizon_days: int,
                             start=dt.datetime(2013, 1, 1),
                             granularity_minutes: int = 30) -> list:
    """Synthetic per-customer demand for ``horizon_days`` plus warm-up.

    ``cluster_spec`` lists ``(count, base_scale_kwh, noise_dsd_kwh)``
    groups.  Each customer gets a double-peaked daily profile scaled by a
    jittered base, a small weekday uplift, and Gaussian period noise with
    a std near its cluster's target deviation criterion.
    """
    cluster_spec = [(int(c), float(s), float(d)) for c, s, d in cluster_spec]
    if n_customers != sum(c for c, _, _ in cluster_spec):
        raise ValueError("n_customers does not match the cluster spec")
    n = 1440 // granularity_minutes
    days = horizon_days + WARMUP_DAYS
    idx = np.arange(days * n)
    pod = idx % n
    dow = ((idx // n) + start.weekday()) % 7
    # double-peaked shape, peak about 1.0: morning and evening humps
    x = pod / n
    shape = (0.35 + 0.45 * np.exp(-((x - 0.35) / 0.09) ** 2)
             + 0.62 * np.exp(-((x - 0.80) / 0.10) ** 2))
    weekday_add = np.where(dow < 5, 0.02, 0.0)

    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    fleet = []
    cid = 0
    for count, scale, noise in cluster_spec:
        for _ in range(count):
            scale_c = scale * (1.0 + rng.uniform(-0.2, 0.2))
            noise_c = noise * (1.0 + rng.uniform(-0.1, 0.1))
            vals = (shape * scale_c + weekday_add * scale_c
                    + rng.normal(0.0, noise_c, idx.size))
            fleet.append(DemandSeries(f"b{cid:03d}", start,
                                      np.maximum(vals, 0.0),
                                      granularity_minutes))
            cid += 1
    return fleet


def make_contract(actual: DemandSeries, error_frac: float, seed) -> np.ndarray:
    """Day-ahead contracted supply: demand plus relative Gaussian error."""
    if error_frac < 0:
        raise ValueError("error_frac must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    dm = actual.values
    eps = rng.standard_normal(dm.size) * (error_frac * dm)
    return np.maximum(dm + eps, 0.0)


@dataclass
class SimulationTrace:
    """Per-period record of one campaign plus its totals."""

    mode: str
    sp: np.ndarray
    dm: np.ndarray
    pred: np.ndarray
    p: np.ndarray
    soc: np.ndarray
    im: np.ndarray
    ic: np.ndarray
    cum_ic: np.ndarray
    tariff: ImbalanceTariff = None
    runtime_s: float = 0.0
    solver_nodes: int = 0
    solver_iterations: int = 0
    predictions: list = field(default_factory=list, repr=False)

    @property
    def total_cost(self) -> float:
        return float(self.cum_ic[-1]) if self.cum_ic.size else 0.0

    @property
    def basic_cost(self) -> float:
        """No-battery settlement implied by the same contract and demand."""
        return float(sum(imbalance_cost(im, self.tariff)
                         for im in (self.sp - self.dm)))

    def summary(self) -> dict:
        basic = self.basic_cost
        total = self.total_cost
        reduction = 100.0 * (1.0 - total / basic) if basic > 0 else 0.0
        return {
            "mode": self.mode,
            "total_cost": total,
            "basic_cost": basic,
            "reduction_pct": reduction,
            "runtime_s": self.runtime_s,
        }

    def to_csv(self) -> str:
        lines = ["period,sp,dm,pred,p,soc,im,ic,cum_ic"]
        for t in range(self.sp.size):
            pred = "" if np.isnan(self.pred[t]) else repr(float(self.pred[t]))
            lines.append(",".join([
                str(t), repr(float(self.sp[t])), repr(float(self.dm[t])), pred,
                repr(float(self.p[t])), repr(float(self.soc[t])),
                repr(float(self.im[t])), repr(float(self.ic[t])),
                repr(float(self.cum_ic[t])),
            ]))
        return "\n".join(lines) + "\n"


class Campaign:
    """Shared data path for every mode of one seeded campaign."""

    def __init__(self, config: CampaignConfig, fleet_group):
        self.config = config
        n = config.periods_per_day
        self.n = n
        self.agg = aggregate_series(list(fleet_group))
        needed = (config.horizon_days + config.training_days) * n
        if len(self.agg) < needed:
            raise ValueError(
                f"fleet history of {len(self.agg)} periods is shorter than "
                f"warm-up plus horizon ({needed})")
        self.t0 = config.training_days * n
        self.horizon = config.horizon_days * n
        supply_full = make_contract(self.agg, config.contract_error_frac,
                                    derived_seed(config.seed, _SEED_CONTRACT))
        self.sp = supply_full[self.t0:self.t0 + self.horizon]
        th = config.tariff_threshold
        if th is None:
            th = 0.03 * float(np.max(self.sp))
        self.tariff = ImbalanceTariff(th, config.tariff_prices,
                                      config.tariff_big_m)
        self._baselines = None

    def _history(self, t_abs: int) -> DemandSeries:
        return DemandSeries(self.agg.customer_id, self.agg.start,
                            self.agg.values[:t_abs],
                            self.config.granularity_minutes)

    def baselines(self) -> np.ndarray:
        """Point forecasts for every period, one row of ``window`` per t.

        Demand does not depend on dispatch, so the rolling forecast pass
        is identical in every mode and is computed once per campaign.
        """
        if getattr(self, "_baselines", None) is not None:
            return self._baselines
        cfg = self.config
        predictor = RollingPredictor(cfg.window, cfg.n_past, cfg.training_days,
                                     holidays=cfg.holidays, seed=cfg.seed)
        predictor.train(self._history(self.t0))
        out = np.zeros((self.horizon, cfg.window))
        for t in range(self.horizon):
            t_abs = self.t0 + t
            if t > 0 and t_abs % self.n == 0:
                predictor.retrain_rolling(self._history(t_abs))
            out[t] = predictor.predict(self._history(t_abs))
        self._baselines = out
        return out

    def run_no_battery(self) -> SimulationTrace:
        start = time.perf_counter()
        dm = self.agg.values[self.t0:self.t0 + self.horizon]
        im = self.sp - dm
        ic = np.array([imbalance_cost(v, self.tariff) for v in im])
        return SimulationTrace(
            mode="nobattery", sp=self.sp.copy(), dm=dm.copy(),
            pred=np.full(self.horizon, np.nan), p=np.zeros(self.horizon),
            soc=np.zeros(self.horizon), im=im, ic=ic, cum_ic=np.cumsum(ic),
            tariff=self.tariff, runtime_s=time.perf_counter() - start)

    def run_dispatch(self, battery: BatterySpec, stochastic=True,
                     mode_name=None) -> SimulationTrace:
        cfg = self.config
        baselines = self.baselines()
        start_time = time.perf_counter()
        battery = battery.aggregate()
        n, t0, horizon = self.n, self.t0, self.horizon
        dm_actual = self.agg.values[t0:t0 + horizon]

        warm_window = self.agg.values[t0 - cfg.training_days * n:t0]
        sigma_floor = cfg.sigma_floor_frac * float(np.mean(warm_window))
        err_stats = ErrorStats(cfg.window, sigma_floor)
        var_stats = VariabilityStats.from_series(warm_window)

        soc = 0.5 * battery.capacity_kwh * battery.unit_count
        soc = min(max(soc, battery.soc_min_kwh), battery.soc_max_kwh)

        p_arr = np.zeros(horizon)
        soc_arr = np.zeros(horizon)
        pred_arr = np.zeros(horizon)
        im_arr = np.zeros(horizon)
        ic_arr = np.zeros(horizon)
        predictions: list = []
        nodes = iters = 0

        for t in range(horizon):
            t_abs = t0 + t
            if t > 0 and t_abs % n == 0:
                window_vals = self.agg.values[t_abs - cfg.training_days * n:t_abs]
                var_stats = VariabilityStats.from_series(window_vals)

            baseline = baselines[t]
            w_eff = min(cfg.window, horizon - t)
            base_eff = baseline[:w_eff]
            if stochastic:
                space = sample_space(err_stats, var_stats, cfg.n_space, w_eff,
                                     derived_seed(cfg.seed, _SEED_SCENARIO, t))
                scen = reduce(space, base_eff, min(cfg.n_reduced, cfg.n_space))
            else:
                scen = ScenarioSet.single(base_eff)

            win = WindowInput(t_abs, self.sp[t:t + w_eff], scen, battery, soc,
                              self.tariff, cfg.c0, cfg.c1,
                              cfg.granularity_minutes)
            # each window starts from its own data-adapted feasible basis;
            # measured faster than reusing the previous window's basis
            decision, sol, _enc = solve_window_full(win)
            nodes += sol.node_count
            iters += sol.lp_iterations

            p = decision.p_first
            gain = battery.eta_charge * p if p >= 0 else p / battery.eta_discharge
            soc = min(max(soc + gain, battery.soc_min_kwh), battery.soc_max_kwh)

            predictions.append(baseline)
            pred_arr[t] = baseline[0]
            p_arr[t] = p
            soc_arr[t] = soc
            im_arr[t] = self.sp[t] - dm_actual[t] - p
            ic_arr[t] = imbalance_cost(im_arr[t], self.tariff)

            for lag in range(min(t + 1, cfg.window)):
                made = t - lag
                if lag < len(predictions[made]):
                    err_stats.update(lag, dm_actual[t], predictions[made][lag])

        return SimulationTrace(
            mode=mode_name or ("sswcd" if stochastic else "deterministic"),
            sp=self.sp.copy(), dm=dm_actual.copy(), pred=pred_arr, p=p_arr,
            soc=soc_arr, im=im_arr, ic=ic_arr, cum_ic=np.cumsum(ic_arr),
            tariff=self.tariff, runtime_s=time.perf_counter() - start_time,
            solver_nodes=nodes, solver_iterations=iters,
            predictions=predictions)


def run_sswcd(config: CampaignConfig, fleet_group, battery: BatterySpec,
              campaign: Campaign = None) -> SimulationTrace:
    """Full stochastic sliding-window charge/discharge campaign."""
    camp = campaign if campaign is not None else Campaign(config, fleet_group)
    return camp.run_dispatch(battery, stochastic=True)


def run_deterministic(config: CampaignConfig, fleet_group,
                      battery: BatterySpec,
                      campaign: Campaign = None) -> SimulationTrace:
    """Single-scenario baseline: dispatch against the point forecast."""
    camp = campaign if campaign is not None else Campaign(config, fleet_group)
    return camp.run_dispatch(battery, stochastic=False)


def run_no_battery(config: CampaignConfig, fleet_group,
                   campaign: Campaign = None) -> SimulationTrace:
    """Settle the raw contract-vs-demand gap; the basic cost reference."""
    camp = campaign if campaign is not None else Campaign(config, fleet_group)
    return camp.run_no_battery()


def battery_for_capacity(capacity_kwh: float, spec: BatterySpec = None) -> BatterySpec:
    """Battery of the given capacity at a 2E power rating."""
    ref = spec if spec is not None else BatterySpec(1.0, 2.0, 2.0)
    return BatterySpec(capacity_kwh, 2.0 * capacity_kwh, 2.0 * capacity_kwh,
                       ref.soc_min_frac, ref.soc_max_frac,
                       ref.eta_charge, ref.eta_discharge, 1)


def capacity_sweep(config: CampaignConfig, fleet_group, capacities,
                   campaign: Campaign = None) -> list:
    """Total cost as a percentage of the no-battery cost per capacity."""
    capacities = [float(c) for c in capacities]
    if any(b < a for a, b in zip(capacities, capacities[1:])):
        raise ValueError("capacities must be ascending")
    camp = campaign if campaign is not None else Campaign(config, fleet_group)
    basic = camp.run_no_battery().total_cost
    out = []
    for cap in capacities:
        if cap == 0.0:
            out.append((cap, 100.0))
            continue
        trace = camp.run_dispatch(battery_for_capacity(cap), stochastic=True)
        out.append((cap, 100.0 * trace.total_cost / basic))
    return out
