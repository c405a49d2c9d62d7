"""Shared fixtures and independent oracle implementations.

The oracles here deliberately avoid the code paths they check: posterior
moments come from dense grid quadrature, dispatch optima from exhaustive
grid search over the control, and statistics from direct formulas.
"""

import datetime as dt

import numpy as np
import pytest
from scipy.special import logsumexp

from gridbalance.core import BatterySpec, DemandSeries, ImbalanceTariff, imbalance_cost


@pytest.fixture
def paper_tariff():
    return ImbalanceTariff(50.0, (45.7, 15.0, 10.48, 0.0))


@pytest.fixture
def small_battery():
    # 100 kWh at 2E rating: 50 kWh movable per 30-minute period
    return BatterySpec(100.0, 200.0, 200.0)


def make_series(values, customer_id="c0", start=dt.datetime(2013, 1, 1),
                granularity=30):
    return DemandSeries(customer_id, start, values, granularity)


def grid_posterior_means(observations, alpha=None, n_lam=600, span=4.0):
    """Exact posterior moments of the switchpoint model by quadrature.

    Evaluates the joint density on a dense (tau, lambda) grid; the two
    rate parameters factorize given tau, so per-tau normalizers and
    conditional means combine into the marginal expectations.
    """
    obs = np.asarray(observations, dtype=float)
    no = obs.size
    a = alpha if alpha is not None else 1.0 / obs.mean()
    lam_max = obs.mean() * span + 10.0
    lam = np.linspace(lam_max / n_lam, lam_max, n_lam)
    log_lam = np.log(lam)
    ksum = np.concatenate([[0.0], np.cumsum(obs)])
    total = ksum[-1]
    taus = np.arange(1, no + 1)

    f1 = ksum[taus][:, None] * log_lam[None, :] - (taus[:, None] + a) * lam[None, :]
    f2 = ((total - ksum[taus])[:, None] * log_lam[None, :]
          - ((no - taus)[:, None] + a) * lam[None, :])
    log_z1 = logsumexp(f1, axis=1)
    log_z2 = logsumexp(f2, axis=1)
    w1 = np.exp(f1 - log_z1[:, None])
    w2 = np.exp(f2 - log_z2[:, None])
    e1_given_tau = w1 @ lam
    e2_given_tau = w2 @ lam
    log_ptau = log_z1 + log_z2
    ptau = np.exp(log_ptau - logsumexp(log_ptau))
    return {
        "lambda1_mean": float(ptau @ e1_given_tau),
        "lambda2_mean": float(ptau @ e2_given_tau),
        "tau_mode": int(taus[np.argmax(ptau)]),
        "tau_marginal": ptau,
    }


def dispatch_grid_search(sp, scen_demands, probs, battery, soc0, tariff,
                         c0, c1, step=0.5, granularity=30):
    """Exhaustive search over per-period dispatch on a regular grid.

    Walks every combination of grid dispatches (up to two periods)
    through the SOC dynamics and prices each scenario with the scalar
    tariff; independent of the optimizer's segment encoding.
    """
    battery = battery.aggregate()
    pce, pde = battery.energy_per_period(granularity)
    w = len(sp)
    if w > 2:
        raise ValueError("grid oracle supports one- and two-period windows")
    grid = np.arange(-pde, pce + 1e-12, step)
    if grid.size == 0 or grid[-1] < pce - 1e-12:
        grid = np.append(grid, pce)
    lo, hi = battery.soc_min_kwh, battery.soc_max_kwh
    gains = np.where(grid >= 0, battery.eta_charge * grid,
                     grid / battery.eta_discharge)

    stage = np.zeros((w, grid.size))
    for i in range(w):
        for g, p in enumerate(grid):
            cost = 0.0
            for s in range(len(probs)):
                im = sp[i] - scen_demands[s][i] - p
                cost += probs[s] * (c0 * abs(im)
                                    + c1 * imbalance_cost(im, tariff))
            stage[i, g] = cost

    soc1 = soc0 + gains
    feas1 = (soc1 >= lo - 1e-9) & (soc1 <= hi + 1e-9)
    if w == 1:
        return float(np.min(stage[0][feas1]))
    soc2 = soc1[:, None] + gains[None, :]
    feas2 = feas1[:, None] & (soc2 >= lo - 1e-9) & (soc2 <= hi + 1e-9)
    total = stage[0][:, None] + stage[1][None, :]
    return float(np.min(total[feas2]))
