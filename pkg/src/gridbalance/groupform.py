"""Balancing-group formation from demand-deviation statistics.

A two-rate switchpoint model is fitted to the ascending-sorted deviation
criterion of a customer range by Metropolis-Hastings sampling; the
posterior decides where to split the range, and a divide-and-conquer
recursion emits the final groups together with a posterior-derived
storage-capacity upper bound per group.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .core import DacVector


@dataclass(frozen=True)
class SwitchpointModel:
    """Observation window and hyper-parameter for one inference run."""

    observations: np.ndarray
    alpha: float = None  # type: ignore[assignment]

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float).copy()
        if obs.ndim != 1 or obs.size == 0:
            raise ValueError("observations must be a non-empty 1-D sequence")
        if np.any(obs < 0) or not np.all(np.isfinite(obs)):
            raise ValueError("observations must be finite and >= 0")
        obs.flags.writeable = False
        object.__setattr__(self, "observations", obs)
        if self.alpha is None:
            object.__setattr__(self, "alpha", compute_alpha(obs))
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")

    @property
    def no(self) -> int:
        return self.observations.size


@dataclass(frozen=True)
class PosteriorSamples:
    """Retained draws of (tau, lambda1, lambda2) after burn-in."""

    tau: np.ndarray
    lambda1: np.ndarray
    lambda2: np.ndarray
    no: int

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=np.int64)
        l1 = np.asarray(self.lambda1, dtype=float)
        l2 = np.asarray(self.lambda2, dtype=float)
        if not (tau.size == l1.size == l2.size >= 1):
            raise ValueError("tau/lambda draws must have equal, positive length")
        if tau.min() < 1 or tau.max() > self.no:
            raise ValueError("tau draws out of [1, NO]")
        if l1.min() <= 0 or l2.min() <= 0:
            raise ValueError("lambda draws must be positive")
        for name, arr in (("tau", tau), ("lambda1", l1), ("lambda2", l2)):
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)

    @property
    def retained_count(self) -> int:
        return self.tau.size

    def tau_mode(self) -> int:
        counts = np.bincount(self.tau, minlength=self.no + 1)
        return int(np.argmax(counts))  # ties resolve to the smaller index


def compute_alpha(observations) -> float:
    """Inverse of the mean observation; prior rate for both demand rates."""
    obs = np.asarray(observations, dtype=float)
    if obs.size == 0:
        raise ValueError("no observations")
    mean = float(np.mean(obs))
    if mean <= 0:
        raise ValueError("all observations are zero; rate prior undefined")
    return 1.0 / mean


def log_posterior(tau: int, l1: float, l2: float, model: SwitchpointModel) -> float:
    """Unnormalized log posterior of one state.

    Exponential(alpha) priors on both rates, a flat prior on the
    switchpoint, and a Poisson likelihood extended to continuous
    observations through ``lgamma(k + 1)``.
    """
    if l1 <= 0 or l2 <= 0:
        return -np.inf
    no = model.no
    if not 1 <= tau <= no:
        raise ValueError(f"tau must be in [1, {no}]")
    obs = model.observations
    a = model.alpha
    lp = 2.0 * np.log(a) - a * (l1 + l2)
    head, tail = obs[:tau], obs[tau:]
    lp += float(np.sum(head * np.log(l1) - l1 - gammaln(head + 1.0)))
    lp += float(np.sum(tail * np.log(l2) - l2 - gammaln(tail + 1.0)))
    return lp


def run_mcmc(model: SwitchpointModel, iterations: int = 80_000,
             burn_in_frac: float = 0.25, seed=0) -> PosteriorSamples:
    """Metropolis-Hastings over (tau, lambda1, lambda2).

    Each iteration updates lambda1 and lambda2 with a symmetric Gaussian
    random walk in log-space (acceptance carries the log-space change of
    variables) and tau with a symmetric integer random walk reflecting at
    the ends.  The first ``burn_in_frac`` of the chain is discarded.
    Fully deterministic for a given seed.
    """
    no = model.no
    if no < 2:
        raise ValueError("need at least 2 observations for inference")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    obs = model.observations
    alpha = model.alpha
    ksum = np.concatenate([[0.0], np.cumsum(obs)])  # ksum[t] = sum of first t
    total = ksum[no]

    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    lam_steps = rng.standard_normal((iterations, 2)) * 0.1
    tau_span = max(1, no // 20)
    tau_steps = rng.integers(1, tau_span + 1, size=iterations) * rng.choice(
        (-1, 1), size=iterations)
    log_u = np.log(rng.random((iterations, 3)))

    mean_obs = 1.0 / alpha
    l1 = l2 = mean_obs
    log_l1 = log_l2 = np.log(mean_obs)
    tau = max(1, no // 2)

    burn = int(burn_in_frac * iterations)
    keep = iterations - burn
    out_tau = np.empty(keep, dtype=np.int64)
    out_l1 = np.empty(keep)
    out_l2 = np.empty(keep)

    for it in range(iterations):
        # lambda1: log-space walk; Poisson terms for customers 1..tau
        new_log = log_l1 + lam_steps[it, 0]
        new_l = np.exp(new_log)
        delta = (-alpha * (new_l - l1)
                 + ksum[tau] * (new_log - log_l1) - tau * (new_l - l1))
        if log_u[it, 0] < delta + (new_log - log_l1):
            l1, log_l1 = new_l, new_log

        new_log = log_l2 + lam_steps[it, 1]
        new_l = np.exp(new_log)
        delta = (-alpha * (new_l - l2)
                 + (total - ksum[tau]) * (new_log - log_l2)
                 - (no - tau) * (new_l - l2))
        if log_u[it, 1] < delta + (new_log - log_l2):
            l2, log_l2 = new_l, new_log

        new_tau = tau + int(tau_steps[it])
        if new_tau < 1:
            new_tau = 2 - new_tau
        elif new_tau > no:
            new_tau = 2 * no - new_tau
        if new_tau != tau:
            dk = ksum[new_tau] - ksum[tau]
            dn = new_tau - tau
            delta = dk * (log_l1 - log_l2) - dn * (l1 - l2)
            if log_u[it, 2] < delta:
                tau = new_tau

        if it >= burn:
            out_tau[it - burn] = tau
            out_l1[it - burn] = l1
            out_l2[it - burn] = l2

    return PosteriorSamples(out_tau, out_l1, out_l2, no)


def expected_dac(samples: PosteriorSamples, c: int) -> float:
    """Posterior-expected deviation criterion at customer position ``c``.

    Draws whose switchpoint lies beyond ``c`` contribute their first-rate
    sample, all others the second rate; the mixture is averaged over the
    retained draws.
    """
    if not 1 <= c <= samples.no:
        raise ValueError(f"customer index {c} out of [1, {samples.no}]")
    use_l1 = samples.tau > c
    ns = samples.retained_count
    return float((samples.lambda1[use_l1].sum()
                  + samples.lambda2[~use_l1].sum()) / ns)


def delta_dac(samples: PosteriorSamples, beta: float = 1.0) -> float:
    """Relative change in expected deviation across the window ends."""
    edac_s = expected_dac(samples, 1)
    edac_e = expected_dac(samples, samples.no)
    if edac_s <= 0:
        raise ValueError("expected deviation at the window start is zero")
    return beta * edac_e / edac_s


@dataclass(frozen=True)
class GroupInfo:
    start: int                      # 1-based, inclusive
    end: int
    customer_ids: tuple
    expected_dac_kwh: float
    capacity_bound_kwh: float


@dataclass(frozen=True)
class GroupList:
    groups: tuple
    n_customers: int

    def __post_init__(self):
        prev_end = 0
        for g in self.groups:
            if g.start != prev_end + 1 or g.end < g.start:
                raise ValueError("groups must partition the customer range")
            prev_end = g.end
        if prev_end != self.n_customers:
            raise ValueError("groups do not cover all customers")

    def __iter__(self):
        return iter(self.groups)

    def __len__(self):
        return len(self.groups)

    def to_json(self) -> str:
        payload = [
            {
                "start": g.start,
                "end": g.end,
                "customer_ids": list(g.customer_ids),
                "expected_dac_kwh": g.expected_dac_kwh,
                "capacity_bound_kwh": g.capacity_bound_kwh,
            }
            for g in self.groups
        ]
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"


@dataclass(frozen=True)
class McmcParams:
    iterations: int = 80_000
    burn_in_frac: float = 0.25


def form_groups(dac: DacVector, beta: float = 1.0, threshold: float = 2.0,
                min_group_size: int = 4, mcmc_params: McmcParams = McmcParams(),
                seed=0, trace_hook=None) -> GroupList:
    """Divide-and-conquer group formation over an ascending DAC vector.

    Each range is fitted with :func:`run_mcmc`; when the relative change
    in expected deviation exceeds ``threshold`` the range splits at the
    posterior mode of the switchpoint and both halves recurse (left
    first).  Every node's chain seed derives from ``(seed, start, end)``,
    so sibling subtrees may run concurrently without changing the result.
    ``trace_hook(start, end, samples)`` is called per fitted range.
    """
    if min_group_size < 2:
        raise ValueError("min_group_size must be >= 2")
    dacs = dac.dacs
    ids = dac.customer_ids
    nc = len(dac)
    groups = []

    def emit(s, e, edac):
        size = e - s + 1
        groups.append(GroupInfo(s, e, tuple(ids[s - 1:e]), edac, size * edac))

    def recurse(s, e):
        size = e - s + 1
        obs = dacs[s - 1:e]
        if size < max(2, min_group_size):
            emit(s, e, float(np.mean(obs)))
            return
        model = SwitchpointModel(obs)
        node_seed = np.random.SeedSequence([int(seed), s, e]).generate_state(1)[0]
        samples = run_mcmc(model, mcmc_params.iterations,
                           mcmc_params.burn_in_frac, int(node_seed))
        if trace_hook is not None:
            trace_hook(s, e, samples)
        ac = samples.tau_mode()
        change = delta_dac(samples, beta)
        left, right = ac, size - ac
        if change > threshold and left >= min_group_size and right >= min_group_size:
            recurse(s, s + ac - 1)
            recurse(s + ac, e)
        else:
            edacs = [expected_dac(samples, c) for c in range(1, size + 1)]
            emit(s, e, float(np.mean(edacs)))

    if nc == 0:
        raise ValueError("empty DAC vector")
    recurse(1, nc)
    return GroupList(tuple(groups), nc)
