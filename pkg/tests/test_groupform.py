import numpy as np
import pytest
from scipy.special import gammaln
from scipy.stats import poisson

from gridbalance.core import DacVector
from gridbalance.groupform import (McmcParams, PosteriorSamples,
                                   SwitchpointModel, compute_alpha, delta_dac,
                                   expected_dac, form_groups, log_posterior,
                                   run_mcmc)
from conftest import grid_posterior_means


class TestAlpha:
    def test_direct_formula(self):
        assert compute_alpha([2.0, 4.0]) == pytest.approx(1.0 / 3.0)
        assert compute_alpha([5.0]) == pytest.approx(0.2)

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            compute_alpha([0.0, 0.0])


class TestLogPosterior:
    def test_hand_value(self):
        model = SwitchpointModel([1.0, 1.0])
        a = model.alpha
        expected = 2 * np.log(a) - 2 * a - 2.0
        assert log_posterior(1, 1.0, 1.0, model) == pytest.approx(expected)

    def test_nonpositive_rate_is_minus_inf(self):
        model = SwitchpointModel([1.0, 2.0])
        assert log_posterior(1, -0.5, 1.0, model) == -np.inf
        assert log_posterior(1, 1.0, 0.0, model) == -np.inf

    def test_tau_range_validated(self):
        model = SwitchpointModel([1.0, 2.0])
        with pytest.raises(ValueError):
            log_posterior(0, 1.0, 1.0, model)
        with pytest.raises(ValueError):
            log_posterior(3, 1.0, 1.0, model)

    def test_concave_in_log_rates(self):
        # numerical Hessian in (ln l1, ln l2) at random points
        rng = np.random.default_rng(4)
        model = SwitchpointModel(rng.uniform(1, 9, 12))
        h = 1e-4
        for _ in range(20):
            tau = int(rng.integers(1, 13))
            u = rng.uniform(-0.7, 2.0, 2)

            def f(v):
                return log_posterior(tau, np.exp(v[0]), np.exp(v[1]), model)

            hess = np.zeros((2, 2))
            for i in range(2):
                for j in range(2):
                    e_i = np.eye(2)[i] * h
                    e_j = np.eye(2)[j] * h
                    hess[i, j] = (f(u + e_i + e_j) - f(u + e_i - e_j)
                                  - f(u - e_i + e_j) + f(u - e_i - e_j)) / (4 * h * h)
            eig = np.linalg.eigvalsh(hess)
            assert np.all(eig <= 1e-6)

    def test_reduces_to_poisson_pmf_on_integers(self):
        obs = np.array([3.0, 1.0, 4.0, 2.0])
        model = SwitchpointModel(obs)
        tau, l1, l2 = 2, 2.5, 3.5
        got = log_posterior(tau, l1, l2, model)
        prior = 2 * np.log(model.alpha) - model.alpha * (l1 + l2)
        pmf = (poisson.logpmf(obs[:tau].astype(int), l1).sum()
               + poisson.logpmf(obs[tau:].astype(int), l2).sum())
        assert got == pytest.approx(prior + pmf, abs=1e-10)


class TestRunMcmc:
    def test_retained_count_arithmetic(self):
        model = SwitchpointModel([1.0, 2.0, 3.0])
        s = run_mcmc(model, iterations=4, burn_in_frac=0.25, seed=0)
        assert s.retained_count == 3

    def test_deterministic_for_seed(self):
        model = SwitchpointModel(np.arange(1.0, 13.0))
        a = run_mcmc(model, 2000, 0.25, seed=42)
        b = run_mcmc(model, 2000, 0.25, seed=42)
        assert np.array_equal(a.tau, b.tau)
        assert np.array_equal(a.lambda1, b.lambda1)
        assert np.array_equal(a.lambda2, b.lambda2)
        c = run_mcmc(model, 2000, 0.25, seed=43)
        assert not np.array_equal(a.lambda1, c.lambda1)

    def test_requires_two_observations(self):
        with pytest.raises(ValueError):
            run_mcmc(SwitchpointModel([4.0]), 100, 0.25, 0)

    def test_homogeneous_data_recovers_rate(self):
        model = SwitchpointModel(np.full(40, 10.0))
        s = run_mcmc(model, 80_000, 0.25, seed=7)
        assert s.lambda1.mean() == pytest.approx(10.0, abs=1.5)
        assert s.lambda2.mean() == pytest.approx(10.0, abs=1.5)

    def test_matches_grid_posterior(self):
        rng = np.random.default_rng(21)
        obs = np.concatenate([rng.poisson(4, 15), rng.poisson(11, 15)]).astype(float)
        model = SwitchpointModel(obs)
        s = run_mcmc(model, 80_000, 0.25, seed=3)
        oracle = grid_posterior_means(obs)
        assert s.lambda1.mean() == pytest.approx(oracle["lambda1_mean"], abs=1.5)
        assert s.lambda2.mean() == pytest.approx(oracle["lambda2_mean"], abs=1.5)

    def test_acceptance_ratio_matches_log_posterior(self):
        """Chain deltas equal full log-posterior differences (walk space).

        The rate moves walk in log space, so their acceptance uses the
        log-space density: log_posterior plus the change-of-variables
        term ln(l1) + ln(l2).
        """
        rng = np.random.default_rng(1)
        obs = rng.uniform(0.5, 8.0, 10)
        model = SwitchpointModel(obs)
        ksum = np.concatenate([[0.0], np.cumsum(obs)])
        total = ksum[-1]
        a = model.alpha

        def walk_density(tau, l1, l2):
            return log_posterior(tau, l1, l2, model) + np.log(l1) + np.log(l2)

        for _ in range(200):
            tau = int(rng.integers(1, 11))
            l1, l2 = rng.uniform(0.2, 12, 2)
            # rate move: the chain's O(1) delta for l1 -> l1'
            l1p = l1 * np.exp(rng.normal(0, 0.3))
            chain_delta = (-a * (l1p - l1) + ksum[tau] * (np.log(l1p) - np.log(l1))
                           - tau * (l1p - l1)) + (np.log(l1p) - np.log(l1))
            full_delta = walk_density(tau, l1p, l2) - walk_density(tau, l1, l2)
            assert chain_delta == pytest.approx(full_delta, abs=1e-9)
            # switchpoint move: plain log-posterior difference
            taup = int(rng.integers(1, 11))
            chain_delta = ((ksum[taup] - ksum[tau]) * (np.log(l1) - np.log(l2))
                           - (taup - tau) * (l1 - l2))
            full_delta = (log_posterior(taup, l1, l2, model)
                          - log_posterior(tau, l1, l2, model))
            assert chain_delta == pytest.approx(full_delta, abs=1e-9)


class TestExpectedDac:
    def _samples(self, rows):
        tau, l1, l2 = zip(*rows)
        return PosteriorSamples(np.array(tau), np.array(l1), np.array(l2),
                                no=max(tau) + 3)

    def test_forced_branches(self):
        s = self._samples([(5, 2.0, 8.0)] * 4)
        assert expected_dac(s, 3) == pytest.approx(2.0)
        assert expected_dac(s, 7) == pytest.approx(8.0)

    def test_mixed_draws(self):
        s = self._samples([(5, 2.0, 8.0), (2, 3.0, 9.0)])
        assert expected_dac(s, 3) == pytest.approx((2.0 + 9.0) / 2.0)

    def test_index_validation(self):
        s = self._samples([(2, 1.0, 2.0)])
        with pytest.raises(ValueError):
            expected_dac(s, 0)

    def test_monotone_in_customer_on_sorted_data(self):
        obs = np.sort(np.random.default_rng(2).uniform(1, 20, 30))
        s = run_mcmc(SwitchpointModel(obs), 20_000, 0.25, seed=5)
        edacs = [expected_dac(s, c) for c in range(1, 31)]
        assert all(b >= a - 1e-12 for a, b in zip(edacs, edacs[1:]))


class TestDeltaDac:
    def test_ratios(self):
        s = PosteriorSamples(np.array([2, 2]), np.array([4.0, 4.0]),
                             np.array([4.0, 4.0]), no=4)
        assert delta_dac(s, beta=1.0) == pytest.approx(1.0)
        s = PosteriorSamples(np.array([2, 2]), np.array([3.0, 3.0]),
                             np.array([9.0, 9.0]), no=4)
        assert delta_dac(s, beta=1.0) == pytest.approx(3.0)
        assert delta_dac(s, beta=0.5) == pytest.approx(1.5)


class TestFormGroups:
    def test_single_customer(self):
        groups = form_groups(DacVector((("a", 3.0),)), seed=0)
        assert len(groups) == 1
        assert groups.groups[0].start == 1 and groups.groups[0].end == 1
        assert groups.groups[0].expected_dac_kwh == pytest.approx(3.0)

    def test_planted_two_level_recovery(self):
        rng = np.random.default_rng(17)
        low = np.sort(rng.normal(5.0, 0.4, 20)).clip(min=0.1)
        high = np.sort(rng.normal(20.0, 1.2, 20)).clip(min=0.1)
        dac = DacVector(tuple((f"c{i}", v) for i, v in
                              enumerate(np.concatenate([low, high]))))
        groups = form_groups(dac, beta=1.0, threshold=2.0,
                             mcmc_params=McmcParams(30_000, 0.25), seed=3)
        assert len(groups) == 2
        split = groups.groups[0].end
        assert abs(split - 20) <= 2
        assert groups.groups[0].capacity_bound_kwh == pytest.approx(
            split * groups.groups[0].expected_dac_kwh)

    def test_uniform_data_single_group(self):
        rng = np.random.default_rng(23)
        dac = DacVector(tuple((f"c{i}", v) for i, v in
                              enumerate(np.sort(rng.normal(10, 0.5, 40)))))
        groups = form_groups(dac, beta=1.0, threshold=2.0,
                             mcmc_params=McmcParams(30_000, 0.25), seed=9)
        assert len(groups) == 1
        assert groups.groups[0].expected_dac_kwh == pytest.approx(10.0, abs=1.0)

    def test_partition_property_random(self):
        rng = np.random.default_rng(31)
        for trial in range(3):
            n = int(rng.integers(1, 40))
            dac = DacVector(tuple((f"c{i}", v) for i, v in
                                  enumerate(np.sort(rng.uniform(0, 30, n)))))
            groups = form_groups(dac, threshold=1.2,
                                 mcmc_params=McmcParams(4_000, 0.25),
                                 seed=trial)
            covered = []
            for g in groups:
                covered.extend(range(g.start, g.end + 1))
            assert covered == list(range(1, n + 1))

    def test_deterministic(self):
        rng = np.random.default_rng(41)
        dac = DacVector(tuple((f"c{i}", v) for i, v in
                              enumerate(np.sort(rng.uniform(1, 30, 25)))))
        a = form_groups(dac, mcmc_params=McmcParams(5_000, 0.25), seed=11)
        b = form_groups(dac, mcmc_params=McmcParams(5_000, 0.25), seed=11)
        assert [(g.start, g.end, g.expected_dac_kwh) for g in a] == \
            [(g.start, g.end, g.expected_dac_kwh) for g in b]

    def test_small_group_skips_mcmc(self):
        dac = DacVector((("a", 1.0), ("b", 2.0), ("c", 3.0)))
        groups = form_groups(dac, min_group_size=4, seed=0)
        assert len(groups) == 1
        assert groups.groups[0].expected_dac_kwh == pytest.approx(2.0)

    def test_json_shape(self):
        import json
        dac = DacVector((("a", 1.0), ("b", 2.0)))
        payload = json.loads(form_groups(dac, seed=0).to_json())
        assert payload[0].keys() == {"start", "end", "customer_ids",
                                     "expected_dac_kwh", "capacity_bound_kwh"}
