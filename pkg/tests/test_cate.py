import logging
import os
import subprocess
import sys

import numpy as np
import pytest

from hybrid_hte.cate import (
    MODELED,
    ForestSpec,
    NuisanceEstimates,
    estimate_nuisance,
    fit_causal_forest,
    fit_learner,
    fit_meta_learner,
    fit_outcomes,
    fit_propensity,
    pseudo_dr,
    pseudo_ipw,
)
from hybrid_hte.cate.learners import combine_x
from hybrid_hte.cate.trees import RankMap
from hybrid_hte.dataset import FoldAssignment, TrialDataset, make_folds
from hybrid_hte.errors import ConfigError, DomainError, InfeasibleError, PositivityError
from hybrid_hte.simgen import NO_HTE, STRONG_HTE, ScenarioSpec, generate_trial, monte_carlo_ate
from hybrid_hte.simgen import scenario_seed

from conftest import make_dataset


def nuisance_of(data, folds, e, mu0, mu1):
    n = data.n
    return NuisanceEstimates(np.full(n, e) if np.isscalar(e) else e, np.broadcast_to(mu0, n), np.broadcast_to(mu1, n), folds)


class TestRankMap:
    def test_dense_ranks_and_midpoints(self):
        rm = RankMap(np.array([[3.0], [1.0], [3.0], [7.0]]))
        out = rm.transform(np.array([[1.0], [3.0], [7.0], [2.0], [0.0], [9.0]]))
        np.testing.assert_array_equal(out[:, 0], [0, 1, 2, 0.5, -0.5, 2.5])


class TestPropensity:
    def test_balanced_randomized_is_half(self):
        d = make_dataset(n=40)
        f = make_folds(d, 5, 0)
        np.testing.assert_array_equal(fit_propensity(d, f), 0.5)

    def test_randomized_uses_training_folds_only(self):
        d = make_dataset(n=41)
        f = make_folds(d, 4, 2)
        e = fit_propensity(d, f)
        for k, train, test in f:
            np.testing.assert_array_equal(e[test], d.treatment[train].mean())

    def test_simulated_near_half(self, strong_trial):
        data, _ = strong_trial
        e = fit_propensity(data, make_folds(data, 5, 1))
        assert np.max(np.abs(e - 0.5)) <= 0.05

    def test_modeled_perfect_predictor_is_clipped(self, caplog):
        n = 60
        a = np.arange(n) % 2
        x = np.column_stack([a + 0.01 * np.arange(n), np.random.default_rng(0).normal(size=n)])
        d = TrialDataset(x, a, np.arange(n) // 2 % 2)
        with caplog.at_level(logging.WARNING):
            e = fit_propensity(d, make_folds(d, 3, 0), MODELED, clip=0.01)
        assert e.min() == 0.01 and e.max() == 0.99
        assert np.all(e[a == 1] > 0.5) and np.all(e[a == 0] < 0.5)
        assert "positivity" in caplog.text

    def test_modeled_close_to_randomized_on_trial(self, null_trial):
        data, _ = null_trial
        e = fit_propensity(data, make_folds(data, 5, 0), MODELED)
        assert np.mean(np.abs(e - 0.5)) < 0.03

    def test_clip_validated(self):
        d = make_dataset()
        with pytest.raises(ConfigError):
            fit_propensity(d, make_folds(d, 2, 0), clip=0.5)

    def test_single_arm_training_set(self):
        a = np.array([1, 1, 1, 0, 0, 0])
        d = TrialDataset(np.arange(6.0).reshape(-1, 1), a, np.zeros(6))
        folds = FoldAssignment(np.array([1, 1, 1, 2, 2, 2]), 2, 0)
        with pytest.raises(PositivityError):
            fit_propensity(d, folds)


class TestOutcomes:
    def test_constant_outcome(self, small_forest):
        d = make_dataset(n=80).with_outcome(np.ones(80))
        mu0, mu1 = fit_outcomes(d, make_folds(d, 5, 0), small_forest)
        np.testing.assert_array_equal(mu0, 1.0)
        np.testing.assert_array_equal(mu1, 1.0)

    def test_null_scenario_accuracy(self):
        data, _ = generate_trial(NO_HTE.with_n(8000), 17)
        mu0, mu1 = fit_outcomes(data, make_folds(data, 5, 0), ForestSpec(n_trees=200, seed=1))
        eta = NO_HTE.baseline_logit(data.covariates)
        p0 = 1 / (1 + np.exp(-eta))
        p1 = 1 / (1 + np.exp(-(eta + 0.4)))
        assert np.mean((mu0 - p0) ** 2) <= 0.01
        assert np.mean((mu1 - p1) ** 2) <= 0.01
        assert mu0.min() >= 0 and mu1.max() <= 1

    def test_deterministic(self, strong_trial, small_forest):
        data, _ = strong_trial
        f = make_folds(data, 5, 0)
        a = fit_outcomes(data, f, small_forest)
        b = fit_outcomes(data, f, small_forest)
        assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


class TestPseudoOutcomes:
    def test_zero_models_examples(self):
        d = TrialDataset(np.zeros((4, 1)), [1, 0, 1, 0], [1, 1, 0, 0])
        nz = nuisance_of(d, None, 0.5, 0.0, 0.0)
        np.testing.assert_array_equal(pseudo_dr(d, nz).values, [2, -2, 0, 0])
        np.testing.assert_array_equal(pseudo_ipw(d, nz).values, [2, -2, 0, 0])
        assert pseudo_dr(d, nz).flavor == "DR" and pseudo_ipw(d, nz).flavor == "IPW"

    def test_perfect_outcome_models(self):
        rng = np.random.default_rng(0)
        a = np.arange(30) % 2
        y = rng.integers(0, 2, 30)
        mu1 = np.where(a == 1, y, rng.random(30))
        mu0 = np.where(a == 0, y, rng.random(30))
        d = TrialDataset(np.zeros((30, 1)), a, y)
        e = rng.uniform(0.2, 0.8, 30)
        vals = pseudo_dr(d, NuisanceEstimates(e, mu0, mu1, None)).values
        np.testing.assert_allclose(vals, mu1 - mu0, atol=1e-12)

    def test_ipw_is_dr_without_outcome_models(self):
        d = make_dataset(n=50, seed=3)
        e = np.random.default_rng(1).uniform(0.1, 0.9, 50)
        nz = NuisanceEstimates(e, np.zeros(50), np.zeros(50), None)
        np.testing.assert_allclose(pseudo_dr(d, nz).values, pseudo_ipw(d, nz).values, atol=1e-12)

    def test_ipw_mean_is_horvitz_thompson(self):
        d = make_dataset(n=50, seed=4)
        e = np.random.default_rng(2).uniform(0.1, 0.9, 50)
        a, y = d.treatment, d.outcome
        ht = np.sum(a * y / e) / 50 - np.sum((1 - a) * y / (1 - e)) / 50
        assert pseudo_ipw(d, NuisanceEstimates(e, None, None, None)).values.mean() == pytest.approx(ht, abs=1e-12)

    def test_dr_and_ipw_agree_with_true_models(self):
        spec = STRONG_HTE.with_n(20000)
        data, _ = generate_trial(spec, 8)
        eta = spec.baseline_logit(data.covariates)
        m0 = 1 / (1 + np.exp(-eta))
        m1 = 1 / (1 + np.exp(-(eta + spec.logit_increment(data.covariates))))
        nz = NuisanceEstimates(np.full(data.n, 0.5), m0, m1, None)
        gap = pseudo_dr(data, nz).values.mean() - pseudo_ipw(data, nz).values.mean()
        assert abs(gap) < 0.02

    def test_strong_mean_near_monte_carlo_ate(self, strong_trial, small_forest):
        data, _ = strong_trial
        nz = estimate_nuisance(data, make_folds(data, 5, 0), small_forest)
        v = pseudo_dr(data, nz).values
        se = v.std(ddof=1) / np.sqrt(v.size)
        assert abs(v.mean() - monte_carlo_ate(STRONG_HTE, 1_000_000)) <= 2 * se


class TestCausalForest:
    def test_pure_treatment_shift(self, small_forest):
        d = make_dataset(n=200)
        d = d.with_outcome(d.treatment)
        m = fit_causal_forest(d, make_folds(d, 5, 0), small_forest)
        np.testing.assert_array_equal(m.oof_scores, 1.0)

    def test_null_mean_near_zero(self):
        spec = ScenarioSpec(gamma0=0.0, gamma1=0.0, beta=(0.0, 0.0, 0.0))
        means = []
        for r in range(3):
            data, _ = generate_trial(spec, scenario_seed(5, 0, r))
            m = fit_causal_forest(data, make_folds(data, 5, r), ForestSpec(n_trees=200, seed=r))
            means.append(m.oof_scores.mean())
        assert np.all(np.abs(means) <= 0.05)

    def test_strong_correlation(self, strong_trial):
        data, truth = strong_trial
        m = fit_causal_forest(data, make_folds(data, 5, 0), ForestSpec(n_trees=300, seed=2))
        assert np.corrcoef(m.oof_scores, truth.tau)[0, 1] > 0.5
        assert np.all(np.abs(m.oof_scores) <= 1)

    def test_deterministic(self, strong_trial, small_forest):
        data, _ = strong_trial
        f = make_folds(data, 5, 0)
        a = fit_causal_forest(data, f, small_forest).oof_scores
        b = fit_causal_forest(data, f, small_forest).oof_scores
        assert a.tobytes() == b.tobytes()

    def test_seed_matters(self, strong_trial, small_forest):
        data, _ = strong_trial
        f = make_folds(data, 5, 0)
        a = fit_causal_forest(data, f, small_forest).oof_scores
        b = fit_causal_forest(data, f, small_forest.with_seed(99)).oof_scores
        assert a.tobytes() != b.tobytes()

    def test_monotone_recoding_invariance(self, strong_trial, small_forest):
        data, _ = strong_trial
        x = data.covariates.copy()
        x[:, 0] = np.exp(x[:, 0])
        x[:, 1] = x[:, 1] ** 3 - 10
        recoded = TrialDataset(x, data.treatment, data.outcome, data.covariate_names, data.column_kinds)
        f = make_folds(data, 5, 0)
        a = fit_causal_forest(data, f, small_forest).oof_scores
        b = fit_causal_forest(recoded, f, small_forest).oof_scores
        np.testing.assert_array_equal(a, b)

    def test_leaf_constraint_infeasible(self):
        d = make_dataset(n=16)
        with pytest.raises(InfeasibleError, match="min_leaf_per_arm"):
            fit_causal_forest(d, make_folds(d, 2, 0), ForestSpec(n_trees=5, min_leaf_per_arm=5))

    def test_summary(self, small_forest):
        d = make_dataset(n=100)
        m = fit_causal_forest(d, make_folds(d, 5, 0), small_forest)
        s = m.summary()
        assert s["kind"] == "CausalForest" and s["folds"] == 5
        assert s["trees_per_fold"]["3"] == {"causal": 100}


class TestMetaLearners:
    def test_t_learner_null(self):
        spec = ScenarioSpec(gamma0=0.0, gamma1=0.0)
        data, _ = generate_trial(spec, 21)
        m = fit_meta_learner(data, make_folds(data, 5, 0), "T", ForestSpec(n_trees=200, seed=1))
        assert abs(m.oof_scores.mean()) <= 0.05

    def test_t_learner_strong(self, strong_trial):
        data, truth = strong_trial
        m = fit_meta_learner(data, make_folds(data, 5, 0), "T", ForestSpec(n_trees=200, seed=1))
        assert np.corrcoef(m.oof_scores, truth.tau)[0, 1] > 0.4

    @pytest.mark.parametrize("kind", ["S", "X"])
    def test_other_learners_track_effect(self, strong_trial, kind):
        data, truth = strong_trial
        m = fit_learner(data, make_folds(data, 5, 0), kind, ForestSpec(n_trees=150, seed=1))
        assert m.kind == kind
        assert np.all(np.isfinite(m.oof_scores)) and np.all(np.abs(m.oof_scores) <= 1)
        assert np.corrcoef(m.oof_scores, truth.tau)[0, 1] > 0.2

    def test_x_blend_identity(self):
        g = np.linspace(-0.3, 0.4, 9)
        for w in (np.zeros(9), np.ones(9), np.linspace(0.01, 0.99, 9)):
            np.testing.assert_allclose(combine_x(g, g, w), g, atol=1e-15)
        assert combine_x(np.array([1.0]), np.array([0.0]), np.array([0.25]))[0] == 0.25

    def test_unknown_kind(self, null_trial):
        data, _ = null_trial
        with pytest.raises(DomainError):
            fit_meta_learner(data, make_folds(data, 5, 0), "R")

    def test_x_requires_propensity(self, null_trial):
        data, _ = null_trial
        with pytest.raises(ConfigError):
            fit_meta_learner(data, make_folds(data, 5, 0), "X", ForestSpec(n_trees=5))


def test_cross_fitting_leakage(strong_trial, small_forest):
    """Scrambling fold-k outcomes leaves fold-k predictions alone and moves the rest."""
    data, _ = strong_trial
    folds = make_folds(data, 5, 0)
    k = 2
    in_k = folds.fold_id == k
    y = data.outcome.copy()
    y[in_k] = np.random.default_rng(0).permutation(y[in_k]) ^ 1
    scrambled = data.with_outcome(y)
    base_nz = estimate_nuisance(data, folds, small_forest)
    new_nz = estimate_nuisance(scrambled, folds, small_forest)
    base_cf = fit_causal_forest(data, folds, small_forest).oof_scores
    new_cf = fit_causal_forest(scrambled, folds, small_forest).oof_scores
    for base, new in ((base_nz.mu0_hat, new_nz.mu0_hat), (base_nz.mu1_hat, new_nz.mu1_hat), (base_cf, new_cf)):
        np.testing.assert_array_equal(base[in_k], new[in_k])
        for j in range(1, 6):
            if j != k:
                assert not np.array_equal(base[folds.fold_id == j], new[folds.fold_id == j])


THREAD_PROBE = """
import hashlib, sys
import numba
from hybrid_hte.cate import ForestSpec, fit_causal_forest
from hybrid_hte.dataset import make_folds
from hybrid_hte.simgen import STRONG_HTE, generate_trial
data, _ = generate_trial(STRONG_HTE.with_n(600), 1)
m = fit_causal_forest(data, make_folds(data, 5, 0), ForestSpec(n_trees=64, seed=3))
print(numba.get_num_threads(), hashlib.sha256(m.oof_scores.tobytes()).hexdigest())
"""


def test_thread_count_invariance():
    digests = set()
    for threads in ("1", "3"):
        env = dict(os.environ, NUMBA_NUM_THREADS=threads)
        out = subprocess.run([sys.executable, "-c", THREAD_PROBE], env=env, capture_output=True, text=True, check=True)
        n_threads, digest = out.stdout.split()
        assert n_threads == threads
        digests.add(digest)
    assert len(digests) == 1
