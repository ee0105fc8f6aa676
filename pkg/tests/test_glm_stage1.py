import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hybrid_hte.dataset import TrialDataset
from hybrid_hte.errors import (
    ConfigError,
    ConvergenceError,
    DegenerateError,
    DomainError,
    SchemaError,
    SeparationError,
    SingularDesignError,
)
from hybrid_hte.glm import chisq_sf, fit_logistic
from hybrid_hte.simgen import NO_HTE, generate_trial, scenario_seed
from hybrid_hte.stage1 import (
    InteractionTest,
    LrtResult,
    adjust_bh,
    adjust_holm,
    gate_decision,
    interaction_design,
    lrt_omnibus,
    run_stage1,
    stepp_band,
    stepp_curve,
    wald_interactions,
)

# ---------------------------------------------------------------------------
# logistic fits


def newton_oracle(x, y, iters=60):
    """Plain Newton-Raphson on the Bernoulli log-likelihood, no safeguards."""
    b = np.zeros(x.shape[1])
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(x @ b)))
        grad = x.T @ (y - p)
        hess = (x * (p * (1 - p))[:, None]).T @ x
        b = b + np.linalg.solve(hess, grad)
    return b


TWENTY = np.array(
    [
        [0.2, 1.1, 0], [-1.3, 0.4, 1], [0.8, -0.7, 0], [1.5, 0.2, 1], [-0.4, -1.2, 0],
        [0.0, 0.9, 1], [2.1, -0.3, 1], [-0.9, 1.4, 0], [0.6, 0.5, 0], [-1.7, -0.8, 1],
        [1.2, 1.7, 0], [-0.2, -0.1, 1], [0.4, -1.5, 1], [-1.1, 0.3, 0], [0.9, 0.8, 1],
        [-0.6, -0.4, 0], [1.8, -1.0, 0], [-2.0, 1.2, 1], [0.3, 0.0, 1], [-0.5, 2.0, 0],
    ]
)
TWENTY_Y = np.array([1, 0, 1, 1, 0, 1, 1, 0, 0, 0, 1, 0, 1, 0, 1, 1, 0, 0, 1, 0], dtype=float)


def test_twenty_subject_fit_matches_newton_oracle():
    x = np.column_stack([np.ones(20), TWENTY])
    fit = fit_logistic(x, TWENTY_Y)
    np.testing.assert_allclose(fit.coefficients, newton_oracle(x, TWENTY_Y), atol=1e-6)
    assert fit.converged
    assert np.max(np.abs(fit.score)) <= 1e-6
    np.testing.assert_array_equal(fit.covariance, fit.covariance.T)
    assert np.all(np.linalg.eigvalsh(fit.covariance) > 0)


def test_intercept_only_is_logit_of_mean():
    y = np.array([1, 0, 0, 0] * 5, float)
    fit = fit_logistic(np.ones((20, 1)), y)
    assert fit.coefficients[0] == pytest.approx(math.log(0.25 / 0.75), abs=1e-8)
    assert fit.covariance[0, 0] == pytest.approx(1 / (20 * 0.25 * 0.75), rel=1e-8)


def test_separation_names_column():
    x1 = np.linspace(-1, 1, 20)
    design = np.column_stack([np.ones(20), x1])
    with pytest.raises(SeparationError) as err:
        fit_logistic(design, (x1 > 0).astype(float), names=("(intercept)", "dose"))
    assert err.value.column == "dose"


def test_rank_deficient_design():
    x = np.random.default_rng(0).normal(size=(30, 2))
    design = np.column_stack([np.ones(30), x, x[:, 0] * 2])
    with pytest.raises(SingularDesignError):
        fit_logistic(design, np.arange(30) % 2)


def test_iteration_cap_attaches_fit():
    x = np.column_stack([np.ones(20), TWENTY])
    with pytest.raises(ConvergenceError) as err:
        fit_logistic(x, TWENTY_Y, max_iter=1)
    assert err.value.fit is not None and not err.value.fit.converged


def test_non_binary_response():
    with pytest.raises(DomainError):
        fit_logistic(np.ones((3, 1)), [0, 1, 2])


# ---------------------------------------------------------------------------
# chi-square tail


def test_chisq_reference_values():
    assert round(chisq_sf(37.2, 16), 3) == 0.002
    assert chisq_sf(3.841, 1) == pytest.approx(0.05, abs=1e-4)
    for k in (1, 7, 200):
        assert chisq_sf(0.0, k) == 1.0


@pytest.mark.parametrize("df", [1, 2, 3, 16, 51, 200])
def test_chisq_matches_high_precision_oracle(df):
    mpmath.mp.dps = 40
    for x in (1e-6, 0.3, 5.0, 37.2, 150.0, 400.0, 1000.0):
        exact = float(mpmath.gammainc(df / 2, x / 2, mpmath.inf, regularized=True))
        assert abs(chisq_sf(x, df) - exact) <= 1e-10


def test_chisq_domain():
    with pytest.raises(DomainError):
        chisq_sf(1.0, 0)
    with pytest.raises(DomainError):
        chisq_sf(1.0, 2.5)
    with pytest.raises(DomainError):
        chisq_sf(-1.0, 3)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 200), st.floats(0, 500), st.floats(1e-3, 50))
def test_chisq_decreasing(df, x, dx):
    assert chisq_sf(x + dx, df) <= chisq_sf(x, df)


def test_chisq_strictly_decreasing_on_grid():
    xs = np.linspace(0, 60, 200)
    vals = [chisq_sf(v, 16) for v in xs]
    assert np.all(np.diff(vals) < 0)


# ---------------------------------------------------------------------------
# multiplicity


def test_holm_examples():
    np.testing.assert_allclose(adjust_holm([0.01, 0.04, 0.03]), [0.03, 0.06, 0.06], atol=1e-15)
    np.testing.assert_allclose(adjust_holm([0.2]), [0.2])
    np.testing.assert_allclose(adjust_holm([0.02, 0.02]), [0.04, 0.04], atol=1e-15)
    np.testing.assert_allclose(adjust_holm([0.5, 0.6, 0.9]), [1.0, 1.0, 1.0])


def test_bh_examples():
    np.testing.assert_allclose(adjust_bh([0.01, 0.02, 0.03]), [0.03, 0.03, 0.03], atol=1e-15)
    np.testing.assert_allclose(adjust_bh([1, 1, 1]), [1, 1, 1])
    np.testing.assert_allclose(adjust_bh([0.005, 0.2]), [0.01, 0.2], atol=1e-15)


def test_adjust_domain():
    with pytest.raises(DomainError):
        adjust_holm([0.1, 1.2])
    with pytest.raises(DomainError):
        adjust_bh([-0.1])


pvals = st.lists(st.floats(0, 1), min_size=1, max_size=25)


@settings(max_examples=200, deadline=None)
@given(pvals)
def test_holm_properties(p):
    p = np.asarray(p)
    h = adjust_holm(p)
    assert np.all(h >= p) and np.all(h <= 1)
    order = np.argsort(p, kind="stable")
    assert np.all(np.diff(h[order]) >= 0)


@settings(max_examples=200, deadline=None)
@given(pvals)
def test_bh_properties(p):
    p = np.asarray(p)
    b = adjust_bh(p)
    assert np.all(b >= p - 1e-15)
    assert np.all(b <= np.minimum(p * p.size, 1) + 1e-15)
    assert np.all(adjust_holm(p) >= b - 1e-15)


# ---------------------------------------------------------------------------
# LRT, Wald, gate


def test_lrt_no_covariates():
    d = TrialDataset(np.empty((4, 0)), [0, 1, 0, 1], [0, 1, 1, 0])
    assert lrt_omnibus(d) == LrtResult(0.0, 0, 1.0)


def test_lrt_strong_replicate_rejects(strong_trial):
    data, _ = strong_trial
    res = lrt_omnibus(data)
    assert res.df == 3 and res.p < 0.05


def test_lrt_matches_direct_likelihoods(null_trial):
    data, _ = null_trial
    res = lrt_omnibus(data)
    x_red = np.column_stack([np.ones(data.n), data.treatment, data.covariates])
    x_full, _ = interaction_design(data)
    b_red = newton_oracle(x_red, data.outcome.astype(float), 30)
    b_full = newton_oracle(x_full, data.outcome.astype(float), 30)

    def ll(x, b):
        eta = x @ b
        return float(np.sum(data.outcome * eta - np.log1p(np.exp(eta))))

    assert res.stat == pytest.approx(2 * (ll(x_full, b_full) - ll(x_red, b_red)), abs=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_lrt_nonnegative(seed):
    data, _ = generate_trial(NO_HTE.with_n(120), seed)
    assert lrt_omnibus(data).stat >= -1e-6


def test_wald_from_joint_fit(strong_trial):
    data, _ = strong_trial
    x, names = interaction_design(data)
    full = fit_logistic(x, data.outcome, names)
    tests = wald_interactions(data, ["x1", "x3"])
    j = names.index("A:x1")
    assert tests[0].estimate == pytest.approx(full.coefficients[j], abs=1e-10)
    assert tests[0].wald_z == pytest.approx(full.coefficients[j] / math.sqrt(full.covariance[j, j]), abs=1e-8)
    assert tests[0].raw_p == pytest.approx(math.erfc(abs(tests[0].wald_z) / math.sqrt(2)), abs=1e-12)


def test_wald_errors(strong_trial):
    data, _ = strong_trial
    with pytest.raises(SchemaError):
        wald_interactions(data, ["x9"])
    x = np.column_stack([data.covariates, np.zeros(data.n)])
    dz = TrialDataset(x, data.treatment, data.outcome, ("x1", "x2", "x3", "zero"))
    with pytest.raises(DegenerateError):
        wald_interactions(dz, ["zero"])


def test_gate_examples():
    assert gate_decision((37.2, 16, 0.002), [], 0.05) == (True, ["omnibus_lrt"])
    stop = gate_decision((1.0, 2, 0.5), [InteractionTest("k", 0.1, 0.6, 0.5, 0.5)], 0.05)
    assert stop == (False, [])
    go = gate_decision((3.0, 2, 0.2), [InteractionTest("karnof", 0.3, 2.6, 0.0075, 0.015)], 0.05)
    assert go == (True, ["prespecified_interaction:karnof"])
    with pytest.raises(ConfigError):
        gate_decision((0, 1, 0.5), [], 1.0)


def test_gate_alpha_split():
    t = [InteractionTest("k", 0.3, 2.6, 0.01, 0.02)]
    assert gate_decision((0, 1, 0.5), t, 0.05, alpha_interactions=0.01)[0] is False
    assert gate_decision((0, 1, 0.5), t, 0.05)[0] is True


def test_report_invariant(strong_trial):
    data, _ = strong_trial
    rep = run_stage1(data)
    assert rep.proceed == (rep.lrt_p < rep.alpha or min(t.holm_p for t in rep.interactions) < rep.alpha)
    assert bool(rep.reasons) == rep.proceed
    assert rep.criterion_ii == "not evaluated"


def test_null_calibration_over_seeds():
    proceed, rejections, total = 0, 0, 0
    for r in range(200):
        data, _ = generate_trial(NO_HTE, scenario_seed(0, 0, r))
        rep = run_stage1(data)
        proceed += rep.proceed
        rejections += sum(t.raw_p < 0.05 for t in rep.interactions)
        total += len(rep.interactions)
    assert 0.03 <= proceed / 200 <= 0.15
    assert 0.025 <= rejections / total <= 0.08


# ---------------------------------------------------------------------------
# STEPP


def stepp_data(n=100, seed=0, y=None):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(n, 1))
    a = np.arange(n) % 2
    y = rng.integers(0, 2, n) if y is None else y
    return TrialDataset(x, a, y, ("m",))


def test_window_count():
    c = stepp_curve(stepp_data(), "m", 20, 10)
    assert c.n_windows == 9
    assert c.counts.sum(axis=1).tolist() == [20] * 9


def test_windows_cover_everyone():
    c = stepp_curve(stepp_data(n=137), "m", 30, 17)
    covered = np.zeros(137, bool)
    for b in c.starts:
        covered[b : b + 30] = True
    assert covered.all()


def test_constant_outcome():
    d = stepp_data(y=np.ones(100))
    c = stepp_curve(d, "m", 20, 10)
    np.testing.assert_array_equal(c.risk_diff, 0.0)
    lo, hi = stepp_band(d, c, 200, 0.05, 1)
    np.testing.assert_array_equal(hi - lo, 0.0)


def test_window_risk_difference_by_hand():
    d = stepp_data(n=60, seed=4)
    c = stepp_curve(d, "m", 20, 20)
    order = np.argsort(d.covariates[:, 0], kind="stable")
    for i, b in enumerate(c.starts):
        idx = order[b : b + 20]
        a, y = d.treatment[idx], d.outcome[idx]
        assert c.risk_diff[i] == pytest.approx(y[a == 1].mean() - y[a == 0].mean(), abs=1e-15)
        assert c.window_centers[i] == np.median(d.covariates[idx, 0])


def test_stepp_refusals():
    d = stepp_data()
    with pytest.raises(ConfigError):
        stepp_curve(d, "m", 19, 5)
    with pytest.raises(ConfigError):
        stepp_band(d, stepp_curve(d, "m", 20, 10), 199)
    b = TrialDataset(np.arange(100.0).reshape(-1, 1) % 2, np.arange(100) % 2, np.zeros(100), ("flag",))
    with pytest.raises(DomainError):
        stepp_curve(b, "flag")


def test_drops_windows_lacking_an_arm():
    x = np.arange(60.0).reshape(-1, 1)
    a = np.r_[np.zeros(25), np.arange(35) % 2]
    d = TrialDataset(x, a, np.arange(60) % 2, ("m",))
    c = stepp_curve(d, "m", 20, 10)
    assert c.n_dropped == 1
    assert np.all(c.counts.min(axis=1) > 0)


def test_band_deterministic(strong_trial):
    data, _ = strong_trial
    c1 = stepp_curve(data, "x1")
    c2 = stepp_curve(data, "x1")
    np.testing.assert_array_equal(stepp_band(data, c1, 300, seed=5)[0], stepp_band(data, c2, 300, seed=5)[0])


def test_strong_effect_pattern(strong_trial):
    data, _ = strong_trial
    c = stepp_curve(data, "x1")
    stepp_band(data, c, 500, seed=0)
    assert c.risk_diff[0] < 0 < c.risk_diff[-1]
    outside = (c.risk_diff < c.band_low) | (c.risk_diff > c.band_high)
    assert outside.any()


def test_null_curve_stays_inside_band():
    inside = []
    for r in range(20):
        data, _ = generate_trial(NO_HTE, scenario_seed(3, 0, r))
        c = stepp_curve(data, "x1")
        stepp_band(data, c, 200, seed=r)
        inside.append(np.mean((c.risk_diff >= c.band_low) & (c.risk_diff <= c.band_high)))
    assert np.mean(inside) >= 0.90
