"""Stage-2 evaluation: uplift/AUQC, DR policy values, threshold choice and the NP harm rule.

Every quantity here is computed from cross-fitted inputs; nothing in this
module fits a model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.integrate import trapezoid
from scipy.stats import norm

from .cate.nuisance import NuisanceEstimates, PseudoOutcomes
from .dataset import TrialDataset
from .errors import AlignmentError, ConfigError, DegenerateError, DomainError

FEASIBLE = "feasible"
BEST_ATTAINABLE = "best-attainable"
NORMALIZED = "normalized"
CUMULATIVE = "cumulative"


@dataclass(eq=False)
class UpliftCurve:
    q_grid: np.ndarray
    u_normalized: np.ndarray
    u_cumulative: np.ndarray
    auqc_normalized: float
    auqc_cumulative: float


@dataclass(eq=False)
class PolicyValueCurve:
    thresholds: np.ndarray
    values: np.ndarray
    t_star: float
    v_star: float
    value_gain: float
    se: Optional[np.ndarray] = None
    treated_fraction: Optional[np.ndarray] = None

    @property
    def treat_all(self) -> float:
        return float(self.values[0])

    @property
    def treat_none(self) -> float:
        return float(self.values[-1])

    @property
    def interior(self) -> bool:
        return math.isfinite(self.t_star)


@dataclass(eq=False)
class NpFrontier:
    thresholds: np.ndarray
    harm_rate: np.ndarray
    harm_upper: np.ndarray
    benefit_capture: np.ndarray
    feasible: np.ndarray
    chosen_threshold: float
    status: str
    alpha_harm: float
    delta: float
    conf_level: float
    n_treated: np.ndarray = field(default=None)
    # benefit share among treated subjects (complement of harm_rate)
    benefit_among_treated: np.ndarray = field(default=None)
    chosen_index: int = -1

    @property
    def chosen(self) -> tuple[float, str]:
        return self.chosen_threshold, self.status


def _align(*arrays):
    n = {len(a) for a in arrays}
    if len(n) != 1:
        raise AlignmentError(f"per-subject inputs have different lengths {sorted(n)}")


def _pseudo_values(pseudo) -> np.ndarray:
    return np.asarray(pseudo.values if isinstance(pseudo, PseudoOutcomes) else pseudo, dtype=float)


def rank_order(scores) -> np.ndarray:
    """Indices sorted by score descending, ties by original index."""
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def uplift_curve(scores, pseudo, grid_points: int = 100) -> UpliftCurve:
    """Cumulative DR uplift of the top-q fraction, q = j / grid_points.

    Both areas use the trapezoid rule on the grid with (0, 0) prepended.
    """
    y = _pseudo_values(pseudo)
    scores = np.asarray(scores, dtype=float)
    _align(scores, y)
    if grid_points < 2:
        raise ConfigError("grid_points must be at least 2")
    n = y.size
    csum = np.concatenate([[0.0], np.cumsum(y[rank_order(scores)])])
    q = np.arange(1, grid_points + 1) / grid_points
    counts = np.floor(q * n + 1e-9).astype(np.int64)
    u_cum = csum[counts]
    u_norm = u_cum / n
    qq = np.concatenate([[0.0], q])
    return UpliftCurve(
        q_grid=q,
        u_normalized=u_norm,
        u_cumulative=u_cum,
        auqc_normalized=float(trapezoid(np.concatenate([[0.0], u_norm]), qq)),
        auqc_cumulative=float(trapezoid(np.concatenate([[0.0], u_cum]), qq)),
    )


def auqc(curve: UpliftCurve, convention: str = CUMULATIVE) -> float:
    if convention == NORMALIZED:
        return curve.auqc_normalized
    if convention == CUMULATIVE:
        return curve.auqc_cumulative
    raise DomainError(f"unknown AUQC convention {convention!r}")


def policy_terms(data: TrialDataset, nuisance: NuisanceEstimates, policy) -> np.ndarray:
    """Per-subject DR value contributions of a 0/1 policy."""
    pi = np.asarray(policy)
    _align(pi, data.treatment, nuisance.e_hat)
    a = data.treatment
    y = data.outcome.astype(float)
    e = nuisance.e_hat
    mu_pi = np.where(pi == 1, nuisance.mu1_hat, nuisance.mu0_hat)
    mu_a = np.where(a == 1, nuisance.mu1_hat, nuisance.mu0_hat)
    p_match = np.where(pi == 1, e, 1.0 - e)
    return mu_pi + (a == pi) * (y - mu_a) / p_match


def policy_value(data: TrialDataset, nuisance: NuisanceEstimates, policy) -> float:
    """Cross-fitted doubly robust value of deploying ``policy``."""
    return float(np.mean(policy_terms(data, nuisance, policy)))


def threshold_grid(scores, n_quantiles: int = 19) -> np.ndarray:
    """Unique empirical quantiles at j/(n_quantiles+1), bracketed by -inf and +inf."""
    if n_quantiles < 1:
        raise ConfigError("n_quantiles must be at least 1")
    levels = np.arange(1, n_quantiles + 1) / (n_quantiles + 1)
    qs = np.unique(np.quantile(np.asarray(scores, dtype=float), levels))
    return np.concatenate([[-np.inf], qs, [np.inf]])


def treat_mask(scores, t: float) -> np.ndarray:
    return (np.asarray(scores) > t).astype(np.int8)


def select_threshold(curve_or_thresholds, values=None) -> tuple[float, float, float]:
    """Maximise value; ties go to the larger threshold (treat fewer).

    Accepts a :class:`PolicyValueCurve` or ``(thresholds, values)``.
    """
    if values is None:
        thresholds, values = curve_or_thresholds.thresholds, curve_or_thresholds.values
    else:
        thresholds = curve_or_thresholds
    thresholds = np.asarray(thresholds, dtype=float)
    values = np.asarray(values, dtype=float)
    if thresholds.size < 2:
        raise ConfigError("need at least two thresholds")
    best = int(np.flatnonzero(values == values.max())[-1])
    v_star = float(values[best])
    base = [values[i] for i in range(thresholds.size) if np.isinf(thresholds[i])]
    gain = v_star - max(base) if base else float("nan")
    return float(thresholds[best]), v_star, float(gain)


def value_curve(
    data: TrialDataset,
    nuisance: NuisanceEstimates,
    scores,
    thresholds=None,
    n_quantiles: int = 19,
    bootstrap_B: int = 0,
    seed: int = 0,
) -> PolicyValueCurve:
    scores = np.asarray(scores, dtype=float)
    _align(scores, data.treatment)
    thresholds = threshold_grid(scores, n_quantiles) if thresholds is None else np.asarray(thresholds, float)
    terms = np.stack([policy_terms(data, nuisance, treat_mask(scores, t)) for t in thresholds])
    values = terms.mean(axis=1)
    t_star, v_star, gain = select_threshold(thresholds, values)
    se = None
    if bootstrap_B:
        se, _ = bootstrap_se(lambda idx: terms[:, idx].mean(axis=1), data.n, bootstrap_B, seed)
    frac = np.array([np.mean(scores > t) for t in thresholds])
    return PolicyValueCurve(thresholds, values, t_star, v_star, gain, se, frac)


def wilson_upper(successes: int, trials: int, conf: float = 0.95) -> float:
    """One-sided Wilson score upper confidence bound for a binomial proportion."""
    if trials < 1 or not 0 <= successes <= trials:
        raise DomainError(f"need 0 <= successes <= trials and trials >= 1, got {successes}/{trials}")
    if not 0 < conf < 1:
        raise DomainError("conf must lie in (0, 1)")
    if successes == trials:
        return 1.0
    z = float(norm.ppf(conf))
    n = float(trials)
    p = successes / n
    z2 = z * z
    upper = (p + z2 / (2 * n) + z * math.sqrt(p * (1 - p) / n + z2 / (4 * n * n))) / (1 + z2 / n)
    return min(1.0, upper)


def _pick_last_extreme(values, mask, maximize):
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        return -1
    v = values[idx]
    target = v.max() if maximize else v.min()
    return int(idx[np.flatnonzero(v == target)[-1]])


def np_frontier(
    scores,
    pseudo,
    thresholds,
    delta: float = 0.0,
    alpha_harm: float = 0.10,
    conf: float = 0.95,
    capture_floor: float = 0.05,
) -> NpFrontier:
    """Harm-constrained threshold choice on DR surrogates.

    Treated at threshold t means score > t. Surrogate harm is a treated
    subject with pseudo-outcome <= delta; benefit capture is the share of
    all subjects with pseudo-outcome > delta that are treated. A threshold
    is feasible when the one-sided Wilson upper bound of the harm rate is at
    most ``alpha_harm``; thresholds treating nobody are never feasible.
    Without a feasible threshold, the least harmful threshold reaching
    ``capture_floor`` is returned as best-attainable.
    """
    y = _pseudo_values(pseudo)
    scores = np.asarray(scores, dtype=float)
    _align(scores, y)
    if not 0 < alpha_harm < 1:
        raise ConfigError("alpha_harm must lie in (0, 1)")
    thresholds = np.asarray(thresholds, dtype=float)
    benefit = y > delta
    n_benefit = int(benefit.sum())
    if n_benefit == 0:
        raise DegenerateError(f"no subject has a pseudo-outcome above delta={delta}; capture is undefined")
    m = thresholds.size
    harm_rate = np.full(m, np.nan)
    harm_upper = np.full(m, np.nan)
    capture = np.zeros(m)
    among = np.full(m, np.nan)
    n_treated = np.zeros(m, dtype=np.int64)
    for j, t in enumerate(thresholds):
        treated = scores > t
        nt = int(treated.sum())
        n_treated[j] = nt
        hits = int(np.sum(treated & benefit))
        capture[j] = hits / n_benefit
        if nt:
            harms = nt - hits
            harm_rate[j] = harms / nt
            harm_upper[j] = wilson_upper(harms, nt, conf)
            among[j] = hits / nt
    feasible = (n_treated > 0) & (np.nan_to_num(harm_upper, nan=2.0) <= alpha_harm)
    k = _pick_last_extreme(capture, feasible, maximize=True)
    status = FEASIBLE
    if k < 0:
        status = BEST_ATTAINABLE
        eligible = (n_treated > 0) & (capture >= capture_floor)
        if not eligible.any():
            eligible = n_treated > 0
        k = _pick_last_extreme(np.nan_to_num(harm_rate, nan=2.0), eligible, maximize=False)
    return NpFrontier(
        thresholds=thresholds,
        harm_rate=harm_rate,
        harm_upper=harm_upper,
        benefit_capture=capture,
        feasible=feasible,
        chosen_threshold=float(thresholds[k]),
        status=status,
        alpha_harm=alpha_harm,
        delta=delta,
        conf_level=conf,
        n_treated=n_treated,
        benefit_among_treated=among,
        chosen_index=k,
    )


def bootstrap_se(statistic: Callable[[np.ndarray], object], n: int, B: int = 1000, seed: int = 0):
    """Subject-level nonparametric bootstrap with fitted models held fixed.

    ``statistic`` maps a resampled index vector to a scalar or array.
    Returns ``(se, (lo, hi))`` with 2.5% / 97.5% percentile limits.
    """
    if B < 100:
        raise ConfigError("bootstrap needs B >= 100 replicates")
    rng = np.random.default_rng(seed)
    draws = np.array([np.asarray(statistic(rng.integers(0, n, n)), dtype=float) for _ in range(B)])
    se = draws.std(axis=0, ddof=1)
    lo, hi = np.percentile(draws, [2.5, 97.5], axis=0)
    if se.ndim == 0:
        return float(se), (float(lo), float(hi))
    return se, (lo, hi)
