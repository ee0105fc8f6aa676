"""Cross-fitted propensity and outcome models, and IPW / DR pseudo-outcomes."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from ..dataset import FoldAssignment, TrialDataset
from ..errors import ConfigError, PositivityError, SeparationError
from ..glm import fit_logistic
from .forest import ForestSpec, HonestForest, tree_seeds
from .trees import RankMap

log = logging.getLogger(__name__)

DEFAULT_CLIP = 0.01
RANDOMIZED = "randomized"
MODELED = "modeled"

# seed-key tags, so each model family draws from its own stream
TAG_OUTCOME = 1
TAG_CAUSAL = 2
TAG_S = 3
TAG_T = 4
TAG_X = 5


@dataclass(frozen=True, eq=False)
class NuisanceEstimates:
    e_hat: np.ndarray
    mu0_hat: np.ndarray
    mu1_hat: np.ndarray
    folds: FoldAssignment
    clip: float = DEFAULT_CLIP


@dataclass(frozen=True, eq=False)
class PseudoOutcomes:
    values: np.ndarray
    flavor: str  # "DR" or "IPW"


def _check_arms(a, train, k):
    arms = np.unique(a[train])
    if arms.size < 2:
        raise PositivityError(f"training set for fold {k} contains only arm {int(arms[0])}")


def fit_propensity(
    data: TrialDataset, folds: FoldAssignment, mode: str = RANDOMIZED, clip: float = DEFAULT_CLIP
) -> np.ndarray:
    """Out-of-fold P(A=1|X), clipped to ``[clip, 1 - clip]``.

    ``randomized`` uses the treated fraction of the training folds;
    ``modeled`` fits a main-effects logistic model on the training folds.
    """
    if not 0 < clip < 0.5:
        raise ConfigError("clip must lie in (0, 0.5)")
    if mode not in (RANDOMIZED, MODELED):
        raise ConfigError(f"unknown propensity mode {mode!r}")
    a = data.treatment.astype(float)
    e = np.empty(data.n)
    design = np.column_stack([np.ones(data.n), data.covariates])
    for k, train, test in folds:
        _check_arms(data.treatment, train, k)
        if mode == RANDOMIZED:
            e[test] = a[train].mean()
            continue
        try:
            beta = fit_logistic(design[train], a[train]).coefficients
        except SeparationError as exc:
            log.warning("propensity model for fold %d separates treatment (%s); clipping", k, exc.column)
            beta = exc.beta
        e[test] = expit(design[test] @ beta)
    clipped = np.clip(e, clip, 1.0 - clip)
    if np.any(clipped != e):
        log.warning("positivity: %d propensity score(s) clipped to [%g, %g]", int(np.sum(clipped != e)), clip, 1 - clip)
    return clipped


def _rank_inputs(data: TrialDataset):
    rank_map = RankMap(data.covariates)
    return rank_map, rank_map.transform(data.covariates)


def fit_outcomes(data: TrialDataset, folds: FoldAssignment, spec: ForestSpec) -> tuple[np.ndarray, np.ndarray]:
    """Out-of-fold mu_a(X) from per-arm honest regression forests."""
    _, xr = _rank_inputs(data)
    y = data.outcome.astype(float)
    a = data.treatment
    zeros = np.zeros(data.n, dtype=np.int64)
    mu = np.empty((2, data.n))
    for k, train, test in folds:
        _check_arms(a, train, k)
        for arm in (0, 1):
            rows = train[a[train] == arm]
            forest = HonestForest(spec, causal=False).fit(xr, y, zeros, rows, tree_seeds(spec, TAG_OUTCOME, k, arm))
            mu[arm, test] = forest.predict_ranked(xr, test)
    return mu[0], mu[1]


def estimate_nuisance(
    data: TrialDataset,
    folds: FoldAssignment,
    spec: ForestSpec,
    mode: str = RANDOMIZED,
    clip: float = DEFAULT_CLIP,
) -> NuisanceEstimates:
    e = fit_propensity(data, folds, mode, clip)
    mu0, mu1 = fit_outcomes(data, folds, spec)
    return NuisanceEstimates(e, mu0, mu1, folds, clip)


def pseudo_dr(data: TrialDataset, nuisance: NuisanceEstimates) -> PseudoOutcomes:
    """mu1 - mu0 + A (Y - mu1) / e - (1 - A) (Y - mu0) / (1 - e)."""
    a = data.treatment.astype(float)
    y = data.outcome.astype(float)
    e, m0, m1 = nuisance.e_hat, nuisance.mu0_hat, nuisance.mu1_hat
    values = m1 - m0 + a * (y - m1) / e - (1.0 - a) * (y - m0) / (1.0 - e)
    return PseudoOutcomes(values, "DR")


def pseudo_ipw(data: TrialDataset, nuisance: NuisanceEstimates) -> PseudoOutcomes:
    """A Y / e - (1 - A) Y / (1 - e)."""
    a = data.treatment.astype(float)
    y = data.outcome.astype(float)
    e = nuisance.e_hat
    return PseudoOutcomes(a * y / e - (1.0 - a) * y / (1.0 - e), "IPW")
