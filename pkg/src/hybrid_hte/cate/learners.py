"""Cross-fitted individualized-effect learners: causal forest and S/T/X meta-learners."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..dataset import FoldAssignment, TrialDataset
from ..errors import ConfigError, DomainError, InfeasibleError
from .forest import ForestSpec, HonestForest, tree_seeds
from .trees import RankMap
from .nuisance import (
    TAG_CAUSAL,
    TAG_S,
    TAG_T,
    TAG_X,
    NuisanceEstimates,
    _check_arms,
    _rank_inputs,
    fit_propensity,
)

CAUSAL_FOREST = "CausalForest"
KINDS = (CAUSAL_FOREST, "S", "T", "X")


@dataclass(eq=False)
class CateModel:
    kind: str
    oof_scores: np.ndarray
    spec: ForestSpec
    folds: FoldAssignment
    # fold id -> {component name: HonestForest}
    models: dict = field(default_factory=dict, repr=False)

    def summary(self) -> dict:
        return {
            "kind": self.kind,
            "n_trees": self.spec.n_trees,
            "min_leaf_per_arm": self.spec.min_leaf_per_arm,
            "mtry": self.spec.mtry,
            "subsample_fraction": self.spec.subsample_fraction,
            "honesty_fraction": self.spec.honesty_fraction,
            "seed": self.spec.seed,
            "folds": self.folds.K,
            "trees_per_fold": {
                str(k): {name: m.n_trees for name, m in comp.items()} for k, comp in self.models.items()
            },
        }


def fit_causal_forest(data: TrialDataset, folds: FoldAssignment, spec: ForestSpec = ForestSpec()) -> CateModel:
    """Honest causal forest, cross-fitted: fold k is scored by trees grown without it."""
    need = 2 * spec.min_leaf_per_arm
    for arm in (0, 1):
        if np.sum(data.treatment == arm) < need:
            raise InfeasibleError(
                f"arm {arm} has fewer than {need} subjects; lower min_leaf_per_arm"
            )
    _, xr = _rank_inputs(data)
    y = data.outcome.astype(float)
    w = data.treatment.astype(np.int64)
    scores = np.empty(data.n)
    models = {}
    for k, train, test in folds:
        _check_arms(data.treatment, train, k)
        forest = HonestForest(spec, causal=True).fit(xr, y, w, train, tree_seeds(spec, TAG_CAUSAL, k))
        scores[test] = forest.predict_ranked(xr, test)
        models[k] = {"causal": forest}
    return CateModel(CAUSAL_FOREST, scores, spec, folds, models)


def _regression(spec, xr, target, rows, key):
    zeros = np.zeros(xr.shape[0], dtype=np.int64)
    return HonestForest(spec, causal=False).fit(xr, target, zeros, rows, tree_seeds(spec, *key))


def combine_x(g0, g1, weight):
    """X-learner blend ``w * g0 + (1 - w) * g1``."""
    return weight * g0 + (1.0 - weight) * g1


def fit_meta_learner(
    data: TrialDataset,
    folds: FoldAssignment,
    kind: str,
    spec: ForestSpec = ForestSpec(),
    nuisance: Optional[NuisanceEstimates] = None,
) -> CateModel:
    """S-, T- or X-learner over honest regression forests, cross-fitted by fold.

    The X-learner imputes ``D1 = Y - mu0(X)`` for treated and
    ``D0 = mu1(X) - Y`` for controls (both target the effect), regresses
    each on X and blends with the propensity as ``e * g0 + (1 - e) * g1``.
    """
    if kind not in ("S", "T", "X"):
        raise DomainError(f"unknown meta-learner kind {kind!r}; choose S, T or X")
    y = data.outcome.astype(float)
    a = data.treatment
    scores = np.empty(data.n)
    models = {}
    if kind == "S":
        xa = np.column_stack([data.covariates, a])
        rank_map = RankMap(xa)
        xr = rank_map.transform(xa)
        x1 = xa.copy()
        x1[:, -1] = 1
        x0 = xa.copy()
        x0[:, -1] = 0
        xr1 = rank_map.transform(x1)
        xr0 = rank_map.transform(x0)
        for k, train, test in folds:
            _check_arms(a, train, k)
            m = _regression(spec, xr, y, train, (TAG_S, k))
            scores[test] = m.predict_ranked(xr1, test) - m.predict_ranked(xr0, test)
            models[k] = {"m": m}
        return CateModel("S", scores, spec, folds, models)

    _, xr = _rank_inputs(data)
    if kind == "X":
        e = nuisance.e_hat if nuisance is not None else None
        if e is None:
            raise ConfigError("the X-learner needs propensity estimates")
    for k, train, test in folds:
        _check_arms(a, train, k)
        t1 = train[a[train] == 1]
        t0 = train[a[train] == 0]
        m1 = _regression(spec, xr, y, t1, (TAG_T if kind == "T" else TAG_X, k, 1))
        m0 = _regression(spec, xr, y, t0, (TAG_T if kind == "T" else TAG_X, k, 0))
        if kind == "T":
            scores[test] = m1.predict_ranked(xr, test) - m0.predict_ranked(xr, test)
            models[k] = {"mu1": m1, "mu0": m0}
            continue
        target = np.zeros(data.n)
        target[t1] = y[t1] - m0.predict_ranked(xr, t1)
        target[t0] = m1.predict_ranked(xr, t0) - y[t0]
        g1 = _regression(spec, xr, target, t1, (TAG_X, k, 11))
        g0 = _regression(spec, xr, target, t0, (TAG_X, k, 10))
        scores[test] = combine_x(g0.predict_ranked(xr, test), g1.predict_ranked(xr, test), e[test])
        models[k] = {"mu1": m1, "mu0": m0, "g1": g1, "g0": g0}
    return CateModel(kind, scores, spec, folds, models)


def fit_learner(
    data: TrialDataset,
    folds: FoldAssignment,
    kind: str,
    spec: ForestSpec = ForestSpec(),
    nuisance: Optional[NuisanceEstimates] = None,
) -> CateModel:
    if kind == CAUSAL_FOREST:
        return fit_causal_forest(data, folds, spec)
    if kind == "X" and nuisance is None:
        nuisance = NuisanceEstimates(fit_propensity(data, folds), None, None, folds)
    return fit_meta_learner(data, folds, kind, spec, nuisance)
