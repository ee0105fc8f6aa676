"""Cross-fitted nuisance models, pseudo-outcomes and CATE learners."""

from .forest import ForestSpec, HonestForest
from .learners import CAUSAL_FOREST, KINDS, CateModel, fit_causal_forest, fit_learner, fit_meta_learner
from .nuisance import (
    MODELED,
    RANDOMIZED,
    NuisanceEstimates,
    PseudoOutcomes,
    estimate_nuisance,
    fit_outcomes,
    fit_propensity,
    pseudo_dr,
    pseudo_ipw,
)

__all__ = [
    "CAUSAL_FOREST",
    "KINDS",
    "MODELED",
    "RANDOMIZED",
    "CateModel",
    "ForestSpec",
    "HonestForest",
    "NuisanceEstimates",
    "PseudoOutcomes",
    "estimate_nuisance",
    "fit_causal_forest",
    "fit_learner",
    "fit_meta_learner",
    "fit_outcomes",
    "fit_propensity",
    "pseudo_dr",
    "pseudo_ipw",
]
