"""Honest random forests for conditional means and treatment contrasts."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ..errors import ConfigError
from .trees import RankMap, grow_forest, predict_forest


@dataclass(frozen=True)
class ForestSpec:
    n_trees: int = 500
    min_leaf_per_arm: int = 5
    mtry: Optional[int] = None  # None -> ceil(sqrt(p))
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1 or self.min_leaf_per_arm < 1:
            raise ConfigError("n_trees and min_leaf_per_arm must be positive")
        if self.mtry is not None and self.mtry < 1:
            raise ConfigError("mtry must be positive")
        for name in ("subsample_fraction", "honesty_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")

    def resolved_mtry(self, p: int) -> int:
        m = self.mtry if self.mtry is not None else math.ceil(math.sqrt(p))
        return max(1, min(m, p))

    def with_seed(self, seed: int) -> "ForestSpec":
        return replace(self, seed=seed)


def tree_seeds(spec: ForestSpec, *key: int) -> np.ndarray:
    """Per-tree 32-bit seeds derived from the forest seed and a purpose key."""
    ss = np.random.SeedSequence(int(spec.seed), spawn_key=tuple(int(k) for k in key))
    return ss.generate_state(spec.n_trees, dtype=np.uint32).astype(np.int64)


class HonestForest:
    """A fitted forest over rank-transformed covariates.

    ``causal=True`` fits difference-in-means leaves using ``w`` as the
    treatment indicator; otherwise leaves hold honest means of ``y``.
    """

    def __init__(self, spec: ForestSpec, causal: bool):
        self.spec = spec
        self.causal = causal
        self.nodes = None
        self.rank_map: Optional[RankMap] = None

    def fit(self, xr: np.ndarray, y, w, rows, seeds, rank_map: Optional[RankMap] = None) -> "HonestForest":
        rows = np.ascontiguousarray(rows, dtype=np.int64)
        sub_n = max(2, int(math.floor(self.spec.subsample_fraction * rows.size)))
        sub_n = min(sub_n, rows.size)
        grow_n = max(1, int(math.floor(self.spec.honesty_fraction * sub_n)))
        if self.spec.honesty_fraction < 1:
            grow_n = min(grow_n, sub_n - 1)
        self.nodes = grow_forest(
            xr,
            np.ascontiguousarray(y, dtype=np.float64),
            np.ascontiguousarray(w, dtype=np.int64),
            rows,
            np.ascontiguousarray(seeds, dtype=np.int64),
            sub_n,
            grow_n,
            self.spec.resolved_mtry(xr.shape[1]),
            self.spec.min_leaf_per_arm,
            self.causal,
        )
        self.rank_map = rank_map
        return self

    def predict_ranked(self, xr: np.ndarray, rows=None) -> np.ndarray:
        rows = np.arange(xr.shape[0]) if rows is None else rows
        return predict_forest(xr, np.ascontiguousarray(rows, dtype=np.int64), *self.nodes)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Predict for raw covariates (requires the fitting rank map)."""
        if self.rank_map is None:
            raise ConfigError("forest was fitted without a rank map")
        return self.predict_ranked(self.rank_map.transform(x))

    @property
    def n_trees(self) -> int:
        return 0 if self.nodes is None else self.nodes[0].shape[0]
