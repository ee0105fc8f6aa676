"""Randomized-trial generator for the no / weak / strong heterogeneity scenarios."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence, Union

import numpy as np
from scipy.special import expit

from .dataset import TrialDataset
from .errors import ConfigError

SeedLike = Union[int, np.random.SeedSequence]


@dataclass(frozen=True)
class ScenarioSpec:
    """Logistic data-generating model.

    Baseline log odds are ``beta0 + beta @ x``; treatment adds
    ``gamma0 + gamma1 * x1`` on the log-odds scale.
    """

    gamma0: float
    gamma1: float
    n: int = 2000
    delta: float = 0.03
    beta0: float = -0.6
    beta: tuple = (0.6, -0.2, 0.3)
    scenario_name: str = "custom"

    def __post_init__(self):
        if self.n < 2:
            raise ConfigError("n must be at least 2")
        if self.delta < 0:
            raise ConfigError("delta must be non-negative")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
        if len(self.beta) != 3:
            raise ConfigError("beta must have length 3")

    def with_n(self, n: int) -> "ScenarioSpec":
        return replace(self, n=n)

    def baseline_logit(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.beta0 + x @ np.asarray(self.beta)

    def logit_increment(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.gamma0 + self.gamma1 * x[..., 0]


NO_HTE = ScenarioSpec(gamma0=0.4, gamma1=0.0, scenario_name="no")
WEAK_HTE = ScenarioSpec(gamma0=-0.05, gamma1=0.3, scenario_name="weak")
STRONG_HTE = ScenarioSpec(gamma0=-0.05, gamma1=1.0, scenario_name="strong")
PRESETS = {"no": NO_HTE, "weak": WEAK_HTE, "strong": STRONG_HTE}


def preset(name: str, n: int | None = None) -> ScenarioSpec:
    """Look up a preset by short name; ``NoHTE``-style labels are accepted too."""
    key = name.lower().removesuffix("hte").rstrip("_-")
    try:
        spec = PRESETS[key]
    except KeyError:
        raise ConfigError(f"unknown scenario {name!r}; choose from {sorted(PRESETS)}") from None
    return spec if n is None else spec.with_n(n)


@dataclass(frozen=True, eq=False)
class GroundTruth:
    tau: np.ndarray
    z: np.ndarray


def true_cate(spec: ScenarioSpec, x) -> np.ndarray | float:
    """Risk-difference CATE; accepts one covariate vector or an (n, 3) matrix."""
    eta0 = spec.baseline_logit(x)
    out = expit(eta0 + spec.logit_increment(x)) - expit(eta0)
    return float(out) if np.ndim(out) == 0 else out


def benefit_label(spec: ScenarioSpec, x) -> np.ndarray | int:
    tau = true_cate(spec, x)
    z = np.asarray(tau) > spec.delta
    return int(z) if z.ndim == 0 else z.astype(np.int8)


def _rng(seed: SeedLike) -> np.random.Generator:
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(int(seed))
    return np.random.Generator(np.random.Philox(ss))


def sample_covariates(rng: np.random.Generator, n: int) -> np.ndarray:
    x = np.empty((n, 3))
    x[:, 0] = rng.standard_normal(n)
    x[:, 1] = rng.standard_normal(n)
    x[:, 2] = rng.random(n) < 0.5
    return x


def generate_trial(spec: ScenarioSpec, seed: SeedLike) -> tuple[TrialDataset, GroundTruth]:
    """Draw one 1:1 randomized trial; fully determined by ``seed``."""
    rng = _rng(seed)
    n = spec.n
    x = sample_covariates(rng, n)
    a = (rng.random(n) < 0.5).astype(np.int8)
    # both arms must be populated; at n >= 2 a redraw is astronomically rare
    while a.min() == a.max():
        a = (rng.random(n) < 0.5).astype(np.int8)
    eta0 = spec.baseline_logit(x)
    y = (rng.random(n) < expit(eta0 + a * spec.logit_increment(x))).astype(np.int8)
    tau = true_cate(spec, x)
    data = TrialDataset(x, a, y, ("x1", "x2", "x3"), known_propensity=0.5)
    return data, GroundTruth(tau=tau, z=(tau > spec.delta).astype(np.int8))


def monte_carlo_ate(spec: ScenarioSpec, draws: int = 1_000_000, seed: int = 0) -> float:
    """Integrate the true CATE over the covariate law by plain Monte Carlo."""
    rng = _rng(seed)
    total = 0.0
    done = 0
    chunk = 250_000
    while done < draws:
        m = min(chunk, draws - done)
        total += float(np.sum(true_cate(spec, sample_covariates(rng, m))))
        done += m
    return total / draws


def scenario_seed(master_seed: int, scenario_index: int, replicate: int) -> np.random.SeedSequence:
    """Replicate stream keyed by (master seed, scenario, replicate)."""
    return np.random.SeedSequence(int(master_seed), spawn_key=(int(scenario_index), int(replicate)))


def scenarios(names: Sequence[str], n: int | None = None) -> list[ScenarioSpec]:
    return [preset(name, n) for name in names]
