"""Population-level heterogeneity inference and the gate into policy learning.

Two confirmatory routes feed the gate: an omnibus likelihood-ratio test of
all treatment-by-covariate interactions, and Wald tests of prespecified
interactions with Holm adjustment. STEPP curves with permutation bands are
exploratory only and never drive the gate.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .dataset import CONTINUOUS, TrialDataset
from .errors import ConfigError, DegenerateError, DomainError, HteError, SchemaError
from .glm import GlmFit, chisq_sf, fit_logistic, normal_sf

log = logging.getLogger(__name__)

REASON_OMNIBUS = "omnibus_lrt"
REASON_INTERACTION = "prespecified_interaction"
MIN_STEPP_WINDOW = 20


@dataclass(frozen=True)
class LrtResult:
    stat: float
    df: int
    p: float


@dataclass(frozen=True)
class InteractionTest:
    name: str
    estimate: float
    wald_z: float
    raw_p: float
    holm_p: float = float("nan")


@dataclass
class Stage1Report:
    lrt_stat: float
    lrt_df: int
    lrt_p: float
    interactions: list
    alpha: float
    proceed: bool
    reasons: list
    alpha_interactions: Optional[float] = None
    # criterion (ii) needs a confirmatory existence-of-benefit test, which is not implemented
    criterion_ii: str = "not evaluated"
    stepp: Optional["SteppCurve"] = None

    @property
    def lrt(self) -> LrtResult:
        return LrtResult(self.lrt_stat, self.lrt_df, self.lrt_p)


@dataclass(eq=False)
class SteppCurve:
    window_centers: np.ndarray
    risk_diff: np.ndarray
    counts: np.ndarray  # (n_windows, 2): treated, control
    window_size: int
    step: int
    biomarker: str
    starts: np.ndarray
    n_dropped: int = 0
    band_low: Optional[np.ndarray] = None
    band_high: Optional[np.ndarray] = None
    overall_risk_diff: float = 0.0
    order: np.ndarray = field(default=None, repr=False)

    @property
    def n_windows(self) -> int:
        return len(self.risk_diff)


# ---------------------------------------------------------------------------
# design matrices


def _check_not_constant(data: TrialDataset, names):
    for name in names:
        col = data.column(name)
        if np.all(col == col[0]):
            raise DegenerateError(f"covariate {name!r} is constant and carries no information")


def main_effects_design(data: TrialDataset):
    x = np.column_stack([np.ones(data.n), data.treatment, data.covariates])
    return x, ("(intercept)", "A") + data.covariate_names


def interaction_design(data: TrialDataset, terms: Optional[Sequence[str]] = None):
    """Main effects plus ``A x Xj`` for each covariate in ``terms`` (default all)."""
    terms = data.covariate_names if terms is None else tuple(terms)
    base, names = main_effects_design(data)
    a = data.treatment.astype(float)
    inter = np.column_stack([a * data.column(t) for t in terms]) if terms else np.empty((data.n, 0))
    return np.column_stack([base, inter]), names + tuple(f"A:{t}" for t in terms)


def _fit(design, y, names, label):
    try:
        return fit_logistic(design, y, names)
    except HteError as exc:
        exc.args = (f"{label} model: {exc.args[0]}",) + exc.args[1:]
        raise


def fit_interaction_model(data: TrialDataset) -> GlmFit:
    _check_not_constant(data, data.covariate_names)
    x, names = interaction_design(data)
    return _fit(x, data.outcome, names, "full interaction")


def lrt_omnibus(data: TrialDataset, full: Optional[GlmFit] = None) -> LrtResult:
    """Omnibus LRT of all A x Xj interactions against the main-effects model."""
    if data.p == 0:
        return LrtResult(0.0, 0, 1.0)
    _check_not_constant(data, data.covariate_names)
    xr, nr = main_effects_design(data)
    reduced = _fit(xr, data.outcome, nr, "reduced (main effects)")
    full = full if full is not None else fit_interaction_model(data)
    stat = 2.0 * (full.log_likelihood - reduced.log_likelihood)
    if -1e-6 < stat < 0.0:
        stat = 0.0
    return LrtResult(float(stat), data.p, chisq_sf(stat, data.p))


def wald_interactions(
    data: TrialDataset, prespecified: Sequence[str], full: Optional[GlmFit] = None
) -> list[InteractionTest]:
    """Wald z-tests for prespecified interactions, all read off one joint fit."""
    for name in prespecified:
        if name not in data.covariate_names:
            raise SchemaError(f"unknown covariate {name!r} in prespecified interactions")
    _check_not_constant(data, prespecified)
    full = full if full is not None else fit_interaction_model(data)
    out = []
    for name in prespecified:
        j = full.index(f"A:{name}")
        est = float(full.coefficients[j])
        z = est / float(np.sqrt(full.covariance[j, j]))
        out.append(InteractionTest(name, est, z, float(2.0 * normal_sf(abs(z)))))
    return out


# ---------------------------------------------------------------------------
# multiplicity


def _check_pvalues(raw) -> np.ndarray:
    p = np.asarray(raw, dtype=float)
    if p.ndim != 1:
        raise DomainError("p-values must be a 1-d vector")
    if p.size and not (np.all(p >= 0) and np.all(p <= 1)):
        raise DomainError("p-values must lie in [0, 1]")
    return p


def adjust_holm(raw) -> np.ndarray:
    p = _check_pvalues(raw)
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    stepped = np.maximum.accumulate(p[order] * (m - np.arange(m)))
    out = np.empty(m)
    out[order] = np.minimum(stepped, 1.0)
    return out


def adjust_bh(raw) -> np.ndarray:
    p = _check_pvalues(raw)
    m = p.size
    if m == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    stepped = np.minimum.accumulate(scaled[::-1])[::-1]
    out = np.empty(m)
    out[order] = np.minimum(stepped, 1.0)
    return out


def with_holm(tests: Sequence[InteractionTest]) -> list[InteractionTest]:
    adj = adjust_holm([t.raw_p for t in tests])
    return [InteractionTest(t.name, t.estimate, t.wald_z, t.raw_p, float(h)) for t, h in zip(tests, adj)]


# ---------------------------------------------------------------------------
# gate


def gate_decision(lrt, interactions, alpha: float = 0.05, alpha_interactions: Optional[float] = None):
    """Proceed when the omnibus LRT or any Holm-adjusted interaction is significant.

    ``lrt`` may be an :class:`LrtResult` or a ``(stat, df, p)`` tuple.
    ``alpha_interactions`` splits the error budget; by default both routes
    share ``alpha``.
    """
    if not 0 < alpha < 1:
        raise ConfigError("alpha must lie in (0, 1)")
    a_int = alpha if alpha_interactions is None else alpha_interactions
    lrt_p = lrt.p if isinstance(lrt, LrtResult) else lrt[2]
    reasons = []
    if lrt_p < alpha:
        reasons.append(REASON_OMNIBUS)
    for t in interactions:
        holm = t.holm_p if isinstance(t, InteractionTest) else t[-1]
        name = t.name if isinstance(t, InteractionTest) else t[0]
        if holm < a_int:
            reasons.append(f"{REASON_INTERACTION}:{name}")
    return bool(reasons), reasons


def run_stage1(
    data: TrialDataset,
    prespecified: Optional[Sequence[str]] = None,
    alpha: float = 0.05,
    alpha_interactions: Optional[float] = None,
) -> Stage1Report:
    """Fit the full interaction model once and evaluate both gate criteria."""
    prespecified = data.covariate_names if prespecified is None else tuple(prespecified)
    full = fit_interaction_model(data) if data.p else None
    lrt = lrt_omnibus(data, full)
    tests = with_holm(wald_interactions(data, prespecified, full)) if prespecified else []
    proceed, reasons = gate_decision(lrt, tests, alpha, alpha_interactions)
    return Stage1Report(lrt.stat, lrt.df, lrt.p, tests, alpha, proceed, reasons, alpha_interactions)


# ---------------------------------------------------------------------------
# STEPP


def default_window(n: int) -> tuple[int, int]:
    w = max(50, n // 10)
    return w, max(1, w // 2)


def _window_starts(n: int, w: int, s: int) -> np.ndarray:
    starts = list(range(0, n - w + 1, s))
    if starts[-1] + w < n:
        starts.append(n - w)
    return np.asarray(starts, dtype=np.int64)


def _window_rd(a_sorted, y_sorted, starts, w):
    """Risk differences for every window; rows of ``a_sorted`` may be permutations."""
    a = np.atleast_2d(a_sorted).astype(float)
    y = np.asarray(y_sorted, dtype=float)
    zero = np.zeros((a.shape[0], 1))
    c_a = np.concatenate([zero, np.cumsum(a, axis=1)], axis=1)
    c_ay = np.concatenate([zero, np.cumsum(a * y, axis=1)], axis=1)
    c_y = np.concatenate([[0.0], np.cumsum(y)])
    n1 = c_a[:, starts + w] - c_a[:, starts]
    s1 = c_ay[:, starts + w] - c_ay[:, starts]
    sy = c_y[starts + w] - c_y[starts]
    n0 = w - n1
    s0 = sy - s1
    with np.errstate(invalid="ignore", divide="ignore"):
        rd = s1 / n1 - s0 / n0
    return rd, n1, n0


def stepp_curve(
    data: TrialDataset, biomarker: str, window_size: Optional[int] = None, step: Optional[int] = None
) -> SteppCurve:
    """Windowed treated-minus-control risk difference along a continuous biomarker.

    Subjects are sorted by the biomarker (ties by original index). Windows
    are index ranges of ``window_size`` shifted by ``step``; a final window
    flush with the largest values is appended when the regular grid stops
    short, so every subject is covered.
    """
    if data.kind(biomarker) != CONTINUOUS:
        raise DomainError(f"STEPP biomarker {biomarker!r} must be continuous")
    dw, ds = default_window(data.n)
    w = dw if window_size is None else int(window_size)
    s = (max(1, w // 2) if window_size is not None else ds) if step is None else int(step)
    if w < MIN_STEPP_WINDOW:
        raise ConfigError(f"window_size {w} is below the minimum of {MIN_STEPP_WINDOW}")
    if w > data.n:
        raise ConfigError(f"window_size {w} exceeds n={data.n}")
    if s < 1:
        raise ConfigError("step must be >= 1")
    marker = data.column(biomarker)
    order = np.argsort(marker, kind="stable")
    starts = _window_starts(data.n, w, s)
    a_sorted = data.treatment[order]
    y_sorted = data.outcome[order]
    rd, n1, n0 = _window_rd(a_sorted, y_sorted, starts, w)
    rd, n1, n0 = rd[0], n1[0], n0[0]
    ok = (n1 > 0) & (n0 > 0)
    dropped = int(np.sum(~ok))
    if dropped:
        log.warning("STEPP: dropped %d window(s) lacking one arm", dropped)
    starts = starts[ok]
    sorted_marker = marker[order]
    centers = np.array([np.median(sorted_marker[b : b + w]) for b in starts])
    a = data.treatment.astype(float)
    overall = float(data.outcome[a == 1].mean() - data.outcome[a == 0].mean())
    return SteppCurve(
        window_centers=centers,
        risk_diff=rd[ok],
        counts=np.column_stack([n1[ok], n0[ok]]).astype(np.int64),
        window_size=w,
        step=s,
        biomarker=biomarker,
        starts=starts,
        n_dropped=dropped,
        overall_risk_diff=overall,
        order=order,
    )


def stepp_band(
    data: TrialDataset, curve: SteppCurve, n_perm: int = 1000, level: float = 0.05, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise permutation band for the constant-effect null.

    Treatment labels are permuted (covariates and outcomes fixed) and the
    window risk differences recomputed. The band is the pointwise
    ``(level/2, 1 - level/2)`` quantile range of the permuted curves,
    shifted by the overall risk difference so it describes a constant
    effect rather than no effect. Sets ``curve.band_low/high`` as well.
    """
    if n_perm < 200:
        raise ConfigError("n_perm must be at least 200")
    if not 0 < level < 1:
        raise ConfigError("level must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    a_sorted = data.treatment[curve.order]
    y_sorted = data.outcome[curve.order]
    perms = rng.permuted(np.tile(a_sorted, (n_perm, 1)), axis=1)
    rd, _, _ = _window_rd(perms, y_sorted, curve.starts, curve.window_size)
    lo = np.nanquantile(rd, level / 2, axis=0) + curve.overall_risk_diff
    hi = np.nanquantile(rd, 1 - level / 2, axis=0) + curve.overall_risk_diff
    curve.band_low, curve.band_high = lo, hi
    return lo, hi
