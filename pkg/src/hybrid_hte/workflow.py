"""Stage 1 -> gate -> Stage 2 orchestration, replicate studies and report output."""

from __future__ import annotations

import csv
import json
import logging
import math
import multiprocessing
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cate import CAUSAL_FOREST, KINDS, RANDOMIZED, ForestSpec, estimate_nuisance, fit_learner, pseudo_dr
from .cate.learners import CateModel
from .cate.nuisance import NuisanceEstimates, PseudoOutcomes
from .dataset import (
    ACTG_DEFAULT_COVARIATES,
    FoldAssignment,
    TrialDataset,
    load_raw_table,
    make_folds,
    preprocess_actg175,
)
from .errors import ConfigError, HteError
from .policy import (
    BEST_ATTAINABLE,
    NpFrontier,
    PolicyValueCurve,
    UpliftCurve,
    np_frontier,
    uplift_curve,
    value_curve,
)
from .simgen import ScenarioSpec, generate_trial, scenario_seed
from .stage1 import Stage1Report, SteppCurve, run_stage1, stepp_band, stepp_curve

log = logging.getLogger(__name__)

# incremented each time Stage 2 starts; lets tests verify conditional execution
STAGE2_RUNS = {"count": 0}

ACTG_PRESPECIFIED = ("karnof", "cd40")
ACTG_STEPP_BIOMARKER = "cd40"

_SEED_FOLDS = 1
_SEED_FOREST = 2
_SEED_BOOT = 3
_SEED_STEPP = 4


@dataclass(frozen=True)
class WorkflowConfig:
    alpha: float = 0.05
    alpha_interactions: Optional[float] = None
    delta: float = 0.03
    alpha_harm: float = 0.10
    K: int = 5
    learner: str = CAUSAL_FOREST
    forest: ForestSpec = field(default_factory=ForestSpec)
    n_quantiles: int = 19
    prespecified_interactions: Optional[tuple] = None  # None -> every covariate
    bootstrap_B: int = 0
    master_seed: int = 0
    capture_floor: float = 0.05
    wilson_conf: float = 0.95
    propensity_mode: str = RANDOMIZED
    clip: float = 0.01
    uplift_grid: int = 100
    stepp_biomarker: Optional[str] = None
    stepp_window: Optional[int] = None
    stepp_step: Optional[int] = None
    stepp_permutations: int = 0

    def __post_init__(self):
        for name in ("alpha", "alpha_harm", "wilson_conf"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v!r}")
        if self.alpha_interactions is not None and not 0 < self.alpha_interactions < 1:
            raise ConfigError("alpha_interactions must lie in (0, 1)")
        if self.K < 2:
            raise ConfigError("K must be at least 2")
        if self.learner not in KINDS:
            raise ConfigError(f"learner must be one of {KINDS}")
        if self.delta < 0:
            raise ConfigError("delta must be non-negative")
        if self.bootstrap_B and self.bootstrap_B < 100:
            raise ConfigError("bootstrap_B must be 0 (off) or at least 100")
        if self.prespecified_interactions is not None:
            object.__setattr__(self, "prespecified_interactions", tuple(self.prespecified_interactions))
        if isinstance(self.forest, dict):
            object.__setattr__(self, "forest", ForestSpec(**self.forest))

    @classmethod
    def from_mapping(cls, mapping: dict, base: Optional["WorkflowConfig"] = None) -> "WorkflowConfig":
        """Overlay a (possibly nested) mapping onto ``base`` or the defaults."""
        base = base or cls()
        known = {f.name for f in fields(cls)}
        updates = {}
        for key, value in mapping.items():
            key = key.replace("-", "_")
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            if key == "forest":
                value = replace(base.forest, **value)
            updates[key] = value
        return replace(base, **updates)

    def seed_for(self, purpose: int) -> int:
        ss = np.random.SeedSequence(int(self.master_seed), spawn_key=(purpose,))
        return int(ss.generate_state(1, dtype=np.uint32)[0])


@dataclass(eq=False)
class Stage2Result:
    folds: FoldAssignment
    nuisance: NuisanceEstimates
    model: CateModel
    pseudo: PseudoOutcomes
    uplift: UpliftCurve
    value: PolicyValueCurve
    np_rule: NpFrontier

    @property
    def ate_dr(self) -> float:
        return float(np.mean(self.pseudo.values))


@dataclass(eq=False)
class WorkflowReport:
    stage1: Stage1Report
    proceed: bool
    reasons: list
    stage2: Optional[Stage2Result] = None
    stepp: Optional[SteppCurve] = None
    narrative: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)


def _note(narrative, step, **detail):
    narrative.append({"step": step, **detail})


def run_stage2(data: TrialDataset, config: WorkflowConfig, narrative: Optional[list] = None) -> Stage2Result:
    """Cross-fitted learning and evaluation on one shared fold partition."""
    STAGE2_RUNS["count"] += 1
    narrative = [] if narrative is None else narrative
    folds = make_folds(data, config.K, config.seed_for(_SEED_FOLDS))
    forest = replace(config.forest, seed=config.seed_for(_SEED_FOREST))
    nuisance = estimate_nuisance(data, folds, forest, config.propensity_mode, config.clip)
    model = fit_learner(data, folds, config.learner, forest, nuisance)
    pseudo = pseudo_dr(data, nuisance)
    scores = model.oof_scores
    uplift = uplift_curve(scores, pseudo, config.uplift_grid)
    value = value_curve(
        data, nuisance, scores, n_quantiles=config.n_quantiles,
        bootstrap_B=config.bootstrap_B, seed=config.seed_for(_SEED_BOOT),
    )
    frontier = np_frontier(
        scores, pseudo, value.thresholds, config.delta, config.alpha_harm,
        config.wilson_conf, config.capture_floor,
    )
    _note(narrative, "cross_fitting", K=config.K, fold_seed=folds.seed, propensity=config.propensity_mode)
    _note(narrative, "learner", kind=model.kind, n_trees=forest.n_trees)
    _note(narrative, "uplift", auqc_cumulative=uplift.auqc_cumulative, auqc_normalized=uplift.auqc_normalized)
    _note(
        narrative, "policy_value", t_star=value.t_star, v_star=value.v_star, value_gain=value.value_gain,
        rule="argmax DR value over score quantiles plus treat-all/treat-none",
    )
    _note(
        narrative, "np_rule", alpha_harm=config.alpha_harm, delta=config.delta, status=frontier.status,
        threshold=frontier.chosen_threshold,
        harm_rate=float(frontier.harm_rate[frontier.chosen_index]),
        benefit_capture=float(frontier.benefit_capture[frontier.chosen_index]),
    )
    return Stage2Result(folds, nuisance, model, pseudo, uplift, value, frontier)


def run_stage1_report(data: TrialDataset, config: WorkflowConfig = WorkflowConfig()) -> WorkflowReport:
    """Stage 1 and the gate only, with the optional exploratory STEPP curve."""
    narrative: list = []
    s1 = run_stage1(data, config.prespecified_interactions, config.alpha, config.alpha_interactions)
    _note(
        narrative, "stage1", test="omnibus LRT", stat=s1.lrt_stat, df=s1.lrt_df, p=s1.lrt_p, alpha=config.alpha,
    )
    _note(
        narrative, "stage1", test="Wald interactions (Holm)",
        terms=[t.name for t in s1.interactions],
        alpha=config.alpha if config.alpha_interactions is None else config.alpha_interactions,
    )
    stepp = None
    if config.stepp_biomarker:
        stepp = stepp_curve(data, config.stepp_biomarker, config.stepp_window, config.stepp_step)
        if config.stepp_permutations:
            stepp_band(data, stepp, config.stepp_permutations, 0.05, config.seed_for(_SEED_STEPP))
        _note(narrative, "stepp", biomarker=stepp.biomarker, windows=stepp.n_windows, exploratory=True)
    s1.stepp = stepp
    decision = "proceed" if s1.proceed else "stopped at gate"
    _note(narrative, "gate", decision=decision, reasons=list(s1.reasons))
    return WorkflowReport(s1, s1.proceed, list(s1.reasons), stepp=stepp, narrative=narrative)


def run_workflow(data: TrialDataset, config: WorkflowConfig = WorkflowConfig()) -> WorkflowReport:
    """Stage 1, the gate, and Stage 2 only when the gate opens."""
    report = run_stage1_report(data, config)
    if report.proceed:
        report.stage2 = run_stage2(data, config, report.narrative)
    return report


# ---------------------------------------------------------------------------
# replicate study


@dataclass
class ReplicateResult:
    scenario: str
    replicate: int
    proceed: bool
    auqc_cumulative: float = float("nan")
    auqc_normalized: float = float("nan")
    value_gain: float = float("nan")
    np_status: str = ""
    ate_dr: float = float("nan")
    error: str = ""


@dataclass
class ScenarioSummary:
    scenario: str
    replicates: int
    proceed_rate: float
    mean_auqc_cumulative: float
    mean_auqc_normalized: float
    mean_value_gain: float
    np_infeasible_rate: float
    failures: int
    # over every replicate, gate ignored (only when the study ran ungated Stage 2)
    uncond_mean_auqc_cumulative: Optional[float] = None
    uncond_mean_auqc_normalized: Optional[float] = None
    uncond_mean_value_gain: Optional[float] = None
    uncond_np_infeasible_rate: Optional[float] = None


@dataclass
class StudySummary:
    scenarios: list
    master_seed: int
    reps: int
    n: int
    replicates: list = field(default_factory=list, repr=False)


def _replicate_config(config: WorkflowConfig, seed_seq: np.random.SeedSequence) -> WorkflowConfig:
    seed = int(seed_seq.spawn(1)[0].generate_state(1, dtype=np.uint32)[0])
    return replace(config, master_seed=seed)


def _run_one(args) -> ReplicateResult:
    spec, s_idx, rep, config, ungated = args
    ss = scenario_seed(config.master_seed, s_idx, rep)
    data, _ = generate_trial(spec, ss)
    cfg = _replicate_config(config, ss)
    try:
        report = run_workflow(data, cfg)
        res = ReplicateResult(spec.scenario_name, rep, report.proceed)
        s2 = report.stage2
        if s2 is None and ungated:
            s2 = run_stage2(data, cfg)
        if s2 is not None:
            res.auqc_cumulative = s2.uplift.auqc_cumulative
            res.auqc_normalized = s2.uplift.auqc_normalized
            res.value_gain = s2.value.value_gain
            res.np_status = s2.np_rule.status
            res.ate_dr = s2.ate_dr
        return res
    except HteError as exc:
        log.warning("replicate %s/%d failed: %s", spec.scenario_name, rep, exc)
        return ReplicateResult(spec.scenario_name, rep, False, error=f"{type(exc).__name__}: {exc}")


def _init_worker():
    import numba

    numba.set_num_threads(1)


def _mean(values) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else float("nan")


def _rate(flags) -> float:
    flags = list(flags)
    return float(np.mean(flags)) if flags else float("nan")


def summarize(results: Sequence[ReplicateResult], scenario: str, ungated: bool) -> ScenarioSummary:
    rs = [r for r in results if r.scenario == scenario]
    ok = [r for r in rs if not r.error]
    gated = [r for r in ok if r.proceed]
    out = ScenarioSummary(
        scenario=scenario,
        replicates=len(rs),
        proceed_rate=_rate(r.proceed for r in ok),
        mean_auqc_cumulative=_mean(r.auqc_cumulative for r in gated),
        mean_auqc_normalized=_mean(r.auqc_normalized for r in gated),
        mean_value_gain=_mean(r.value_gain for r in gated),
        np_infeasible_rate=_rate(r.np_status == BEST_ATTAINABLE for r in gated),
        failures=len(rs) - len(ok),
    )
    if ungated:
        out.uncond_mean_auqc_cumulative = _mean(r.auqc_cumulative for r in ok)
        out.uncond_mean_auqc_normalized = _mean(r.auqc_normalized for r in ok)
        out.uncond_mean_value_gain = _mean(r.value_gain for r in ok)
        out.uncond_np_infeasible_rate = _rate(r.np_status == BEST_ATTAINABLE for r in ok)
    return out


def replicate_study(
    scenarios: Sequence[ScenarioSpec],
    reps: int,
    config: WorkflowConfig = WorkflowConfig(),
    n_jobs: int = 1,
    ungated: bool = False,
) -> StudySummary:
    """Run ``reps`` simulated trials per scenario through the gated workflow.

    Replicate r of scenario s draws its data and seeds from
    (master_seed, s, r) only, so results do not depend on ``n_jobs`` or
    execution order. Stage-2 means condition on passing the gate; with
    ``ungated=True`` Stage 2 is also run on stopped replicates to report
    unconditional means alongside.
    """
    if reps < 1:
        raise ConfigError("reps must be at least 1")
    tasks = []
    for s_idx, spec in enumerate(scenarios):
        scfg = replace(config, delta=spec.delta)
        tasks += [(spec, s_idx, r, scfg, ungated) for r in range(reps)]
    if n_jobs == 1:
        results = [_run_one(t) for t in tasks]
    else:
        workers = n_jobs if n_jobs > 0 else os.cpu_count()
        # spawn: forking after the OpenMP runtime has started is unsafe
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx, initializer=_init_worker) as pool:
            results = list(pool.map(_run_one, tasks, chunksize=1))
    summaries = [summarize(results, spec.scenario_name, ungated) for spec in scenarios]
    n = scenarios[0].n if scenarios else 0
    return StudySummary(summaries, config.master_seed, reps, n, results)


# ---------------------------------------------------------------------------
# ACTG 175


def actg175_config(config: WorkflowConfig = WorkflowConfig()) -> WorkflowConfig:
    return replace(
        config,
        delta=0.0,
        prespecified_interactions=ACTG_PRESPECIFIED,
        stepp_biomarker=config.stepp_biomarker or ACTG_STEPP_BIOMARKER,
    )


def run_actg175(
    path, config: WorkflowConfig = WorkflowConfig(), covariates: Sequence[str] = ACTG_DEFAULT_COVARIATES
) -> WorkflowReport:
    raw = load_raw_table(path)
    data = preprocess_actg175(raw, covariates)
    report = run_workflow(data, actg175_config(config))
    report.meta.update(
        {
            "source": str(path),
            "raw_rows": raw.n_rows,
            "N": data.n,
            "p": data.p,
            "covariates": list(data.covariate_names),
            "outcome_rule": "Y=0 iff event recorded on or before day 672; event-free censoring before day 672 counts as Y=1 (assumption)",
            "contrast": "A=0 zidovudine monotherapy; A=1 zidovudine+didanosine or zidovudine+zalcitabine; didanosine monotherapy excluded",
        }
    )
    return report


# ---------------------------------------------------------------------------
# reports


def fmt(v) -> str:
    """Fixed 6-significant-digit text for report files."""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    return format(v, ".6g")


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (int, np.integer)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        if math.isfinite(v):
            return float(format(v, ".6g"))
        return fmt(v)
    return v


def report_to_dict(report: WorkflowReport) -> dict:
    s1 = report.stage1
    out = {
        "meta": report.meta,
        "stage1": {
            "alpha": s1.alpha,
            "alpha_interactions": s1.alpha_interactions,
            "lrt": {"stat": s1.lrt_stat, "df": s1.lrt_df, "p": s1.lrt_p},
            "interactions": [
                {"name": t.name, "estimate": t.estimate, "wald_z": t.wald_z, "raw_p": t.raw_p, "holm_p": t.holm_p}
                for t in s1.interactions
            ],
            "criterion_ii": s1.criterion_ii,
        },
        "gate": {"proceed": report.proceed, "reasons": report.reasons},
        "stage2": None,
        "narrative": report.narrative,
    }
    if report.stepp is not None:
        out["stage1"]["stepp"] = {
            "biomarker": report.stepp.biomarker,
            "window_size": report.stepp.window_size,
            "step": report.stepp.step,
            "windows": report.stepp.n_windows,
            "dropped_windows": report.stepp.n_dropped,
            "exploratory": True,
        }
    s2 = report.stage2
    if s2 is not None:
        fr = s2.np_rule
        k = fr.chosen_index
        out["stage2"] = {
            "learner": s2.model.summary(),
            "ate_dr": s2.ate_dr,
            "auqc": {"cumulative": s2.uplift.auqc_cumulative, "normalized": s2.uplift.auqc_normalized},
            "policy": {
                "t_star": s2.value.t_star,
                "v_star": s2.value.v_star,
                "value_gain": s2.value.value_gain,
                "treat_all": s2.value.treat_all,
                "treat_none": s2.value.treat_none,
            },
            "np_rule": {
                "alpha_harm": fr.alpha_harm,
                "delta": fr.delta,
                "conf_level": fr.conf_level,
                "status": fr.status,
                "threshold": fr.chosen_threshold,
                "harm_rate": fr.harm_rate[k],
                "harm_upper": fr.harm_upper[k],
                "benefit_capture": fr.benefit_capture[k],
                "benefit_among_treated": fr.benefit_among_treated[k],
            },
        }
    return _jsonable(out)


def study_to_dict(study: StudySummary) -> dict:
    return _jsonable(
        {
            "master_seed": study.master_seed,
            "reps": study.reps,
            "n": study.n,
            "scenarios": [asdict(s) for s in study.scenarios],
        }
    )


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) if not isinstance(v, str) else v for v in row])


def _dump_json(path: Path, payload):
    path.write_text(json.dumps(payload, indent=2) + "\n")


def emit_report(report, out_dir, formats=("json", "csv")) -> list[Path]:
    """Write a JSON summary and/or delimited curve files; returns the paths written."""
    formats = set(formats)
    unknown = formats - {"json", "csv"}
    if unknown:
        raise ConfigError(f"unknown report format(s) {sorted(unknown)}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = []
    want_csv = "csv" in formats
    if isinstance(report, StudySummary):
        if "json" in formats:
            p = out / "summary.json"
            _dump_json(p, study_to_dict(report))
            written.append(p)
        if not want_csv:
            return written
        cols = [f.name for f in fields(ScenarioSummary)]
        p = out / "study.csv"
        _write_csv(
            p, cols,
            [[getattr(s, c) if getattr(s, c) is not None else "" for c in cols] for s in report.scenarios],
        )
        written.append(p)
        p = out / "replicates.csv"
        rcols = [f.name for f in fields(ReplicateResult)]
        _write_csv(p, rcols, [[getattr(r, c) for c in rcols] for r in report.replicates])
        written.append(p)
        return written

    if "json" in formats:
        p = out / "summary.json"
        _dump_json(p, report_to_dict(report))
        written.append(p)
    if not want_csv:
        return written
    st = report.stepp
    if st is not None:
        p = out / "stepp.csv"
        lo = st.band_low if st.band_low is not None else np.full(st.n_windows, np.nan)
        hi = st.band_high if st.band_high is not None else np.full(st.n_windows, np.nan)
        _write_csv(
            p, ["center", "risk_diff", "band_low", "band_high", "n_treated", "n_control"],
            zip(st.window_centers, st.risk_diff, lo, hi, st.counts[:, 0], st.counts[:, 1]),
        )
        written.append(p)
    s2 = report.stage2
    if s2 is None:
        return written
    p = out / "uplift.csv"
    _write_csv(p, ["q", "u_normalized", "u_cumulative"], zip(s2.uplift.q_grid, s2.uplift.u_normalized, s2.uplift.u_cumulative))
    written.append(p)
    p = out / "value.csv"
    se = s2.value.se if s2.value.se is not None else np.full(s2.value.thresholds.size, np.nan)
    _write_csv(p, ["threshold", "value", "se"], zip(s2.value.thresholds, s2.value.values, se))
    written.append(p)
    p = out / "np.csv"
    fr = s2.np_rule
    _write_csv(
        p, ["threshold", "harm_rate", "harm_upper", "benefit_capture", "feasible", "benefit_among_treated"],
        zip(fr.thresholds, fr.harm_rate, fr.harm_upper, fr.benefit_capture, fr.feasible, fr.benefit_among_treated),
    )
    written.append(p)
    return written
