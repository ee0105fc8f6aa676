"""Command-line entry point: ``hybrid-hte <command> [options]``.

Precedence for workflow settings is defaults < command-line flags < ``--config`` file.
Exit codes: 0 success, 2 invalid input or configuration, 3 numerical failure, 4 I/O.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .dataset import ColumnSchema, load_table, read_header, write_table
from .errors import ConfigError, HteError, SchemaError
from .simgen import PRESETS, generate_trial, preset, scenario_seed
from .workflow import (
    WorkflowConfig,
    emit_report,
    replicate_study,
    run_actg175,
    run_stage1_report,
    run_stage2,
    run_workflow,
)

EXIT_OK = 0
EXIT_IO = 4


def _load_mapping(path) -> dict:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text) if path.suffix.lower() == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as exc:
        raise ConfigError(f"{path}: cannot parse: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return data


def _schema(args) -> ColumnSchema:
    if args.schema:
        return ColumnSchema.from_mapping(_load_mapping(args.schema))
    header = read_header(args.input)
    for role in ("a", "y"):
        if role not in header:
            raise SchemaError(f"no --schema given and {args.input} has no {role!r} column")
    return ColumnSchema(tuple(h for h in header if h not in ("a", "y")))


def _names(text):
    if text is None:
        return None
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _config(args, **fixed) -> WorkflowConfig:
    flags = {
        "alpha": getattr(args, "alpha", None),
        "alpha_harm": getattr(args, "alpha_harm", None),
        "delta": getattr(args, "delta", None),
        "K": getattr(args, "k", None),
        "learner": getattr(args, "learner", None),
        "master_seed": getattr(args, "seed", None),
        "prespecified_interactions": _names(getattr(args, "interactions", None)),
        "stepp_biomarker": getattr(args, "stepp_biomarker", None),
        "bootstrap_B": getattr(args, "bootstrap", None),
        "propensity_mode": getattr(args, "propensity", None),
    }
    trees = getattr(args, "trees", None)
    if trees is not None:
        flags["forest"] = {"n_trees": trees}
    flags.update(fixed)
    cfg = WorkflowConfig.from_mapping({k: v for k, v in flags.items() if v is not None})
    path = getattr(args, "config", None)
    if path:
        cfg = WorkflowConfig.from_mapping(_load_mapping(path), base=cfg)
    return cfg


def _emit(report, out):
    for path in emit_report(report, out):
        print(path)


def cmd_simulate(args) -> int:
    spec = preset(args.scenario, args.n)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = list(PRESETS).index(spec.scenario_name)
    for r in range(args.reps):
        data, truth = generate_trial(spec, scenario_seed(args.seed, index, r))
        stem = f"{spec.scenario_name}_rep{r:03d}"
        print(write_table(data, out / f"{stem}.csv"))
        truth_path = out / f"{stem}.truth.csv"
        np.savetxt(
            truth_path, np.column_stack([truth.tau, truth.z]), delimiter=",",
            header="tau,z", comments="", fmt=["%.17g", "%d"],
        )
        print(truth_path)
    return EXIT_OK


def _load_input(args):
    return load_table(args.input, _schema(args))


def cmd_stage1(args) -> int:
    data = _load_input(args)
    cfg = _config(args)
    if cfg.stepp_biomarker and not cfg.stepp_permutations:
        cfg = WorkflowConfig.from_mapping({"stepp_permutations": 1000}, base=cfg)
    _emit(run_stage1_report(data, cfg), args.out)
    return EXIT_OK


def cmd_stage2(args) -> int:
    data = _load_input(args)
    cfg = _config(args)
    report = run_stage1_report(data, cfg)
    report.narrative.append({"step": "gate", "decision": "bypassed", "reason": "stage2 command runs ungated"})
    report.meta["gate_bypassed"] = True
    report.stage2 = run_stage2(data, cfg, report.narrative)
    _emit(report, args.out)
    return EXIT_OK


def cmd_run(args) -> int:
    if args.scenario:
        spec = preset(args.scenario, args.n)
        index = list(PRESETS).index(spec.scenario_name)
        cfg = _config(args, **({} if args.delta is not None else {"delta": spec.delta}))
        data, _ = generate_trial(spec, scenario_seed(cfg.master_seed, index, args.replicate))
    else:
        data = _load_input(args)
        cfg = _config(args)
    _emit(run_workflow(data, cfg), args.out)
    return EXIT_OK


def cmd_study(args) -> int:
    cfg = _config(args)
    specs = [preset(name, args.n) for name in _names(args.scenarios)]
    study = replicate_study(specs, args.reps, cfg, n_jobs=args.jobs, ungated=args.ungated)
    for s in study.scenarios:
        print(
            f"{s.scenario}: proceed={s.proceed_rate:.3f} dV={s.mean_value_gain:.4f} "
            f"AUQC={s.mean_auqc_cumulative:.2f} ({s.mean_auqc_normalized:.4f} normalized) "
            f"np_infeasible={s.np_infeasible_rate:.3f} failures={s.failures}",
            file=sys.stderr,
        )
    _emit(study, args.out)
    return EXIT_OK


def cmd_actg175(args) -> int:
    report = run_actg175(args.input, _config(args))
    _emit(report, args.out)
    return EXIT_OK


def _common(p, seed=True):
    p.add_argument("--out", required=True, help="output directory")
    if seed:
        p.add_argument("--seed", type=int, help="master seed (default 0)")


def _input(p, required=True):
    p.add_argument("--input", required=required, help="comma-separated trial table")
    p.add_argument("--schema", help="YAML/JSON with covariates, treatment, outcome keys")


def _stage2_flags(p):
    p.add_argument("--learner", choices=["CausalForest", "S", "T", "X"])
    p.add_argument("--k", type=int, help="cross-fitting folds")
    p.add_argument("--delta", type=float, help="clinical margin for benefit labels")
    p.add_argument("--alpha-harm", type=float, help="harm-rate bound of the NP rule")
    p.add_argument("--trees", type=int, help="trees per forest")
    p.add_argument("--bootstrap", type=int, help="bootstrap replicates for value SEs (0 = off)")
    p.add_argument("--propensity", choices=["randomized", "modeled"])


def _stage1_flags(p):
    p.add_argument("--interactions", help="comma-separated prespecified interaction covariates")
    p.add_argument("--alpha", type=float, help="gate significance level")
    p.add_argument("--stepp-biomarker", help="continuous covariate for the STEPP curve")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hybrid-hte", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="write simulated trial tables with true effects")
    p.add_argument("--scenario", required=True, choices=list(PRESETS))
    p.add_argument("--n", type=int)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("stage1", help="population-level interaction tests and gate")
    _input(p)
    _stage1_flags(p)
    p.add_argument("--config")
    _common(p)
    p.set_defaults(func=cmd_stage1)

    p = sub.add_parser("stage2", help="cross-fitted CATE learning and policy evaluation, ungated")
    _input(p)
    _stage1_flags(p)
    _stage2_flags(p)
    p.add_argument("--config")
    _common(p)
    p.set_defaults(func=cmd_stage2)

    p = sub.add_parser("run", help="gated two-stage workflow on a table or a simulated scenario")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--input")
    src.add_argument("--scenario", choices=list(PRESETS))
    p.add_argument("--schema")
    p.add_argument("--n", type=int)
    p.add_argument("--replicate", type=int, default=0, help="replicate index for --scenario")
    _stage1_flags(p)
    _stage2_flags(p)
    p.add_argument("--config")
    _common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("study", help="replicate simulation study over the preset scenarios")
    p.add_argument("--reps", type=int, default=200)
    p.add_argument("--n", type=int)
    p.add_argument("--scenarios", default="no,weak,strong")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (0 = all cores)")
    p.add_argument("--ungated", action="store_true", help="also report means over all replicates")
    _stage1_flags(p)
    _stage2_flags(p)
    p.add_argument("--config")
    _common(p)
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("actg175", help="two-stage analysis of the ACTG 175 trial file")
    p.add_argument("--input", required=True)
    _stage2_flags(p)
    p.add_argument("--config")
    _common(p)
    p.set_defaults(func=cmd_actg175)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s"
    )
    try:
        return args.func(args)
    except HteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
