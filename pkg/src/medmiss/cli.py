"""Command-line surface and file formats.

Subcommands: truth | generate | analyze | simulate | report.  Configuration
comes from a versioned JSON file plus flags (flags win).  Datasets travel as
CSV with the literal token NA for masked cells; raw simulation results as
JSON-lines; metrics as CSV.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import fields as dataclass_fields

import numpy as np
import pandas as pd

from .datagen import (
    CalibrationError,
    Dataset,
    DgmParams,
    MdagSpec,
    VARIABLES,
    default_dgm_params,
    default_mdag,
    generate_complete,
    impose_missingness,
)
from .glm import GlmError
from .impute import (
    EmptyCompleteCasesError,
    ImputationError,
    METHOD_KINDS,
    MissingMethod,
)
from .mediation import EstimationError, default_analysis_spec
from .simstudy import (
    ScenarioConfig,
    SimulationError,
    TruthValues,
    compute_metrics,
    estimate_truth,
    read_raw_jsonl,
    report,
    run_scenario,
    write_raw_jsonl,
)
from .variance import VarianceError, boot_mi, cca_boot, make_estimator, mi_boot

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

NA_TOKEN = "NA"
CONFIG_SCHEMA_VERSION = 1

_NUMERIC_ERRORS = (
    GlmError,
    EstimationError,
    VarianceError,
    ImputationError,
    CalibrationError,
    SimulationError,
    EmptyCompleteCasesError,
)


class ConfigError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------- dataset CSV


def write_dataset_csv(data: Dataset, path) -> None:
    """Header A,C1,C2,C3,X,Z,Y; masked cells as the literal token NA."""
    with open(path, "w") as fh:
        fh.write(",".join(VARIABLES) + "\n")
        cols = [data.values[v] for v in VARIABLES]
        masks = [data.mask[v] for v in VARIABLES]
        for i in range(data.n):
            fh.write(
                ",".join(
                    NA_TOKEN if masks[j][i] else str(int(cols[j][i]))
                    for j in range(len(VARIABLES))
                )
                + "\n"
            )


def read_dataset_csv(path) -> Dataset:
    """Strict parse of the dataset CSV: cells must be 0, 1, or NA; the
    auxiliary A and confounder C1 must be complete."""
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError:
        raise DataError(f"no such file: {path}")
    except Exception as exc:
        raise DataError(f"cannot parse CSV {path}: {exc}")
    missing_cols = [v for v in VARIABLES if v not in frame.columns]
    if missing_cols:
        raise DataError(f"CSV lacks required columns {missing_cols}")
    if len(frame) == 0:
        raise DataError("CSV contains no rows")
    values, mask = {}, {}
    for v in VARIABLES:
        raw = frame[v].to_numpy()
        is_na = raw == NA_TOKEN
        ok = np.isin(raw, ("0", "1")) | is_na
        if not ok.all():
            bad = raw[~ok][0]
            raise DataError(f"column {v}: invalid cell {bad!r} (expected 0, 1 or NA)")
        if v in ("A", "C1") and is_na.any():
            raise DataError(f"column {v} must be complete (found NA)")
        col = np.where(is_na, "0", raw).astype(np.int8)
        values[v] = col
        mask[v] = is_na
    return Dataset(values=values, mask=mask)


# ------------------------------------------------------------------- config


_SCENARIO_KEYS = {f.name for f in dataclass_fields(ScenarioConfig)} - {"params", "mdag_spec", "analysis"}
_TOP_KEYS = {"schema_version", "scenario", "dgm", "mdag_spec", "out"}


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"no such config file: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    version = cfg.get("schema_version")
    if version != CONFIG_SCHEMA_VERSION:
        raise ConfigError(f"unsupported config schema_version {version!r}")
    unknown = set(cfg) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    scenario = cfg.get("scenario", {})
    if not isinstance(scenario, dict):
        raise ConfigError("scenario section must be an object")
    unknown = set(scenario) - _SCENARIO_KEYS
    if unknown:
        raise ConfigError(f"unknown scenario keys {sorted(unknown)}")
    return cfg


def dump_config(cfg: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg, fh, indent=2, sort_keys=True)
        fh.write("\n")


def scenario_from_config(cfg: dict, overrides: dict) -> ScenarioConfig:
    """Build the scenario: defaults < config file < command-line flags."""
    merged = dict(cfg.get("scenario", {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    for key in ("methods", "estimators", "variance"):
        if key in merged and merged[key] is not None:
            merged[key] = tuple(merged[key])
    kwargs = {}
    if "dgm" in cfg:
        kwargs["params"] = DgmParams.from_dict(cfg["dgm"])
    if "mdag_spec" in cfg:
        kwargs["mdag_spec"] = MdagSpec.from_dict(cfg["mdag_spec"])
    try:
        return ScenarioConfig(**merged, **kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc))


def config_round_trip(cfg: dict, path) -> dict:
    dump_config(cfg, path)
    return load_config(path)


# ------------------------------------------------------------------ commands


def cmd_truth(args) -> int:
    params = default_dgm_params()
    if args.config:
        cfg = load_config(args.config)
        if "dgm" in cfg:
            params = DgmParams.from_dict(cfg["dgm"])
    out_dir = args.out or "."
    if not os.path.isdir(out_dir):
        raise DataError(f"output directory does not exist: {out_dir}")
    cache = os.path.join(out_dir, "truth_cache.json")
    truth = estimate_truth(params=params, n=args.n, seed=args.seed, cache_path=cache)
    path = os.path.join(out_dir, "truth.json")
    with open(path, "w") as fh:
        json.dump(truth.to_dict(), fh, indent=2)
        fh.write("\n")
    print(f"indirect={truth.indirect:.4f} direct={truth.direct:.4f} "
          f"total={truth.total:.4f} (n={truth.n}, seed={truth.seed}) -> {path}")
    return EXIT_OK


def cmd_generate(args) -> int:
    if args.n < 1:
        raise ConfigError("--n must be positive")
    params = default_dgm_params()
    mdag = default_mdag(args.mdag)
    if args.config:
        cfg = load_config(args.config)
        if "dgm" in cfg:
            params = DgmParams.from_dict(cfg["dgm"])
        if "mdag_spec" in cfg:
            mdag = MdagSpec.from_dict(cfg["mdag_spec"])
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    data = generate_complete(args.n, params, rng)
    masked = impose_missingness(data, mdag, rng)
    write_dataset_csv(masked, args.out)
    print(f"wrote {args.n} rows (mechanism {mdag.label}) -> {args.out}")
    return EXIT_OK


def _per100(x: float) -> str:
    return f"{100 * x:.1f}"


def cmd_analyze(args) -> int:
    data = read_dataset_csv(args.data)
    spec = default_analysis_spec(mc_draws=args.draws)
    estimator = make_estimator(args.estimator, spec)
    method = MissingMethod(args.method, m=args.m, cycles=args.cycles)
    try:
        method.validate_estimator(args.estimator)
    except ValueError as exc:
        raise ConfigError(str(exc))
    rng = np.random.default_rng(np.random.SeedSequence(args.seed))
    if method.kind == "cca":
        pooled = cca_boot(data, estimator, rng, b=args.b)
    elif args.variance == "miboot":
        pooled = mi_boot(data, method, estimator, rng, m=args.m, b=args.b,
                         outcome_formula=spec.outcome)
    else:
        pooled = boot_mi(data, method, estimator, rng, b=args.b, m=args.m_bootmi,
                         outcome_formula=spec.outcome)
    lines = []
    for name, res in pooled.items():
        lines.append(
            f"{name}: {_per100(res.point)} per 100 "
            f"(95% CI {_per100(res.ci_low)} to {_per100(res.ci_high)}; SE {_per100(res.se)})"
        )
    text = "\n".join(lines)
    print(text)
    if args.out:
        payload = {
            name: {
                "point": res.point, "se": res.se,
                "ci_low": res.ci_low, "ci_high": res.ci_high,
                "failed_replicates": res.failed,
            }
            for name, res in pooled.items()
        }
        payload["method"] = method.kind
        payload["estimator"] = args.estimator
        payload["variance"] = "boot" if method.kind == "cca" else args.variance
        with open(args.out, "w") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config) if args.config else {"schema_version": 1}
    overrides = {
        "mdag": args.mdag,
        "reps": args.reps,
        "base_seed": args.seed,
        "workers": args.threads,
        "b_boot": args.b,
        "m_miboot": args.m,
        "mc_draws": args.draws,
    }
    if args.method:
        overrides["methods"] = args.method
    if args.estimator:
        overrides["estimators"] = (args.estimator,)
    if args.variance:
        overrides["variance"] = (args.variance,)
    scenario = scenario_from_config(cfg, overrides)
    out_dir = args.out or cfg.get("out") or "."
    os.makedirs(out_dir, exist_ok=True)
    truth = estimate_truth(
        params=scenario.params,
        analysis=scenario.resolved_analysis(),
        cache_path=os.path.join(out_dir, "truth_cache.json"),
    )
    with open(os.path.join(out_dir, "truth.json"), "w") as fh:
        json.dump(truth.to_dict(), fh, indent=2)
        fh.write("\n")
    raw = run_scenario(scenario)
    prefix = f"mdag{scenario.mdag}"
    raw_path = os.path.join(out_dir, f"{prefix}_raw.jsonl")
    write_raw_jsonl(raw, raw_path)
    metrics = compute_metrics(raw, truth)
    files = report(metrics, out_dir, prefix=prefix, plots=args.plots)
    print(f"raw -> {raw_path}")
    for f in files:
        print(f"report -> {f}")
    return EXIT_OK


def cmd_report(args) -> int:
    raw = read_raw_jsonl(args.raw)
    try:
        with open(args.truth) as fh:
            truth = TruthValues(**json.load(fh))
    except FileNotFoundError:
        raise DataError(f"no such truth file: {args.truth}")
    metrics = compute_metrics(raw, truth)
    out_dir = args.out or "."
    files = report(metrics, out_dir, prefix=args.prefix, plots=args.plots)
    for f in files:
        print(f"report -> {f}")
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="medmiss",
        description="Interventional mediation effects under multivariable missing data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, default=20240501, help="base RNG seed")
        p.add_argument("--out", help="output directory/file")

    p_truth = sub.add_parser("truth", help="estimate true effects from a large complete cohort")
    add_common(p_truth)
    p_truth.add_argument("--n", type=int, default=1_000_000)
    p_truth.set_defaults(func=cmd_truth, seed=99)

    p_gen = sub.add_parser("generate", help="write a masked synthetic dataset CSV")
    add_common(p_gen)
    p_gen.add_argument("--mdag", choices=list("ABCDEF"), default="A")
    p_gen.add_argument("--n", type=int, default=2000)
    p_gen.set_defaults(func=cmd_generate, out_required=True)

    p_an = sub.add_parser("analyze", help="analyze one dataset CSV")
    p_an.add_argument("data", help="dataset CSV (NA token for missing cells)")
    p_an.add_argument("--method", choices=METHOD_KINDS, default="cca")
    p_an.add_argument("--estimator", choices=("dr", "mc"), default="dr")
    p_an.add_argument("--variance", choices=("miboot", "bootmi"), default="bootmi")
    p_an.add_argument("--m", type=int, default=50, help="imputations (MI-Boot point/pooling)")
    p_an.add_argument("--m-bootmi", type=int, default=2, dest="m_bootmi")
    p_an.add_argument("--b", type=int, default=200, help="bootstrap samples")
    p_an.add_argument("--draws", type=int, default=50, help="Monte Carlo draws (mc estimator)")
    p_an.add_argument("--cycles", type=int, default=10)
    p_an.add_argument("--seed", type=int, default=20240501)
    p_an.add_argument("--out", help="write the pooled results as JSON here")
    p_an.set_defaults(func=cmd_analyze)

    p_sim = sub.add_parser("simulate", help="run a simulation scenario")
    add_common(p_sim)
    p_sim.add_argument("--mdag", choices=list("ABCDEF"))
    p_sim.add_argument("--method", action="append", choices=METHOD_KINDS,
                       help="repeatable; default from config")
    p_sim.add_argument("--estimator", choices=("dr", "mc"))
    p_sim.add_argument("--variance", choices=("miboot", "bootmi"))
    p_sim.add_argument("--reps", type=int)
    p_sim.add_argument("--threads", type=int)
    p_sim.add_argument("--b", type=int)
    p_sim.add_argument("--m", type=int)
    p_sim.add_argument("--draws", type=int)
    p_sim.add_argument("--plots", action="store_true")
    p_sim.set_defaults(func=cmd_simulate, seed=None)

    p_rep = sub.add_parser("report", help="re-generate reports from raw results")
    p_rep.add_argument("--raw", required=True, help="raw results JSON-lines file")
    p_rep.add_argument("--truth", required=True, help="truth JSON file")
    p_rep.add_argument("--prefix", default="scenario")
    p_rep.add_argument("--plots", action="store_true")
    p_rep.add_argument("--out", help="output directory")
    p_rep.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "out_required", False) and not args.out:
        print("error: --out is required for this command", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except _NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
