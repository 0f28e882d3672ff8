"""Replication harness for the simulation study.

Runs (mechanism x method x estimator x variance-approach) scenarios over many
replications, estimates the target truth from a large complete cohort, and
aggregates the standard performance metrics (relative bias, empirical SE,
error in model-based SE, coverage) together with their Monte Carlo standard
errors.

Replications are the unit of parallelism.  Replication r of a scenario owns
the RNG stream derived from (base_seed, r), and within a replication the same
masked dataset is fed to every method, so method comparisons are paired.
Aggregation sorts the raw rows, which makes results identical for any worker
count.
"""

from __future__ import annotations

import hashlib
import json
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .datagen import (
    DgmParams,
    MdagSpec,
    default_dgm_params,
    default_mdag,
    generate_complete,
    impose_missingness,
)
from .impute import METHOD_KINDS, MissingMethod, impute
from .mediation import AnalysisSpec, ESTIMANDS, default_analysis_spec, dr_gcomp
from .variance import Z_95, boot_mi, cca_boot, make_estimator, mi_boot

SCHEMA_VERSION = 1
VARIANCE_APPROACHES = ("miboot", "bootmi")

RAW_COLUMNS = [
    "schema_version", "rep", "method", "estimator", "variance", "estimand",
    "estimate", "model_se", "ci_low", "ci_high", "failed",
]


class SimulationError(Exception):
    pass


@dataclass(frozen=True)
class TruthValues:
    """Target effect values estimated from a large complete cohort."""

    indirect: float
    direct: float
    total: float
    n: int
    seed: int

    def __post_init__(self):
        if abs(self.total - (self.indirect + self.direct)) > 1e-12:
            raise ValueError("total must equal indirect + direct")

    def value(self, estimand: str) -> float:
        return {"indirect": self.indirect, "direct": self.direct, "total": self.total}[estimand]

    def to_dict(self) -> dict:
        return {
            "indirect": self.indirect, "direct": self.direct, "total": self.total,
            "n": self.n, "seed": self.seed,
        }


@dataclass(frozen=True)
class ScenarioConfig:
    """One simulation scenario: mechanism, methods, estimators, sizes, seeds."""

    mdag: str = "A"
    methods: tuple[str, ...] = ("cca", "mi-noint")
    estimators: tuple[str, ...] = ("dr",)
    variance: tuple[str, ...] = VARIANCE_APPROACHES
    n: int = 2000
    reps: int = 500
    base_seed: int = 20240501
    workers: int = 1
    m_miboot: int = 50
    m_bootmi: int = 2
    b_boot: int = 200
    mc_draws: int = 50
    cycles: int = 10
    params: DgmParams = field(default_factory=default_dgm_params)
    mdag_spec: MdagSpec | None = None
    analysis: AnalysisSpec | None = None

    def __post_init__(self):
        if self.reps < 2:
            raise ValueError("need at least 2 replications")
        if self.mdag.upper() not in "ABCDEF":
            raise ValueError(f"unknown mechanism label {self.mdag!r}")
        for m in self.methods:
            if m not in METHOD_KINDS:
                raise ValueError(f"unknown method {m!r}")
        for e in self.estimators:
            if e not in ("dr", "mc"):
                raise ValueError(f"unknown estimator {e!r}")
        for v in self.variance:
            if v not in VARIANCE_APPROACHES:
                raise ValueError(f"unknown variance approach {v!r}")
        # Estimator-specific strategies must have their estimator requested.
        for m in self.methods:
            if m == "mi-xint" and "dr" not in self.estimators:
                raise ValueError("mi-xint requires the dr estimator")
            if m == "mi-zint" and "mc" not in self.estimators:
                raise ValueError("mi-zint requires the mc estimator")

    def resolved_mdag(self) -> MdagSpec:
        return self.mdag_spec if self.mdag_spec is not None else default_mdag(self.mdag)

    def resolved_analysis(self) -> AnalysisSpec:
        spec = self.analysis if self.analysis is not None else default_analysis_spec()
        return replace(spec, mc_draws=self.mc_draws)


def _params_digest(params: DgmParams, analysis: AnalysisSpec, n: int, seed: int) -> str:
    payload = json.dumps(
        {
            "params": params.to_dict(),
            "analysis": {
                "propensity": analysis.propensity.to_dict(),
                "mediator": analysis.mediator.to_dict(),
                "outcome": analysis.outcome.to_dict(),
            },
            "n": n,
            "seed": seed,
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()


def estimate_truth(
    params: DgmParams | None = None,
    analysis: AnalysisSpec | None = None,
    n: int = 1_000_000,
    seed: int = 99,
    cache_path: str | None = None,
) -> TruthValues:
    """True effect values: doubly robust g-computation on a complete cohort.

    Results are cached to ``cache_path`` keyed by (parameters, analysis, n,
    seed), because the large-cohort run is worth reusing across scenarios.
    """
    params = default_dgm_params() if params is None else params
    analysis = default_analysis_spec() if analysis is None else analysis
    key = _params_digest(params, analysis, n, seed)
    if cache_path and os.path.exists(cache_path):
        with open(cache_path) as fh:
            cache = json.load(fh)
        if key in cache:
            return TruthValues(**cache[key])
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    data = generate_complete(n, params, rng)
    est = dr_gcomp(data.columns(), analysis)
    truth = TruthValues(
        indirect=est.indirect, direct=est.direct, total=est.indirect + est.direct,
        n=n, seed=seed,
    )
    if cache_path:
        cache = {}
        if os.path.exists(cache_path):
            with open(cache_path) as fh:
                cache = json.load(fh)
        cache[key] = truth.to_dict()
        os.makedirs(os.path.dirname(cache_path) or ".", exist_ok=True)
        with open(cache_path, "w") as fh:
            json.dump(cache, fh, indent=2)
    return truth


def _method_stream(base_seed: int, rep: int, method: str, salt: int) -> np.random.Generator:
    # Streams keyed by the global method registry, so adding or removing
    # methods from a scenario never changes any other method's draws.
    return np.random.default_rng(
        np.random.SeedSequence(base_seed, spawn_key=(rep, METHOD_KINDS.index(method), salt))
    )


def _rows_from_pooled(rep, method, estimator, variance, pooled) -> list[dict]:
    return [
        {
            "schema_version": SCHEMA_VERSION,
            "rep": rep,
            "method": method,
            "estimator": estimator,
            "variance": variance,
            "estimand": name,
            "estimate": res.point,
            "model_se": res.se,
            "ci_low": res.ci_low,
            "ci_high": res.ci_high,
            "failed": False,
        }
        for name, res in pooled.items()
    ]


def _failure_rows(rep, method, estimator, variance) -> list[dict]:
    return [
        {
            "schema_version": SCHEMA_VERSION,
            "rep": rep,
            "method": method,
            "estimator": estimator,
            "variance": variance,
            "estimand": name,
            "estimate": np.nan,
            "model_se": np.nan,
            "ci_low": np.nan,
            "ci_high": np.nan,
            "failed": True,
        }
        for name in ESTIMANDS
    ]


def run_replication(rep: int, config: ScenarioConfig) -> list[dict]:
    """All analyses of one replication; the paired-design unit of work."""
    analysis = config.resolved_analysis()
    data_rng = np.random.default_rng(
        np.random.SeedSequence(config.base_seed, spawn_key=(rep, 10_000))
    )
    mask_rng = np.random.default_rng(
        np.random.SeedSequence(config.base_seed, spawn_key=(rep, 10_001))
    )
    data = generate_complete(config.n, config.params, data_rng)
    masked = impose_missingness(data, config.resolved_mdag(), mask_rng)

    rows: list[dict] = []
    bias_only = len(config.variance) == 0
    for kind in config.methods:
        estimators = [e for e in config.estimators
                      if not (kind == "mi-xint" and e != "dr")
                      and not (kind == "mi-zint" and e != "mc")]
        if kind == "cca":
            for e_kind in estimators:
                estimator = make_estimator(e_kind, analysis)
                rng = _method_stream(config.base_seed, rep, kind, salt=(e_kind == "mc"))
                try:
                    if bias_only:
                        from .impute import complete_cases

                        cc = complete_cases(masked)
                        eff = estimator(cc.columns(), rng=rng)
                        pooled = None
                        rows += [
                            {
                                "schema_version": SCHEMA_VERSION,
                                "rep": rep, "method": kind, "estimator": e_kind,
                                "variance": "none", "estimand": name,
                                "estimate": float(eff[i]), "model_se": np.nan,
                                "ci_low": np.nan, "ci_high": np.nan, "failed": False,
                            }
                            for i, name in enumerate(ESTIMANDS)
                        ]
                    else:
                        pooled = cca_boot(masked, estimator, rng, b=config.b_boot)
                        rows += _rows_from_pooled(rep, kind, e_kind, "boot", pooled)
                except Exception:
                    rows += _failure_rows(rep, kind, e_kind, "none" if bias_only else "boot")
            continue

        method = MissingMethod(kind, m=config.m_miboot, cycles=config.cycles)
        if bias_only:
            # One imputation run per method; every valid estimator reuses it.
            imp_rng = _method_stream(config.base_seed, rep, kind, salt=1)
            try:
                imputed = impute(masked, method, estimators[0], imp_rng,
                                 outcome_formula=analysis.outcome)
                stack = {
                    v: np.stack([ds[v] for ds in imputed.datasets]).astype(np.float64)
                    for v in imputed.datasets[0]
                }
            except Exception:
                for e_kind in estimators:
                    rows += _failure_rows(rep, kind, e_kind, "none")
                continue
            for e_kind in estimators:
                estimator = make_estimator(e_kind, analysis)
                rng = _method_stream(config.base_seed, rep, kind, salt=2 + (e_kind == "mc"))
                try:
                    effects, ok = estimator.dataset_batch(stack, rng)
                    if not ok.all():
                        raise SimulationError("analysis failed on an imputed dataset")
                    point = effects.mean(axis=0)
                    rows += [
                        {
                            "schema_version": SCHEMA_VERSION,
                            "rep": rep, "method": kind, "estimator": e_kind,
                            "variance": "none", "estimand": name,
                            "estimate": float(point[i]), "model_se": np.nan,
                            "ci_low": np.nan, "ci_high": np.nan, "failed": False,
                        }
                        for i, name in enumerate(ESTIMANDS)
                    ]
                except Exception:
                    rows += _failure_rows(rep, kind, e_kind, "none")
            continue

        for e_kind in estimators:
            estimator = make_estimator(e_kind, analysis)
            for approach in config.variance:
                rng = _method_stream(
                    config.base_seed, rep, kind,
                    salt=100 + VARIANCE_APPROACHES.index(approach) * 10 + (e_kind == "mc"),
                )
                try:
                    if approach == "miboot":
                        pooled = mi_boot(masked, method, estimator, rng,
                                         m=config.m_miboot, b=config.b_boot,
                                         outcome_formula=analysis.outcome)
                    else:
                        pooled = boot_mi(masked, method, estimator, rng,
                                         b=config.b_boot, m=config.m_bootmi,
                                         outcome_formula=analysis.outcome)
                    rows += _rows_from_pooled(rep, kind, e_kind, approach, pooled)
                except Exception:
                    rows += _failure_rows(rep, kind, e_kind, approach)
    return rows


def _blas_single_threaded():
    # Replications are the unit of parallelism; within a worker the linear
    # algebra must stay single-threaded or workers thrash each other's cores.
    try:
        from threadpoolctl import threadpool_limits

        return threadpool_limits(limits=1)
    except Exception:  # pragma: no cover - best effort
        import contextlib

        return contextlib.nullcontext()


def _run_batch(args) -> list[dict]:
    reps, config = args
    out: list[dict] = []
    with _blas_single_threaded():
        for rep in reps:
            out.extend(run_replication(rep, config))
    return out


def run_scenario(config: ScenarioConfig, progress: bool = False) -> pd.DataFrame:
    """Execute every replication and return the raw results table.

    Rows are deterministic for a given ``base_seed`` and sorted by
    (rep, method, estimator, variance, estimand) independent of worker count.
    A method failing in more than 5% of replications is an error.
    """
    reps = list(range(config.reps))
    if config.workers > 1:
        chunks = [reps[i::config.workers] for i in range(config.workers)]
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            parts = list(pool.map(_run_batch, [(c, config) for c in chunks]))
        rows = [r for part in parts for r in part]
    else:
        rows = _run_batch((reps, config))
    raw = pd.DataFrame(rows, columns=RAW_COLUMNS)
    raw = raw.sort_values(["rep", "method", "estimator", "variance", "estimand"],
                          kind="mergesort").reset_index(drop=True)
    ensure_failure_budget(raw)
    return raw


def ensure_failure_budget(raw: pd.DataFrame, share: float = 0.05) -> None:
    """Per-replicate failures are recorded, not fatal, until a method cell
    exceeds the failure budget."""
    fail_share = raw.groupby(["method", "estimator", "variance"])["failed"].mean()
    worst = fail_share.max() if len(fail_share) else 0.0
    if worst > share:
        bad = fail_share.idxmax()
        raise SimulationError(f"method cell {bad} failed in {worst:.1%} of replications")


def compute_metrics(raw: pd.DataFrame, truth: TruthValues) -> pd.DataFrame:
    """Aggregate raw per-replication results into performance metrics.

    Failed replications are excluded (and counted); each cell needs at least
    two successes.  Monte Carlo standard errors follow the usual
    simulation-study formulas: MCSE(bias) = empSE / sqrt(R),
    MCSE(coverage) = sqrt(cov (1-cov) / R), MCSE(empSE) = empSE /
    sqrt(2 (R-1)), and the delta-method combination for the percent error in
    the model-based SE.
    """
    out = []
    for (method, est_kind, variance, estimand), grp in raw.groupby(
        ["method", "estimator", "variance", "estimand"], sort=True
    ):
        ok = grp[~grp["failed"]]
        r = len(ok)
        if r < 2:
            raise SimulationError(
                f"fewer than 2 successful replications in cell "
                f"({method}, {est_kind}, {variance}, {estimand})"
            )
        true_val = truth.value(estimand)
        est = ok["estimate"].to_numpy()
        mean_est = est.mean()
        bias = mean_est - true_val
        emp_se = est.std(ddof=1)
        mcse_bias = emp_se / np.sqrt(r)
        mcse_emp_se = emp_se / np.sqrt(2 * (r - 1))
        row = {
            "schema_version": SCHEMA_VERSION,
            "method": method,
            "estimator": est_kind,
            "variance": variance,
            "estimand": estimand,
            "reps": r,
            "failures": int(grp["failed"].sum()),
            "truth": true_val,
            "mean_estimate": mean_est,
            "absolute_bias": bias,
            "relative_bias_pct": 100.0 * bias / true_val,
            "mcse_relative_bias_pct": 100.0 * mcse_bias / abs(true_val),
            "empirical_se": emp_se,
            "mcse_empirical_se": mcse_emp_se,
        }
        if ok["model_se"].notna().any():
            model_se = ok["model_se"].to_numpy()
            mean_model_se = model_se.mean()
            se_err = 100.0 * (mean_model_se / emp_se - 1.0)
            var_mean_model = model_se.var(ddof=1) / r
            var_emp_se = emp_se**2 / (2 * (r - 1))
            mcse_se_err = 100.0 * np.sqrt(
                var_mean_model / emp_se**2 + mean_model_se**2 * var_emp_se / emp_se**4
            )
            covered = (ok["ci_low"] <= true_val) & (true_val <= ok["ci_high"])
            cov = covered.mean()
            row.update(
                mean_model_se=mean_model_se,
                se_error_pct=se_err,
                mcse_se_error_pct=mcse_se_err,
                coverage_pct=100.0 * cov,
                mcse_coverage_pct=100.0 * np.sqrt(cov * (1 - cov) / r),
            )
        else:
            row.update(
                mean_model_se=np.nan, se_error_pct=np.nan, mcse_se_error_pct=np.nan,
                coverage_pct=np.nan, mcse_coverage_pct=np.nan,
            )
        out.append(row)
    return pd.DataFrame(out)


def write_raw_jsonl(raw: pd.DataFrame, path) -> None:
    with open(path, "w") as fh:
        for rec in raw.to_dict(orient="records"):
            fh.write(json.dumps(rec) + "\n")


def read_raw_jsonl(path) -> pd.DataFrame:
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    raw = pd.DataFrame(records, columns=RAW_COLUMNS)
    versions = set(raw["schema_version"].unique())
    if versions - {SCHEMA_VERSION}:
        raise SimulationError(f"unsupported raw schema versions {versions}")
    return raw


def _format_table(metrics: pd.DataFrame, estimand: str) -> str:
    sub = metrics[metrics["estimand"] == estimand].copy()
    header = (
        f"{'method':<14}{'est.':<5}{'variance':<9}{'relbias%':>9}{'(mcse)':>8}"
        f"{'empSE':>8}{'modSE':>8}{'SEerr%':>8}{'cover%':>8}{'fail':>6}"
    )
    lines = [f"estimand: {estimand}", header, "-" * len(header)]
    for _, r in sub.iterrows():
        lines.append(
            f"{r['method']:<14}{r['estimator']:<5}{r['variance']:<9}"
            f"{r['relative_bias_pct']:>9.2f}{r['mcse_relative_bias_pct']:>8.2f}"
            f"{r['empirical_se']:>8.4f}"
            + (f"{r['mean_model_se']:>8.4f}" if np.isfinite(r["mean_model_se"]) else f"{'-':>8}")
            + (f"{r['se_error_pct']:>8.2f}" if np.isfinite(r["se_error_pct"]) else f"{'-':>8}")
            + (f"{r['coverage_pct']:>8.2f}" if np.isfinite(r["coverage_pct"]) else f"{'-':>8}")
            + f"{r['failures']:>6d}"
        )
    return "\n".join(lines) + "\n"


def report(
    metrics: pd.DataFrame,
    out_dir,
    prefix: str = "scenario",
    plots: bool = False,
) -> list[str]:
    """Write metrics as CSV plus a readable text table per estimand; with
    ``plots``, also emit static relative-bias and SE-error figures."""
    if metrics.empty:
        raise ValueError("no metrics to report")
    os.makedirs(out_dir, exist_ok=True)
    written = []
    csv_path = os.path.join(out_dir, f"{prefix}_metrics.csv")
    metrics.to_csv(csv_path, index=False, float_format="%.6g")
    written.append(csv_path)
    txt_path = os.path.join(out_dir, f"{prefix}_tables.txt")
    with open(txt_path, "w") as fh:
        for estimand in ESTIMANDS:
            if (metrics["estimand"] == estimand).any():
                fh.write(_format_table(metrics, estimand) + "\n")
    written.append(txt_path)
    if plots:
        written += _plot_metrics(metrics, out_dir, prefix)
    return written


def _plot_metrics(metrics: pd.DataFrame, out_dir, prefix: str) -> list[str]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    for column, mcse_col, label in [
        ("relative_bias_pct", "mcse_relative_bias_pct", "relative bias (%)"),
        ("se_error_pct", "mcse_se_error_pct", "% error in model SE"),
    ]:
        sub = metrics[np.isfinite(metrics[column])]
        if sub.empty:
            continue
        estimands = [e for e in ESTIMANDS if (sub["estimand"] == e).any()]
        fig, axes = plt.subplots(
            1, len(estimands), figsize=(5 * len(estimands), 4), squeeze=False
        )
        for ax, estimand in zip(axes[0], estimands):
            cell = sub[sub["estimand"] == estimand]
            labels = [
                f"{m} ({e},{v})"
                for m, e, v in zip(cell["method"], cell["estimator"], cell["variance"])
            ]
            y = np.arange(len(cell))
            ax.errorbar(cell[column], y, xerr=cell[mcse_col], fmt="o", capsize=3)
            ax.axvline(0.0, color="grey", lw=0.8)
            ax.set_yticks(y, labels, fontsize=7)
            ax.set_title(estimand)
            ax.set_xlabel(label)
        fig.tight_layout()
        path = os.path.join(out_dir, f"{prefix}_{column}.png")
        fig.savefig(path, dpi=150)
        plt.close(fig)
        written.append(path)
    return written
