"""Point and interval estimation compositions.

Three estimation pipelines share the mediation estimators:

* plain nonparametric bootstrap, for complete-case analysis;
* MI-Boot: impute M datasets, bootstrap within each for its variance, pool
  with Rubin's rules;
* Boot-MI: bootstrap B samples, impute each M times, pool with the
  method-of-moments variance built from a one-way ANOVA over bootstrap groups.

Wald 95% intervals (point +/- 1.96 se) are used throughout.  Bootstrap
replicates whose model fits fail are redrawn a bounded number of times, then
counted and skipped; an excessive failure share is an error because it means
the estimator is too unstable at this sample size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .datagen import Dataset
from .glm import ModelFormula
from .impute import MissingMethod, complete_cases, impute, impute_resamples
from .mediation import (
    AnalysisSpec,
    ESTIMANDS,
    dr_gcomp,
    dr_gcomp_dataset_batch,
    dr_gcomp_weighted_batch,
    mc_gcomp,
    mc_gcomp_dataset_batch,
    mc_gcomp_weighted_batch,
)

Z_95 = 1.959963984540054
_REDRAW_LIMIT = 10
_MAX_FAILURE_SHARE = 0.10


class VarianceError(Exception):
    pass


@dataclass
class PooledResult:
    """Pooled point and interval estimate for one estimand.

    ``within``/``between`` are filled by Rubin pooling; ``sigma2_inf``,
    ``sigma2_wb``, ``msb``, ``msw`` by the Boot-MI moments estimator.
    """

    estimand: str
    point: float
    se: float
    ci_low: float
    ci_high: float
    m: int | None = None
    b: int | None = None
    within: float | None = None
    between: float | None = None
    sigma2_inf: float | None = None
    sigma2_wb: float | None = None
    msb: float | None = None
    msw: float | None = None
    failed: int = 0

    def __post_init__(self):
        if self.se < 0:
            raise ValueError("standard error must be nonnegative")
        if not (self.ci_low <= self.point <= self.ci_high):
            raise ValueError("interval must bracket the point estimate")


class Estimator:
    """Callable mediation estimator with batched fast paths.

    ``batch`` evaluates K frequency-weightings of one dataset (the bootstrap
    trick); ``dataset_batch`` evaluates K distinct completed datasets stacked
    as (K, n) columns.
    """

    kind: str

    def __init__(self, spec: AnalysisSpec):
        self.spec = spec

    def __call__(self, columns, rng=None, freq_weights=None) -> np.ndarray:
        raise NotImplementedError

    def batch(self, columns, weight_matrix, rng) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def dataset_batch(self, columns_stack, rng) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class DrEstimator(Estimator):
    kind = "dr"

    def __call__(self, columns, rng=None, freq_weights=None) -> np.ndarray:
        return dr_gcomp(columns, self.spec, freq_weights=freq_weights).as_array()

    def batch(self, columns, weight_matrix, rng):
        return dr_gcomp_weighted_batch(columns, self.spec, weight_matrix)

    def dataset_batch(self, columns_stack, rng):
        return dr_gcomp_dataset_batch(columns_stack, self.spec)


class McEstimator(Estimator):
    kind = "mc"

    def __call__(self, columns, rng=None, freq_weights=None) -> np.ndarray:
        if rng is None:
            raise ValueError("the Monte Carlo estimator needs an RNG")
        return mc_gcomp(columns, self.spec, rng, freq_weights=freq_weights).as_array()

    def batch(self, columns, weight_matrix, rng):
        return mc_gcomp_weighted_batch(columns, self.spec, weight_matrix, rng)

    def dataset_batch(self, columns_stack, rng):
        return mc_gcomp_dataset_batch(columns_stack, self.spec, rng)


def make_estimator(kind: str, spec: AnalysisSpec) -> Estimator:
    if kind == "dr":
        return DrEstimator(spec)
    if kind == "mc":
        return McEstimator(spec)
    raise ValueError(f"unknown estimator kind {kind!r}")


def _bootstrap_weights(n: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """K with-replacement samples of size n, encoded as count vectors."""
    idx = rng.integers(0, n, size=(k, n))
    counts = np.zeros((k, n), dtype=np.float64)
    np.add.at(counts, (np.repeat(np.arange(k), n), idx.ravel()), 1.0)
    return counts


def boot_variance(
    columns: Mapping[str, np.ndarray],
    estimator: Estimator,
    b: int,
    rng: np.random.Generator,
    base_weights: np.ndarray | None = None,
) -> tuple[np.ndarray, int]:
    """Nonparametric bootstrap variance of the estimator's three effects.

    Resamples are expressed as frequency weights over the given rows (zero
    drops a row); ``base_weights`` restricts attention to a sub-multiset, so
    complete-case pipelines can resample the full dataset and zero out
    incomplete rows.  Returns (variance per estimand, skipped replicates).
    """
    if b < 2:
        raise ValueError("bootstrap needs at least 2 replicates")
    n = len(next(iter(columns.values())))
    estimates = np.empty((b, len(ESTIMANDS)))
    done = np.zeros(b, dtype=bool)
    skipped = 0
    for _ in range(_REDRAW_LIMIT + 1):
        todo = np.flatnonzero(~done)
        if todo.size == 0:
            break
        weights = _bootstrap_weights(n, todo.size, rng)
        if base_weights is not None:
            weights *= base_weights[None, :]
        effects, ok = estimator.batch(columns, weights, rng)
        estimates[todo[ok]] = effects[ok]
        done[todo[ok]] = True
    skipped = int((~done).sum())
    if skipped > _MAX_FAILURE_SHARE * b:
        raise VarianceError(
            f"{skipped}/{b} bootstrap replicates failed; estimator unstable at this size"
        )
    kept = estimates[done]
    return kept.var(axis=0, ddof=1), skipped


def rubin_pool(
    estimates: np.ndarray,
    variances: np.ndarray,
    estimand: str = "",
    failed: int = 0,
) -> PooledResult:
    """Rubin's rules: total variance = within + (1 + 1/M) * between."""
    est = np.asarray(estimates, dtype=np.float64)
    var = np.asarray(variances, dtype=np.float64)
    if est.ndim != 1 or est.shape != var.shape or len(est) < 2:
        raise ValueError("need at least two paired estimates and variances")
    m = len(est)
    point = float(est.mean())
    within = float(var.mean())
    between = float(est.var(ddof=1))
    total = within + (1.0 + 1.0 / m) * between
    se = float(np.sqrt(total))
    return PooledResult(
        estimand=estimand,
        point=point,
        se=se,
        ci_low=point - Z_95 * se,
        ci_high=point + Z_95 * se,
        m=m,
        within=within,
        between=between,
        failed=failed,
    )


def mi_boot(
    data: Dataset,
    method: MissingMethod,
    estimator: Estimator,
    rng: np.random.Generator,
    m: int | None = None,
    b: int = 200,
    outcome_formula: ModelFormula | None = None,
) -> dict[str, PooledResult]:
    """Impute M datasets; within each, bootstrap the analysis for its
    variance; pool points and variances with Rubin's rules."""
    if not method.is_mi:
        raise ValueError("mi_boot requires an MI method")
    m = method.m if m is None else m
    outcome_formula = estimator.spec.outcome if outcome_formula is None else outcome_formula
    imputed = impute(data, method, estimator.kind, rng, outcome_formula=outcome_formula, m=m)
    stack = {
        v: np.stack([ds[v] for ds in imputed.datasets]).astype(np.float64)
        for v in imputed.datasets[0]
    }
    points, ok = estimator.dataset_batch(stack, rng)
    if not ok.all():
        raise VarianceError("analysis failed on an imputed dataset")
    variances = np.empty((m, len(ESTIMANDS)))
    skipped = 0
    for j, ds in enumerate(imputed.datasets):
        cols = {k: v.astype(np.float64) for k, v in ds.items()}
        variances[j], sk = boot_variance(cols, estimator, b, rng)
        skipped += sk
    return {
        name: rubin_pool(points[:, i], variances[:, i], estimand=name, failed=skipped)
        for i, name in enumerate(ESTIMANDS)
    }


def pool_boot_mi(values: np.ndarray, estimand: str = "", skipped: int = 0) -> PooledResult:
    """Method-of-moments pooling of a complete (B, M) grid of estimates."""
    kept = np.asarray(values, dtype=np.float64)
    b_eff, m = kept.shape
    msb, msw = _anova_moments(kept)
    sigma2_inf = max(0.0, (msb - msw) / m)
    sigma2_wb = msw
    var = (1.0 + 1.0 / b_eff) * sigma2_inf + sigma2_wb / (b_eff * m)
    point = float(kept.mean())
    se = float(np.sqrt(var))
    return PooledResult(
        estimand=estimand,
        point=point,
        se=se,
        ci_low=point - Z_95 * se,
        ci_high=point + Z_95 * se,
        m=m,
        b=b_eff,
        sigma2_inf=sigma2_inf,
        sigma2_wb=sigma2_wb,
        msb=msb,
        msw=msw,
        failed=skipped,
    )


def _anova_moments(values: np.ndarray) -> tuple[float, float]:
    """(MSB, MSW) of a complete one-way layout with groups on axis 0."""
    b, m = values.shape
    group_means = values.mean(axis=1)
    grand = values.mean()
    msb = m * np.sum((group_means - grand) ** 2) / (b - 1)
    msw = np.sum((values - group_means[:, None]) ** 2) / (b * (m - 1))
    return float(msb), float(msw)


def boot_mi(
    data: Dataset,
    method: MissingMethod,
    estimator: Estimator,
    rng: np.random.Generator,
    b: int = 200,
    m: int = 2,
    outcome_formula: ModelFormula | None = None,
) -> dict[str, PooledResult]:
    """Bootstrap the masked data, impute each sample M times, and pool with
    the method-of-moments variance
    (1 + 1/B) * sigma2_inf + sigma2_wb / (B M),
    where sigma2_inf = max(0, (MSB - MSW) / M) and sigma2_wb = MSW from the
    one-way ANOVA of the B x M estimates."""
    if not method.is_mi:
        raise ValueError("boot_mi requires an MI method")
    if b < 2 or m < 2:
        raise ValueError("boot_mi needs b >= 2 and m >= 2")
    outcome_formula = estimator.spec.outcome if outcome_formula is None else outcome_formula
    n = data.n
    values = np.empty((b, m, len(ESTIMANDS)))
    done = np.zeros(b, dtype=bool)
    for _ in range(_REDRAW_LIMIT + 1):
        todo = np.flatnonzero(~done)
        if todo.size == 0:
            break
        indices = rng.integers(0, n, size=(todo.size, n))
        groups, alive = impute_resamples(
            data, indices, method, estimator.kind, rng,
            outcome_formula=outcome_formula, m=m,
        )
        flat = [ds for grp in groups for ds in grp]
        stack = {
            v: np.stack([ds[v] for ds in flat]).astype(np.float64)
            for v in flat[0]
        }
        effects, ok = estimator.dataset_batch(stack, rng)
        ok = ok.reshape(todo.size, m).all(axis=1) & alive
        grp_effects = effects.reshape(todo.size, m, len(ESTIMANDS))
        values[todo[ok]] = grp_effects[ok]
        done[todo[ok]] = True
    skipped = int((~done).sum())
    if skipped > _MAX_FAILURE_SHARE * b:
        raise VarianceError(f"{skipped}/{b} bootstrap samples failed end-to-end")
    kept = values[done]
    return {
        name: pool_boot_mi(kept[:, :, i], estimand=name, skipped=skipped)
        for i, name in enumerate(ESTIMANDS)
    }


def cca_boot(
    data: Dataset,
    estimator: Estimator,
    rng: np.random.Generator,
    b: int = 200,
) -> dict[str, PooledResult]:
    """Complete-case analysis with plain bootstrap Wald intervals.

    The bootstrap resamples the full masked dataset and re-applies the
    complete-case restriction within each replicate, so the varying complete
    count is part of the variance."""
    cc = complete_cases(data)
    cols = cc.columns()
    point = estimator(cols, rng=rng)
    # Resample all rows of the masked data; incomplete rows carry weight zero
    # inside the analysis but still occupy resampling slots.
    keep = data.complete_rows()
    full_cols = {k: np.where(keep, data.values[k], 0).astype(np.float64) for k in data.values}
    var, skipped = boot_variance(full_cols, estimator, b, rng,
                                 base_weights=keep.astype(np.float64))
    out = {}
    for i, name in enumerate(ESTIMANDS):
        se = float(np.sqrt(var[i]))
        out[name] = PooledResult(
            estimand=name,
            point=float(point[i]),
            se=se,
            ci_low=float(point[i]) - Z_95 * se,
            ci_high=float(point[i]) + Z_95 * se,
            b=b,
            failed=skipped,
        )
    return out
