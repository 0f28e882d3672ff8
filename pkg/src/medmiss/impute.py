"""Missing-data handlers.

Complete-case subsetting, multiple imputation by fully conditional
specification (FCS) with configurable univariate predictor sets, and
substantive-model-compatible FCS via rejection sampling.

The imputation strategies differ in which analysis variables and interaction
terms enter each univariate logistic imputation model; ``build_spec`` encodes
the full menu.  All imputation is "proper": each univariate model's
coefficients are drawn from their asymptotic normal approximation before
imputing, so Rubin's rules see genuine between-imputation variability.

The FCS engine runs K chains at once through the batched IRLS core.  Chains
may share one dataset (ordinary multiple imputation) or carry one bootstrap
resample each (the bootstrap-then-impute pipeline); each chain consumes its
own RNG substream, so runs are reproducible and chains stay independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .datagen import ANALYSIS_VARIABLES, Dataset
from .glm import (
    ModelFormula,
    build_design_batch,
    draw_coefficients_batch,
    fit_logistic_batch,
)

VISIT_ORDER = ("C2", "C3", "X", "Z", "Y")
MI_KINDS = (
    "mi-nozy",
    "mi-noy",
    "mi-noint",
    "mi-xint",
    "mi-zint",
    "mi-yint",
    "mi-higherint",
    "mi-smcfcs",
)
METHOD_KINDS = ("cca",) + MI_KINDS

_FIT_RETRIES = 5


class ImputationError(Exception):
    pass


class EmptyCompleteCasesError(Exception):
    pass


@dataclass(frozen=True)
class MissingMethod:
    """One missing-data handling strategy plus its MI settings."""

    kind: str
    m: int = 50
    cycles: int = 10
    auxiliary: tuple[str, ...] = ("A",)

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ValueError(f"unknown method {self.kind!r}; expected one of {METHOD_KINDS}")
        if self.kind != "cca" and (self.m < 1 or self.cycles < 1):
            raise ValueError("MI methods need m >= 1 and cycles >= 1")

    @property
    def is_mi(self) -> bool:
        return self.kind != "cca"

    def validate_estimator(self, estimator: str) -> None:
        if estimator not in ("dr", "mc"):
            raise ValueError(f"unknown estimator kind {estimator!r}")
        if self.kind == "mi-xint" and estimator != "dr":
            raise ValueError("mi-xint is only defined for the doubly robust estimator")
        if self.kind == "mi-zint" and estimator != "mc":
            raise ValueError("mi-zint is only defined for the Monte Carlo estimator")


@dataclass(frozen=True)
class ImputationSpec:
    """Univariate imputation model per incomplete variable, in visit order."""

    formulas: dict[str, ModelFormula]
    visit_order: tuple[str, ...] = VISIT_ORDER

    def __post_init__(self):
        for name, f in self.formulas.items():
            if f.response != name:
                raise ValueError(f"formula response {f.response!r} does not match key {name!r}")
            for t in f.terms:
                if name in t:
                    raise ValueError(f"term {t} involves the imputed variable {name}")


# Main-effect pools per strategy; the imputed variable itself is removed and
# the auxiliary is appended for the incomplete confounders.
_MAIN_POOLS = {
    "mi-nozy": ("C1", "C2", "C3", "X"),
    "mi-noy": ("C1", "C2", "C3", "X", "Z"),
    "mi-noint": ANALYSIS_VARIABLES,
    "mi-xint": ANALYSIS_VARIABLES,
    "mi-zint": ANALYSIS_VARIABLES,
    "mi-yint": ANALYSIS_VARIABLES,
    "mi-higherint": ANALYSIS_VARIABLES,
    "mi-smcfcs": ("C1", "C2", "C3", "X", "Z"),
}

# Interaction sets added on top of the main effects; any interaction that
# contains the variable being imputed is dropped from that variable's model.
_INTERACTIONS = {
    "mi-nozy": (),
    "mi-noy": (),
    "mi-noint": (),
    "mi-xint": (("C1", "C2"), ("C1", "C3")),
    "mi-zint": (("C1", "C2"), ("C1", "C3")),
    "mi-yint": (("X", "Z"), ("C1", "C2"), ("C1", "C3")),
    "mi-higherint": (("X", "Z"), ("C1", "C2"), ("C1", "C3")),
    "mi-smcfcs": (),
}


def build_spec(method: MissingMethod, estimator: str) -> ImputationSpec:
    """Concrete univariate predictor lists for one MI strategy.

    For ``mi-smcfcs`` the returned formulas are the proposal models (the
    outcome is imputed directly from the substantive model and never appears
    as a predictor).
    """
    method.validate_estimator(estimator)
    if method.kind == "cca":
        raise ValueError("complete-case analysis has no imputation models")
    pool = _MAIN_POOLS[method.kind]
    inter = _INTERACTIONS[method.kind]
    targets = VISIT_ORDER if method.kind != "mi-smcfcs" else ("C2", "C3", "X", "Z")
    formulas = {}
    for v in targets:
        terms: list = [p for p in pool if p != v]
        if v in ("C2", "C3"):
            terms = list(method.auxiliary) + terms
        terms += [t for t in inter if v not in t]
        formulas[v] = ModelFormula(v, terms)
    return ImputationSpec(formulas=formulas, visit_order=targets)


@dataclass
class ImputedSet:
    """M completed datasets plus provenance of the run that produced them."""

    datasets: list[dict[str, np.ndarray]]
    method: str
    cycles: int
    fallbacks: int = 0

    @property
    def m(self) -> int:
        return len(self.datasets)


def complete_cases(data: Dataset) -> Dataset:
    """Rows with every analysis variable observed (auxiliaries are ignored)."""
    rows = data.complete_rows(ANALYSIS_VARIABLES)
    if not rows.any():
        raise EmptyCompleteCasesError("no complete cases remain")
    return data.subset(rows)


class _FcsState:
    """K working chains: per-chain values and missingness indicators.

    ``values`` holds the current completed data; masked cells start from
    draws over each chain's observed values so the hidden truth never leaks
    into a chain.
    """

    def __init__(self, values: dict[str, np.ndarray], miss: dict[str, np.ndarray],
                 rngs: list[np.random.Generator]):
        first = next(iter(values.values()))
        self.k, self.n = first.shape
        self.rngs = rngs
        self.dead = np.zeros(self.k, dtype=bool)
        self.warm: dict = {}
        self.miss = {v: m.astype(bool) for v, m in miss.items()}
        self.values = {}
        for v, col in values.items():
            col = col.astype(np.float64).copy()
            col[self.miss[v]] = 0.0
            self.values[v] = col
        for v in values:
            if self.miss[v].any():
                self._draw_marginal(v, np.ones(self.k, dtype=bool))

    @classmethod
    def from_dataset(cls, data: Dataset, m: int, rngs) -> "_FcsState":
        values = {v: np.tile(col, (m, 1)) for v, col in data.values.items()}
        miss = {v: np.tile(mask, (m, 1)) for v, mask in data.mask.items()}
        return cls(values, miss, rngs)

    @classmethod
    def from_resamples(cls, data: Dataset, indices: np.ndarray, rngs) -> "_FcsState":
        values = {v: col[indices] for v, col in data.values.items()}
        miss = {v: mask[indices] for v, mask in data.mask.items()}
        return cls(values, miss, rngs)

    def _draw_marginal(self, v: str, chains: np.ndarray) -> None:
        """Refill chain-local masked cells of ``v`` from observed values."""
        for j in np.flatnonzero(chains):
            miss_j = self.miss[v][j]
            if not miss_j.any():
                continue
            obs_vals = self.values[v][j, ~miss_j]
            if obs_vals.size == 0:
                raise ImputationError(f"variable {v} has no observed values in a chain")
            draw = obs_vals[self.rngs[j].integers(0, obs_vals.size, size=int(miss_j.sum()))]
            self.values[v][j, miss_j] = draw

    def restart_chain(self, j: int) -> None:
        for v in self.values:
            miss_j = self.miss[v][j]
            if miss_j.any():
                obs_vals = self.values[v][j, ~miss_j]
                self.values[v][j, miss_j] = obs_vals[
                    self.rngs[j].integers(0, obs_vals.size, size=int(miss_j.sum()))
                ]

    def fit_and_draw(
        self, formula: ModelFormula, context: str, strict: bool = True
    ) -> tuple[np.ndarray, np.ndarray]:
        """Batched proper fit of one univariate model across chains.

        Returns (designs (K, n, p), drawn coefficients (K, p)).  Chains whose
        fit does not converge are restarted from fresh marginal draws a
        bounded number of times; exhausted retries abort the run when
        ``strict``, otherwise the chain is marked dead and skipped (the
        bootstrap pipelines discard dead chains' replicates).
        """
        v = formula.response
        response = self.values[v]
        obs_w = (~self.miss[v]).astype(np.float64)
        designs = build_design_batch(self.values, formula)
        warm_key = (v, formula.terms)
        coefs, covs, conv, _ = fit_logistic_batch(
            designs, response, obs_w, need_cov=True, start=self.warm.get(warm_key)
        )
        conv |= self.dead  # never reprocess dead chains
        tries = 0
        while not conv.all():
            tries += 1
            if tries > _FIT_RETRIES:
                if strict:
                    bad = int(np.flatnonzero(~conv)[0])
                    raise ImputationError(
                        f"univariate fit failed to converge after {_FIT_RETRIES} restarts "
                        f"({context}, chain {bad})"
                    )
                self.dead |= ~conv
                break
            for j in np.flatnonzero(~conv):
                self.restart_chain(int(j))
            designs = build_design_batch(self.values, formula)
            sub = np.flatnonzero(~conv)
            s_coefs, s_covs, s_conv, _ = fit_logistic_batch(
                designs[sub], response[sub], obs_w[sub], need_cov=True
            )
            coefs[sub], covs[sub] = s_coefs, s_covs
            conv[sub] = s_conv
        if self.dead.any():
            coefs[self.dead] = 0.0
            covs[self.dead] = np.eye(formula.n_coef) * 0.0
        self.warm[warm_key] = coefs.copy()
        normals = np.stack([r.standard_normal(formula.n_coef) for r in self.rngs])
        drawn = draw_coefficients_batch(coefs, covs, normals)
        return designs, drawn

    def impute_from_probs(self, v: str, probs: np.ndarray) -> None:
        """Bernoulli-redraw each chain's masked cells of ``v`` from (K, n) probs."""
        miss = self.miss[v]
        for j, r in enumerate(self.rngs):
            rows = miss[j]
            k = int(rows.sum())
            if k:
                self.values[v][j, rows] = (r.random(k) < probs[j, rows]).astype(np.float64)

    def completed(self) -> list[dict[str, np.ndarray]]:
        return [
            {v: self.values[v][j].astype(np.int8) for v in self.values}
            for j in range(self.k)
        ]


def _run_fcs(state: _FcsState, spec: ImputationSpec, cycles: int, strict: bool = True) -> None:
    targets = [v for v in spec.visit_order if state.miss[v].any()]
    missing_models = {v for v in state.miss if state.miss[v].any()} - set(spec.formulas)
    if missing_models:
        raise ImputationError(
            f"no imputation model for incomplete variables {sorted(missing_models)}"
        )
    for cycle in range(cycles):
        for v in targets:
            formula = spec.formulas[v]
            designs, drawn = state.fit_and_draw(
                formula, f"variable {v}, cycle {cycle + 1}", strict=strict
            )
            probs = expit(np.matmul(designs, drawn[..., None])[..., 0])
            state.impute_from_probs(v, probs)


def mice_fcs(
    data: Dataset,
    spec: ImputationSpec,
    m: int,
    cycles: int,
    rng: np.random.Generator,
) -> ImputedSet:
    """Multiple imputation by fully conditional specification.

    Masked cells are first filled by draws from each variable's observed
    values; each cycle then refits every univariate model on the currently
    observed responses, draws coefficients from the approximate posterior, and
    redraws the masked cells from the implied Bernoulli law.  The M chains are
    independent (own RNG substreams) and returned as completed datasets.
    """
    rngs = list(rng.spawn(m))
    state = _FcsState.from_dataset(data, m, rngs)
    _run_fcs(state, spec, cycles)
    return ImputedSet(datasets=state.completed(), method="fcs", cycles=cycles)


def _run_smcfcs(
    state: _FcsState,
    outcome_formula: ModelFormula,
    proposal_spec: ImputationSpec,
    cycles: int,
    max_rejections: int,
    strict: bool = True,
) -> int:
    y_name = outcome_formula.response
    extra = {v for v in state.miss if state.miss[v].any()} - set(proposal_spec.formulas) - {y_name}
    if extra:
        raise ImputationError(f"no proposal model for incomplete variables {sorted(extra)}")
    covariate_targets = [v for v in proposal_spec.visit_order if state.miss[v].any()]
    impute_y = state.miss[y_name].any()
    fallbacks = 0

    for cycle in range(cycles):
        for v in covariate_targets:
            formula = proposal_spec.formulas[v]
            designs, phi = state.fit_and_draw(
                formula, f"proposal for {v}, cycle {cycle + 1}", strict=strict
            )
            miss = state.miss[v]
            p_prop_full = expit(np.matmul(designs, phi[..., None])[..., 0])

            _, theta = state.fit_and_draw(outcome_formula, "substantive model", strict=strict)
            # Outcome-model likelihood of each row's current outcome at v=0, 1.
            saved = state.values[v]
            lik = np.empty((2, state.k, state.n))
            for val in (0, 1):
                state.values[v] = np.where(miss, float(val), saved)
                o_designs = build_design_batch(state.values, outcome_formula)
                p_y = expit(np.matmul(o_designs, theta[..., None])[..., 0])
                y_cur = state.values[y_name]
                lik[val] = np.where(y_cur == 1, p_y, 1.0 - p_y)
            state.values[v] = saved
            lik_max = np.maximum(lik[0], lik[1])

            for j, r in enumerate(state.rngs):
                rows = np.flatnonzero(miss[j])
                if rows.size == 0:
                    continue
                pending = rows
                for _ in range(max_rejections):
                    if pending.size == 0:
                        break
                    prop = (r.random(pending.size) < p_prop_full[j, pending]).astype(np.float64)
                    l_prop = np.where(prop == 1, lik[1][j, pending], lik[0][j, pending])
                    accept = r.random(pending.size) < l_prop / lik_max[j, pending]
                    state.values[v][j, pending[accept]] = prop[accept]
                    pending = pending[~accept]
                if pending.size:
                    fallbacks += int(pending.size)
                    prop = (r.random(pending.size) < p_prop_full[j, pending]).astype(np.float64)
                    state.values[v][j, pending] = prop

        if impute_y:
            designs, theta = state.fit_and_draw(outcome_formula, "substantive model",
                                                strict=strict)
            probs = expit(np.matmul(designs, theta[..., None])[..., 0])
            state.impute_from_probs(y_name, probs)
    return fallbacks


def smcfcs(
    data: Dataset,
    outcome_formula: ModelFormula,
    aux: tuple[str, ...] = ("A",),
    m: int = 50,
    cycles: int = 10,
    rng: np.random.Generator | None = None,
    max_rejections: int = 1000,
) -> ImputedSet:
    """Substantive-model-compatible FCS.

    Covariates, exposure, and mediator are imputed by rejection sampling: a
    proposal from a univariate logistic model of the variable on the other
    non-outcome variables is accepted with probability equal to the outcome
    model's likelihood of the row's current outcome at the proposed value,
    normalized by its maximum over the binary support.  Cells still
    unaccepted after ``max_rejections`` rounds fall back to the proposal draw
    and are counted.  A masked outcome is drawn directly from the fitted
    substantive model.  The outcome model itself is refit each step on rows
    with the outcome observed, with parameters redrawn per chain.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    proposal_spec = build_spec(
        MissingMethod("mi-smcfcs", m=m, cycles=cycles, auxiliary=tuple(aux)), "dr"
    )
    rngs = list(rng.spawn(m))
    state = _FcsState.from_dataset(data, m, rngs)
    fallbacks = _run_smcfcs(state, outcome_formula, proposal_spec, cycles, max_rejections)
    return ImputedSet(datasets=state.completed(), method="smcfcs", cycles=cycles,
                      fallbacks=fallbacks)


def impute(data: Dataset, method: MissingMethod, estimator: str, rng: np.random.Generator,
           outcome_formula: ModelFormula | None = None, m: int | None = None) -> ImputedSet:
    """Dispatch one MI method: FCS variants via ``build_spec``, or SMC-FCS."""
    m = method.m if m is None else m
    if not method.is_mi:
        raise ValueError("impute() requires an MI method")
    if method.kind == "mi-smcfcs":
        if outcome_formula is None:
            raise ValueError("mi-smcfcs needs the substantive outcome formula")
        return smcfcs(data, outcome_formula, aux=method.auxiliary, m=m,
                      cycles=method.cycles, rng=rng)
    spec = build_spec(method, estimator)
    return mice_fcs(data, spec, m=m, cycles=method.cycles, rng=rng)


def impute_resamples(
    data: Dataset,
    indices: np.ndarray,
    method: MissingMethod,
    estimator: str,
    rng: np.random.Generator,
    outcome_formula: ModelFormula | None = None,
    m: int = 2,
) -> list[list[dict[str, np.ndarray]]]:
    """Impute each of B row-resamples of ``data`` M times, all chains batched.

    ``indices`` has shape (B, n); returns (groups, alive) where ``groups`` is
    a list of B lists of M completed datasets and ``alive`` flags resamples
    whose chains all converged.  This is the bootstrap-then-impute workhorse:
    the B*M chains run through the same batched FCS sweeps.
    """
    if not method.is_mi:
        raise ValueError("impute_resamples() requires an MI method")
    b = indices.shape[0]
    rngs = [child for r in rng.spawn(b) for child in r.spawn(m)]
    stacked = np.repeat(indices, m, axis=0)  # chain order: (b0 m0), (b0 m1), (b1 m0), ...
    state = _FcsState.from_resamples(data, stacked, rngs)
    if method.kind == "mi-smcfcs":
        if outcome_formula is None:
            raise ValueError("mi-smcfcs needs the substantive outcome formula")
        proposal_spec = build_spec(method, "dr")
        _run_smcfcs(state, outcome_formula, proposal_spec, method.cycles, 1000, strict=False)
    else:
        spec = build_spec(method, estimator)
        _run_fcs(state, spec, method.cycles, strict=False)
    completed = state.completed()
    alive = ~state.dead.reshape(b, m).any(axis=1)
    return [completed[i * m:(i + 1) * m] for i in range(b)], alive


def export_imputations_csv(imputed: ImputedSet, path) -> None:
    """All M completed datasets stacked into one CSV with an imputation index."""
    import csv

    names = list(imputed.datasets[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["imputation"] + names)
        for j, ds in enumerate(imputed.datasets, start=1):
            n = len(ds[names[0]])
            for i in range(n):
                writer.writerow([j] + [int(ds[v][i]) for v in names])
