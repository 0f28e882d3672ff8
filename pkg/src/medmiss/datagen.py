"""Synthetic cohort generation and multivariable missingness imposition.

A complete cohort of seven binary variables (auxiliary A, confounders C1-C3,
exposure X, mediator Z, outcome Y) is generated sequentially from logistic
models.  Missingness is then imposed on C2, C3, X, Z, Y through five
missingness-indicator models driven by one of six mechanism specifications
(labelled A-F), each combining substantive parents (log-odds 0.9 per edge)
with a latent common cause W.  Indicator-model intercepts are calibrated so
the marginal missingness proportions hit configured targets.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .glm import ModelFormula, build_design, sample_bernoulli

VARIABLES = ("A", "C1", "C2", "C3", "X", "Z", "Y")
ANALYSIS_VARIABLES = ("C1", "C2", "C3", "X", "Z", "Y")
INCOMPLETE_VARIABLES = ("C2", "C3", "X", "Z", "Y")
MDAG_LABELS = ("A", "B", "C", "D", "E", "F")

# Marginal missingness proportions the default mechanisms are calibrated to,
# plus the overall any-missing share they should produce jointly.
MISSINGNESS_TARGETS = {"C2": 0.31, "C3": 0.26, "X": 0.16, "Z": 0.19, "Y": 0.23}
ANY_MISSING_TARGET = 0.49


class DatagenError(Exception):
    pass


class CalibrationError(DatagenError):
    pass


@dataclass
class Dataset:
    """Rectangular table of binary variables with a per-cell missingness mask.

    ``values`` always holds the underlying truth; ``mask`` marks cells that are
    hidden from analyses.  A and C1 are never masked.  Latent columns (the
    common cause W and the missingness indicators) are retained for
    diagnostics only and are never exposed through the analysis accessors.
    """

    values: dict[str, np.ndarray]
    mask: dict[str, np.ndarray]
    latent: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        n = self.n
        for name in VARIABLES:
            if name not in self.values:
                raise ValueError(f"missing column {name!r}")
            if len(self.values[name]) != n:
                raise ValueError("all columns must have equal length")
            self.mask.setdefault(name, np.zeros(n, dtype=bool))
            if len(self.mask[name]) != n:
                raise ValueError("mask length mismatch")
        for name in ("A", "C1"):
            if self.mask[name].any():
                raise ValueError(f"{name} must never be masked")

    @property
    def n(self) -> int:
        return len(next(iter(self.values.values())))

    def observed(self, name: str) -> np.ndarray:
        """Column as float64 with NaN at masked cells."""
        col = self.values[name].astype(np.float64)
        m = self.mask[name]
        if m.any():
            col[m] = np.nan
        return col

    def columns(self, names=VARIABLES) -> dict[str, np.ndarray]:
        """Analysis view: observed values only, masked cells as NaN."""
        return {name: self.observed(name) for name in names}

    def complete_rows(self, names=ANALYSIS_VARIABLES) -> np.ndarray:
        rows = np.ones(self.n, dtype=bool)
        for name in names:
            rows &= ~self.mask[name]
        return rows

    def any_missing_rows(self, names=ANALYSIS_VARIABLES) -> np.ndarray:
        return ~self.complete_rows(names)

    def subset(self, rows: np.ndarray) -> "Dataset":
        return Dataset(
            values={k: v[rows] for k, v in self.values.items()},
            mask={k: v[rows] for k, v in self.mask.items()},
            latent={k: v[rows] for k, v in self.latent.items()},
        )

    def unmasked_values(self) -> dict[str, np.ndarray]:
        """True underlying values, masks ignored (synthetic diagnostics only)."""
        return {k: v.copy() for k, v in self.values.items()}


@dataclass(frozen=True)
class DgmParams:
    """Per-variable generation models in topological order.

    Each entry pairs a :class:`ModelFormula` (referencing earlier variables
    only) with its coefficient vector ``[intercept, terms...]``.
    """

    models: tuple[tuple[str, ModelFormula, tuple[float, ...]], ...]

    def __post_init__(self):
        seen: list[str] = []
        for name, formula, coefs in self.models:
            if len(coefs) != formula.n_coef:
                raise ValueError(f"coefficient length mismatch for {name}")
            extra = formula.predictors() - set(seen)
            if extra:
                raise ValueError(
                    f"model for {name} references later/undefined variables {sorted(extra)}"
                )
            seen.append(name)

    @property
    def order(self) -> tuple[str, ...]:
        return tuple(name for name, _, _ in self.models)

    def coefficients(self, name: str) -> np.ndarray:
        for v, _, coefs in self.models:
            if v == name:
                return np.asarray(coefs)
        raise KeyError(name)

    def formula(self, name: str) -> ModelFormula:
        for v, formula, _ in self.models:
            if v == name:
                return formula
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {
            name: {"terms": [":".join(t) for t in formula.terms], "coefficients": list(coefs)}
            for name, formula, coefs in self.models
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DgmParams":
        models = tuple(
            (name, ModelFormula(name, spec.get("terms", ())), tuple(spec["coefficients"]))
            for name, spec in d.items()
        )
        return cls(models)


def default_dgm_params() -> DgmParams:
    """Default coefficient tables for the complete-data generating models."""
    return DgmParams(
        models=(
            ("A", ModelFormula("A"), (-0.45,)),
            ("C1", ModelFormula("C1"), (0.10,)),
            ("C2", ModelFormula("C2", ["A"]), (-1.92, 0.63)),
            ("C3", ModelFormula("C3", ["A"]), (-1.40, 0.59)),
            (
                "X",
                ModelFormula("X", ["C1", "C2", "C3", "C1:C2", "C1:C3"]),
                (-2.21, 1.42, 0.28, 1.02, 0.47, 0.11),
            ),
            (
                "Z",
                ModelFormula("Z", ["X", "C1", "C2", "C3", "C1:C2", "C1:C3"]),
                (-2.75, 1.56, 0.31, -0.22, -0.16, 0.22, 0.95),
            ),
            (
                "Y",
                ModelFormula("Y", ["X", "Z", "C1", "C2", "C3", "X:Z", "C1:C2", "C1:C3"]),
                (-2.05, 0.54, 1.34, 0.05, 0.18, 0.51, -0.04, 0.17, -0.76),
            ),
        )
    )


def generate_complete(n: int, params: DgmParams, rng: np.random.Generator) -> Dataset:
    """Draw a complete cohort of size ``n`` by sequential Bernoulli sampling."""
    if n < 1:
        raise ValueError("n must be at least 1")
    columns: dict[str, np.ndarray] = {}
    for name, formula, coefs in params.models:
        design = build_design(columns, formula, n_rows=n)
        probs = expit(design @ np.asarray(coefs))
        columns[name] = sample_bernoulli(probs, rng)
    return Dataset(values=columns, mask={})


@dataclass(frozen=True)
class IndicatorModel:
    """One missingness-indicator model: substantive parents at a common
    log-odds edge coefficient, an optional X*Z interaction edge, the latent-W
    coefficient, and a calibrated intercept."""

    parents: tuple[str, ...]
    w_coef: float
    intercept: float
    xz_coef: float = 0.0


@dataclass(frozen=True)
class MdagSpec:
    """Missingness mechanism: one indicator model per incomplete variable."""

    label: str
    models: dict[str, IndicatorModel]
    w_intercept: float = -1.1
    edge_coef: float = 0.9

    def __post_init__(self):
        for name in INCOMPLETE_VARIABLES:
            if name not in self.models:
                raise ValueError(f"missing indicator model for {name}")
        for name, m in self.models.items():
            bad = set(m.parents) - set(ANALYSIS_VARIABLES)
            if bad:
                raise ValueError(f"unknown parents {sorted(bad)} for indicator of {name}")
            if name == "C2" and "C3" in m.parents or name == "C3" and "C2" in m.parents:
                raise ValueError(
                    f"indicator of {name} cannot depend on the other incomplete confounder"
                )

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "w_intercept": self.w_intercept,
            "edge_coef": self.edge_coef,
            "models": {
                name: {
                    "parents": list(m.parents),
                    "w_coef": m.w_coef,
                    "intercept": m.intercept,
                    "xz_coef": m.xz_coef,
                }
                for name, m in self.models.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MdagSpec":
        return cls(
            label=d["label"],
            w_intercept=d.get("w_intercept", -1.1),
            edge_coef=d.get("edge_coef", 0.9),
            models={
                name: IndicatorModel(
                    parents=tuple(m["parents"]),
                    w_coef=m["w_coef"],
                    intercept=m["intercept"],
                    xz_coef=m.get("xz_coef", 0.0),
                )
                for name, m in d["models"].items()
            },
        )


# Substantive parent sets per mechanism.  Under A only the complete confounder
# C1 (plus W) drives missingness.  Under B the mediator additionally causes
# missingness everywhere, including its own.  Under C the incomplete
# covariates and exposure cause missingness (their own included) but the
# mediator and outcome influence nothing.  D extends C with mediator and
# outcome edges into every indicator except the outcome's own.  E keeps the
# mediator/outcome edges into covariate/exposure indicators but removes any
# mediator/outcome influence on their own indicators.  F is the
# case-study-like mechanism: every incomplete variable causes its own
# missingness, and outcome missingness additionally depends on the exposure.
_MDAG_PARENTS: dict[str, dict[str, tuple[str, ...]]] = {
    "A": {
        "C2": ("C1",),
        "C3": ("C1",),
        "X": ("C1",),
        "Z": ("C1",),
        "Y": ("C1",),
    },
    "B": {
        "C2": ("C1", "C2", "X", "Z"),
        "C3": ("C1", "C3", "X", "Z"),
        "X": ("C1", "C2", "C3", "X", "Z"),
        "Z": ("C1", "C2", "C3", "X", "Z"),
        "Y": ("C1", "C2", "C3", "X", "Z"),
    },
    "C": {
        "C2": ("C1", "C2", "X"),
        "C3": ("C1", "C3", "X"),
        "X": ("C1", "C2", "C3", "X"),
        "Z": ("C1", "C2", "C3", "X"),
        "Y": ("C1", "C2", "C3", "X"),
    },
    "D": {
        "C2": ("C1", "C2", "X", "Z", "Y"),
        "C3": ("C1", "C3", "X", "Z", "Y"),
        "X": ("C1", "C2", "C3", "X", "Z", "Y"),
        "Z": ("C1", "C2", "C3", "X", "Z", "Y"),
        "Y": ("C1", "C2", "C3", "X", "Z"),
    },
    "E": {
        "C2": ("C1", "C2", "X", "Z", "Y"),
        "C3": ("C1", "C3", "X", "Z", "Y"),
        "X": ("C1", "C2", "C3", "X", "Z", "Y"),
        "Z": ("C1", "C2", "C3", "X"),
        "Y": ("C1", "C2", "C3", "X"),
    },
    "F": {
        "C2": ("C1", "C2", "X"),
        "C3": ("C1", "C3", "X"),
        "X": ("C1", "C2", "C3", "X"),
        "Z": ("C1", "Z"),
        "Y": ("C1", "X", "Y"),
    },
}

_MDAG_W_COEFS: dict[str, dict[str, float]] = {
    "A": {"C2": 7.5, "C3": 6.0, "X": 4.5, "Z": 1.5, "Y": 2.7},
    "B": {"C2": 7.5, "C3": 6.5, "X": 5.5, "Z": 1.5, "Y": 2.0},
    "C": {"C2": 7.5, "C3": 6.5, "X": 5.3, "Z": 1.5, "Y": 2.0},
    "D": {"C2": 7.5, "C3": 6.5, "X": 5.5, "Z": 1.4, "Y": 2.0},
    "E": {"C2": 7.5, "C3": 6.5, "X": 5.5, "Z": 1.4, "Y": 2.2},
    "F": {"C2": 7.5, "C3": 6.5, "X": 5.3, "Z": 1.4, "Y": 2.2},
}

# Intercepts produced by calibrate_intercepts against MISSINGNESS_TARGETS
# (n_cal=400000, seed 20240801); rerun calibrate_intercepts if the generation
# parameters or edge sets change.
_MDAG_INTERCEPTS: dict[str, dict[str, float]] = {
    "A": {"C2": -2.9600, "C3": -3.8137, "X": -4.5980, "Z": -2.4808, "Y": -2.7066},
    "B": {"C2": -3.7483, "C3": -4.7581, "X": -6.1652, "Z": -3.4330, "Y": -3.3068},
    "C": {"C2": -3.5200, "C3": -4.5580, "X": -5.8710, "Z": -3.2454, "Y": -3.1343},
    "D": {"C2": -4.0086, "C3": -4.9780, "X": -6.3311, "Z": -3.6129, "Y": -3.3068},
    "E": {"C2": -4.0086, "C3": -4.9780, "X": -6.3311, "Z": -3.2074, "Y": -3.2135},
    "F": {"C2": -3.5200, "C3": -4.5580, "X": -5.8710, "Z": -2.6081, "Y": -2.9854},
}


def default_mdag(label: str) -> MdagSpec:
    """Missingness mechanism spec for one of the six default labels."""
    label = label.upper()
    if label not in MDAG_LABELS:
        raise ValueError(f"unknown mechanism label {label!r}; expected one of {MDAG_LABELS}")
    return MdagSpec(
        label=label,
        models={
            name: IndicatorModel(
                parents=_MDAG_PARENTS[label][name],
                w_coef=_MDAG_W_COEFS[label][name],
                intercept=_MDAG_INTERCEPTS[label][name],
            )
            for name in INCOMPLETE_VARIABLES
        },
    )


def _indicator_linear_part(
    values: dict[str, np.ndarray], model: IndicatorModel, edge_coef: float, w: np.ndarray
) -> np.ndarray:
    """Everything except the intercept in one indicator model's linear predictor."""
    eta = model.w_coef * w.astype(np.float64)
    for parent in model.parents:
        eta += edge_coef * values[parent]
    if model.xz_coef:
        eta += model.xz_coef * values["X"] * values["Z"]
    return eta


def impose_missingness(data: Dataset, mdag: MdagSpec, rng: np.random.Generator) -> Dataset:
    """Draw W and the five missingness indicators, then mask the dataset.

    Underlying values are never altered; indicators and W are kept as latent
    diagnostics.  Requires complete input data.
    """
    if data.any_missing_rows().any():
        raise ValueError("impose_missingness requires complete data")
    n = data.n
    values = {k: v.astype(np.float64) for k, v in data.values.items()}
    w = sample_bernoulli(np.full(n, expit(mdag.w_intercept)), rng)
    latent = {"W": w}
    mask: dict[str, np.ndarray] = {}
    for name in INCOMPLETE_VARIABLES:
        model = mdag.models[name]
        eta = model.intercept + _indicator_linear_part(values, model, mdag.edge_coef, w)
        indicator = sample_bernoulli(expit(eta), rng)
        latent[f"M_{name}"] = indicator
        mask[name] = indicator.astype(bool)
    return Dataset(
        values={k: v.copy() for k, v in data.values.items()},
        mask=mask,
        latent=latent,
    )


def calibrate_intercepts(
    mdag: MdagSpec,
    params: DgmParams,
    targets: dict[str, float] | None = None,
    n_cal: int = 200_000,
    rng: np.random.Generator | None = None,
    tol: float = 0.005,
) -> MdagSpec:
    """Adjust each indicator intercept by bisection so the marginal missingness
    proportion on a large calibration sample hits its target.

    Only intercepts move; edge and W coefficients are untouched.  Raises
    :class:`CalibrationError` when a target cannot be bracketed within
    intercept range [-20, 20].
    """
    targets = dict(MISSINGNESS_TARGETS if targets is None else targets)
    rng = np.random.default_rng(0) if rng is None else rng
    if n_cal < 10_000:
        raise ValueError("n_cal too small for calibration")
    data = generate_complete(n_cal, params, rng)
    values = {k: v.astype(np.float64) for k, v in data.values.items()}
    # W is independent of the substantive variables, so its Bernoulli mixture
    # is integrated out exactly rather than sampled; this keeps repeated
    # calibrations stable to well under the marginal tolerance.
    q_w = float(expit(mdag.w_intercept))

    lo_bound, hi_bound = -20.0, 20.0
    new_models = {}
    for name in INCOMPLETE_VARIABLES:
        target = targets[name]
        if not 0.0 < target < 1.0:
            raise CalibrationError(f"target for {name} must be in (0, 1), got {target}")
        model = mdag.models[name]
        fixed = _indicator_linear_part(values, model, mdag.edge_coef, np.zeros(n_cal))

        def realized(intercept: float) -> float:
            with_w = expit(intercept + fixed + model.w_coef)
            without_w = expit(intercept + fixed)
            return float(np.mean(q_w * with_w + (1.0 - q_w) * without_w))

        lo, hi = lo_bound, hi_bound
        if realized(lo) > target or realized(hi) < target:
            raise CalibrationError(
                f"cannot reach missingness target {target} for {name} "
                f"within intercept range [{lo_bound}, {hi_bound}]"
            )
        for _ in range(100):
            mid = 0.5 * (lo + hi)
            if realized(mid) < target:
                lo = mid
            else:
                hi = mid
            if hi - lo < 1e-10:
                break
        intercept = 0.5 * (lo + hi)
        if abs(realized(intercept) - target) > tol:  # pragma: no cover - bisection converges
            raise CalibrationError(f"calibration failed to converge for {name}")
        new_models[name] = replace(model, intercept=intercept)
    return replace(mdag, models=new_models)


def summarize_missingness(data: Dataset) -> dict[str, float]:
    """Fraction missing per variable plus the any-missing fraction."""
    out = {name: float(data.mask[name].mean()) for name in VARIABLES}
    out["any"] = float(data.any_missing_rows().mean())
    return out


def unmask(data: Dataset) -> Dataset:
    """Copy of ``data`` with every cell observed (synthetic diagnostics only)."""
    return Dataset(values=copy.deepcopy(data.values), mask={}, latent=dict(data.latent))
