"""Interventional indirect/direct effect estimation on the risk-difference scale.

Two estimators of the three potential-outcome means P(Y^{X=1,B=0}),
P(Y^{X=0,B=0}), P(Y^{X=1,B=1}):

* doubly robust g-computation: outcome-model predictions averaged with
  stabilized inverse-probability-of-exposure weights;
* Monte Carlo g-computation: mediator values redrawn from a fitted mediator
  model, outcome-model predictions averaged over individuals and draws.

An exact enumeration oracle over finite binary supports backs the test suite.
Both estimators accept frequency weights so that bootstrap resamples and
exhaustive population tables can reuse the same code path.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Mapping

import numpy as np
from scipy.special import expit

from .glm import (
    FittedGlm,
    ModelFormula,
    NotConvergedError,
    build_design,
    build_design_batch,
    fit_logistic,
    fit_logistic_batch,
    predict_prob,
    sample_bernoulli,
)

PROPENSITY_EPS = 1e-6


class EstimationError(Exception):
    pass


class PositivityError(EstimationError):
    """Conditional exposure probability numerically 0 or 1 in some stratum."""


@dataclass(frozen=True)
class MediationEstimate:
    """Three potential-outcome means; effects are derived identities."""

    p10: float
    p00: float
    p11: float

    def __post_init__(self):
        for name in ("p10", "p00", "p11"):
            v = getattr(self, name)
            if not -1e-9 <= v <= 1 + 1e-9:
                raise ValueError(f"{name}={v} outside [0, 1]")

    @property
    def indirect(self) -> float:
        return self.p10 - self.p11

    @property
    def direct(self) -> float:
        return self.p11 - self.p00

    @property
    def total(self) -> float:
        return self.indirect + self.direct

    def as_array(self) -> np.ndarray:
        return np.array([self.indirect, self.direct, self.total])


ESTIMANDS = ("indirect", "direct", "total")


@dataclass(frozen=True)
class AnalysisSpec:
    """Model formulas for one analysis plus the Monte Carlo draw count."""

    propensity: ModelFormula
    mediator: ModelFormula
    outcome: ModelFormula
    mc_draws: int = 50

    def __post_init__(self):
        x, z = self.propensity.response, self.mediator.response
        if (x, z) not in self.outcome.terms and (z, x) not in self.outcome.terms:
            raise ValueError("outcome formula must include the exposure-mediator interaction")
        if self.mc_draws < 1:
            raise ValueError("mc_draws must be at least 1")

    @property
    def exposure(self) -> str:
        return self.propensity.response

    @property
    def mediator_name(self) -> str:
        return self.mediator.response

    @property
    def outcome_name(self) -> str:
        return self.outcome.response


def default_analysis_spec(mc_draws: int = 50) -> AnalysisSpec:
    """Correctly specified models for the default generating process."""
    return AnalysisSpec(
        propensity=ModelFormula("X", ["C1", "C2", "C3", "C1:C2", "C1:C3"]),
        mediator=ModelFormula("Z", ["X", "C1", "C2", "C3", "C1:C2", "C1:C3"]),
        outcome=ModelFormula("Y", ["X", "Z", "C1", "C2", "C3", "X:Z", "C1:C2", "C1:C3"]),
        mc_draws=mc_draws,
    )


def _require_converged(fit: FittedGlm, what: str) -> FittedGlm:
    if not fit.converged:
        raise NotConvergedError(f"{what} model did not converge: {fit.diagnostic}")
    return fit


def stabilized_weights(
    columns: Mapping[str, np.ndarray],
    propensity_fit: FittedGlm,
    exposure: str = "X",
    freq_weights: np.ndarray | None = None,
) -> np.ndarray:
    """Stabilized inverse-probability weights P(X=x_i) / P(X=x_i | C_i).

    Conditional probabilities within ``PROPENSITY_EPS`` of 0 or 1 raise
    :class:`PositivityError` naming the offending rows; weights are never
    silently truncated.
    """
    _require_converged(propensity_fit, "propensity")
    x = np.asarray(columns[exposure], dtype=np.float64)
    design = build_design(columns, propensity_fit.formula)
    cond_p1 = predict_prob(propensity_fit, design)
    bad = (cond_p1 < PROPENSITY_EPS) | (cond_p1 > 1 - PROPENSITY_EPS)
    if bad.any():
        idx = np.flatnonzero(bad)[:5]
        raise PositivityError(
            f"conditional exposure probability numerically 0/1 for rows {idx.tolist()}"
        )
    w = np.ones_like(x) if freq_weights is None else np.asarray(freq_weights, dtype=np.float64)
    marg_p1 = float(np.sum(w * x) / np.sum(w))
    conditional = np.where(x == 1, cond_p1, 1.0 - cond_p1)
    marginal = np.where(x == 1, marg_p1, 1.0 - marg_p1)
    return marginal / conditional


def _weighted_potentials(
    x: np.ndarray,
    pred_obs: np.ndarray,
    pred_x1: np.ndarray,
    weights: np.ndarray,
) -> MediationEstimate:
    """Normalized (Hajek) weighted averages defining the three potential means."""
    exposed = x == 1
    w1, w0 = weights[exposed], weights[~exposed]
    if w1.sum() <= 0 or w0.sum() <= 0:
        raise EstimationError("an exposure stratum carries no weight")
    p10 = float(np.sum(w1 * pred_obs[exposed]) / w1.sum())
    p00 = float(np.sum(w0 * pred_obs[~exposed]) / w0.sum())
    p11 = float(np.sum(w0 * pred_x1[~exposed]) / w0.sum())
    return MediationEstimate(p10=p10, p00=p00, p11=p11)


def dr_gcomp(
    columns: Mapping[str, np.ndarray],
    spec: AnalysisSpec,
    freq_weights: np.ndarray | None = None,
) -> MediationEstimate:
    """Doubly robust g-computation.

    Fits the propensity and outcome models, forms stabilized weights, and
    averages outcome predictions: over exposed rows at their observed exposure
    and mediator for p10, over unexposed rows for p00, and over unexposed rows
    with the exposure switched to 1 (in every term it appears in) for p11.
    """
    x = np.asarray(columns[spec.exposure], dtype=np.float64)
    p_design = build_design(columns, spec.propensity)
    p_fit = _require_converged(
        fit_logistic(p_design, x, weights=freq_weights, formula=spec.propensity), "propensity"
    )
    sw = stabilized_weights(columns, p_fit, spec.exposure, freq_weights)
    y = np.asarray(columns[spec.outcome_name], dtype=np.float64)
    o_design = build_design(columns, spec.outcome)
    o_fit = _require_converged(
        fit_logistic(o_design, y, weights=freq_weights, formula=spec.outcome), "outcome"
    )
    pred_obs = predict_prob(o_fit, o_design)
    cf = dict(columns)
    cf[spec.exposure] = np.ones_like(x)
    pred_x1 = predict_prob(o_fit, build_design(cf, spec.outcome))
    w = sw if freq_weights is None else sw * np.asarray(freq_weights, dtype=np.float64)
    return _weighted_potentials(x, pred_obs, pred_x1, w)


def mc_gcomp(
    columns: Mapping[str, np.ndarray],
    spec: AnalysisSpec,
    rng: np.random.Generator,
    freq_weights: np.ndarray | None = None,
    return_draw_means: bool = False,
):
    """Monte Carlo simulation-based g-computation.

    Fits the mediator and outcome models, then for each arm redraws the
    mediator ``spec.mc_draws`` times from the mediator model at the designated
    exposure level and averages outcome predictions over individuals and
    draws: p10 predicts at X=1 with Z* | X=1, p00 at X=0 with Z* | X=0, and
    p11 at X=1 with Z* | X=0.
    """
    x = np.asarray(columns[spec.exposure], dtype=np.float64)
    z_name, y_name = spec.mediator_name, spec.outcome_name
    m_design = build_design(columns, spec.mediator)
    m_fit = _require_converged(
        fit_logistic(m_design, np.asarray(columns[z_name], dtype=np.float64),
                     weights=freq_weights, formula=spec.mediator),
        "mediator",
    )
    o_design = build_design(columns, spec.outcome)
    o_fit = _require_converged(
        fit_logistic(o_design, np.asarray(columns[y_name], dtype=np.float64),
                     weights=freq_weights, formula=spec.outcome),
        "outcome",
    )
    w = np.ones_like(x) if freq_weights is None else np.asarray(freq_weights, dtype=np.float64)
    wsum = w.sum()
    if wsum <= 0:
        raise EstimationError("frequency weights sum to zero")

    def arm(x_draw: float, x_pred: float) -> tuple[float, np.ndarray]:
        cf = dict(columns)
        cf[spec.exposure] = np.full_like(x, x_draw)
        pz = predict_prob(m_fit, build_design(cf, spec.mediator))
        cf[spec.exposure] = np.full_like(x, x_pred)
        cf[z_name] = np.zeros_like(x)
        eta0 = build_design(cf, spec.outcome) @ o_fit.coefficients
        cf[z_name] = np.ones_like(x)
        eta1 = build_design(cf, spec.outcome) @ o_fit.coefficients
        draws = sample_bernoulli(np.broadcast_to(pz, (spec.mc_draws, len(x))), rng)
        preds = expit(np.where(draws == 1, eta1, eta0))
        per_draw = preds @ w / wsum
        return float(per_draw.mean()), per_draw

    p10, d10 = arm(1.0, 1.0)
    p00, d00 = arm(0.0, 0.0)
    p11, d11 = arm(0.0, 1.0)
    est = MediationEstimate(p10=p10, p00=p00, p11=p11)
    if return_draw_means:
        return est, {"p10": d10, "p00": d00, "p11": d11}
    return est


def exact_oracle(joint: np.ndarray) -> MediationEstimate:
    """Exact evaluation of the three potential-outcome means by summation.

    ``joint`` is a probability table over (confounders..., X, Z, Y): the last
    three axes are exposure, mediator, outcome; any leading axes are binary
    confounders.  Derives the confounder marginal, mediator conditional, and
    outcome conditional from the table and sums over the finite support.  No
    sampling error.
    """
    table = np.asarray(joint, dtype=np.float64)
    if table.ndim < 3 or any(s != 2 for s in table.shape):
        raise ValueError("joint must have shape (2,)*k with k >= 3 (confounders..., X, Z, Y)")
    if (table < 0).any() or abs(table.sum() - 1.0) > 1e-9:
        raise ValueError("joint table is not a normalized probability distribution")
    n_conf = table.ndim - 3
    p10 = p00 = p11 = 0.0
    for c in product((0, 1), repeat=n_conf):
        block = table[c]  # (2, 2, 2) over (X, Z, Y)
        pc = block.sum()
        if pc == 0.0:
            continue
        px = block.sum(axis=(1, 2))  # P(c, X=x)
        if px[0] == 0.0 or px[1] == 0.0:
            raise ValueError(f"exposure positivity violated in confounder stratum {c}")
        for z in (0, 1):
            pz_x1 = block[1, z].sum() / px[1]
            pz_x0 = block[0, z].sum() / px[0]
            pxz1 = block[1, z].sum()
            pxz0 = block[0, z].sum()
            py_x1z = block[1, z, 1] / pxz1 if pxz1 > 0 else 0.0
            py_x0z = block[0, z, 1] / pxz0 if pxz0 > 0 else 0.0
            if pz_x1 > 0 and pxz1 == 0:  # pragma: no cover - defensive
                raise ValueError(f"outcome law undefined at X=1, Z={z}, C={c}")
            p10 += pc * pz_x1 * py_x1z
            p00 += pc * pz_x0 * py_x0z
            p11 += pc * pz_x0 * py_x1z
    return MediationEstimate(p10=float(p10), p00=float(p00), p11=float(p11))


def dr_gcomp_weighted_batch(
    columns: Mapping[str, np.ndarray],
    spec: AnalysisSpec,
    weight_matrix: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Doubly robust g-computation across K weight vectors over one dataset.

    The batched twin of :func:`dr_gcomp` used by the bootstrap: row ``k`` of
    ``weight_matrix`` plays the role of frequency weights (zero drops a row).
    Returns (effects (K, 3) ordered indirect/direct/total, ok (K,) flags).
    Rows whose fits fail are flagged, not raised.
    """
    W = np.asarray(weight_matrix, dtype=np.float64)
    K = W.shape[0]
    x = np.asarray(columns[spec.exposure], dtype=np.float64)
    y = np.asarray(columns[spec.outcome_name], dtype=np.float64)
    p_design = build_design(columns, spec.propensity)
    o_design = build_design(columns, spec.outcome)
    cf = dict(columns)
    cf[spec.exposure] = np.ones_like(x)
    o_design_x1 = build_design(cf, spec.outcome)

    base_w = W.mean(axis=0, keepdims=True)
    p_base, _, p_base_ok, _ = fit_logistic_batch(p_design, x[None, :], base_w)
    o_base, _, o_base_ok, _ = fit_logistic_batch(o_design, y[None, :], base_w)
    p_coefs, _, p_ok, _ = fit_logistic_batch(
        p_design, np.broadcast_to(x, (K, len(x))), W,
        start=p_base[0] if p_base_ok[0] else None,
    )
    o_coefs, _, o_ok, _ = fit_logistic_batch(
        o_design, np.broadcast_to(y, (K, len(y))), W,
        start=o_base[0] if o_base_ok[0] else None,
    )
    ok = p_ok & o_ok

    cond_p1 = expit(p_coefs @ p_design.T)  # (K, n)
    pos_bad = ((cond_p1 < PROPENSITY_EPS) | (cond_p1 > 1 - PROPENSITY_EPS)) & (W > 0)
    ok &= ~pos_bad.any(axis=1)

    wsum = W.sum(axis=1)
    ok &= wsum > 0
    safe_wsum = np.where(wsum > 0, wsum, 1.0)
    marg_p1 = (W @ x) / safe_wsum  # (K,)
    conditional = np.where(x[None, :] == 1, cond_p1, 1.0 - cond_p1)
    marginal = np.where(x[None, :] == 1, marg_p1[:, None], 1.0 - marg_p1[:, None])
    sw = np.where(conditional > 0, marginal / np.maximum(conditional, 1e-300), np.inf)
    w_all = sw * W

    pred_obs = expit(o_coefs @ o_design.T)
    pred_x1 = expit(o_coefs @ o_design_x1.T)
    exposed = x == 1
    w1 = np.where(exposed[None, :], w_all, 0.0)
    w0 = np.where(~exposed[None, :], w_all, 0.0)
    s1, s0 = w1.sum(axis=1), w0.sum(axis=1)
    ok &= (s1 > 0) & (s0 > 0)
    s1 = np.where(s1 > 0, s1, 1.0)
    s0 = np.where(s0 > 0, s0, 1.0)
    p10 = (w1 * pred_obs).sum(axis=1) / s1
    p00 = (w0 * pred_obs).sum(axis=1) / s0
    p11 = (w0 * pred_x1).sum(axis=1) / s0
    effects = np.column_stack([p10 - p11, p11 - p00, p10 - p00])
    return effects, ok


def dr_gcomp_dataset_batch(
    columns: Mapping[str, np.ndarray],
    spec: AnalysisSpec,
) -> tuple[np.ndarray, np.ndarray]:
    """Doubly robust g-computation across K distinct complete datasets.

    ``columns`` maps each variable to a (K, n) stack (one completed dataset
    per row, e.g. the chains of a bootstrap-then-impute run).  Returns
    (effects (K, 3), ok (K,)).
    """
    x = np.asarray(columns[spec.exposure], dtype=np.float64)
    y = np.asarray(columns[spec.outcome_name], dtype=np.float64)
    K, n = x.shape
    p_designs = build_design_batch(columns, spec.propensity)
    o_designs = build_design_batch(columns, spec.outcome)
    cf = dict(columns)
    cf[spec.exposure] = np.ones_like(x)
    o_designs_x1 = build_design_batch(cf, spec.outcome)

    p_first, _, p_f_ok, _ = fit_logistic_batch(p_designs[:1], x[:1])
    o_first, _, o_f_ok, _ = fit_logistic_batch(o_designs[:1], y[:1])
    p_coefs, _, p_ok, _ = fit_logistic_batch(
        p_designs, x, start=p_first[0] if p_f_ok[0] else None)
    o_coefs, _, o_ok, _ = fit_logistic_batch(
        o_designs, y, start=o_first[0] if o_f_ok[0] else None)
    ok = p_ok & o_ok

    cond_p1 = expit(np.matmul(p_designs, p_coefs[..., None])[..., 0])
    ok &= ~((cond_p1 < PROPENSITY_EPS) | (cond_p1 > 1 - PROPENSITY_EPS)).any(axis=1)
    marg_p1 = x.mean(axis=1)
    conditional = np.where(x == 1, cond_p1, 1.0 - cond_p1)
    marginal = np.where(x == 1, marg_p1[:, None], 1.0 - marg_p1[:, None])
    sw = marginal / np.maximum(conditional, 1e-300)

    pred_obs = expit(np.matmul(o_designs, o_coefs[..., None])[..., 0])
    pred_x1 = expit(np.matmul(o_designs_x1, o_coefs[..., None])[..., 0])
    exposed = x == 1
    w1 = np.where(exposed, sw, 0.0)
    w0 = np.where(~exposed, sw, 0.0)
    s1, s0 = w1.sum(axis=1), w0.sum(axis=1)
    ok &= (s1 > 0) & (s0 > 0)
    s1 = np.where(s1 > 0, s1, 1.0)
    s0 = np.where(s0 > 0, s0, 1.0)
    p10 = (w1 * pred_obs).sum(axis=1) / s1
    p00 = (w0 * pred_obs).sum(axis=1) / s0
    p11 = (w0 * pred_x1).sum(axis=1) / s0
    return np.column_stack([p10 - p11, p11 - p00, p10 - p00]), ok


def mc_gcomp_dataset_batch(
    columns: Mapping[str, np.ndarray],
    spec: AnalysisSpec,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo g-computation across K distinct complete datasets."""
    x = np.asarray(columns[spec.exposure], dtype=np.float64)
    z = np.asarray(columns[spec.mediator_name], dtype=np.float64)
    y = np.asarray(columns[spec.outcome_name], dtype=np.float64)
    K, n = x.shape
    m_designs = build_design_batch(columns, spec.mediator)
    o_designs = build_design_batch(columns, spec.outcome)
    m_first, _, m_f_ok, _ = fit_logistic_batch(m_designs[:1], z[:1])
    o_first, _, o_f_ok, _ = fit_logistic_batch(o_designs[:1], y[:1])
    m_coefs, _, m_ok, _ = fit_logistic_batch(
        m_designs, z, start=m_first[0] if m_f_ok[0] else None)
    o_coefs, _, o_ok, _ = fit_logistic_batch(
        o_designs, y, start=o_first[0] if o_f_ok[0] else None)
    ok = m_ok & o_ok

    def etas(x_val: float, z_val: float, formula, coefs) -> np.ndarray:
        cf = dict(columns)
        cf[spec.exposure] = np.full((K, n), x_val)
        cf[spec.mediator_name] = np.full((K, n), z_val)
        designs = build_design_batch(cf, formula)
        return np.matmul(designs, coefs[..., None])[..., 0]

    arm_means = np.empty((K, 3))
    for a, (x_draw, x_pred) in enumerate([(1.0, 1.0), (0.0, 0.0), (0.0, 1.0)]):
        pz = expit(etas(x_draw, 0.0, spec.mediator, m_coefs))
        eta0 = etas(x_pred, 0.0, spec.outcome, o_coefs)
        eta1 = etas(x_pred, 1.0, spec.outcome, o_coefs)
        acc = np.zeros(K)
        for _ in range(spec.mc_draws):
            draws = rng.random((K, n)) < pz
            acc += expit(np.where(draws, eta1, eta0)).mean(axis=1)
        arm_means[:, a] = acc / spec.mc_draws
    p10, p00, p11 = arm_means[:, 0], arm_means[:, 1], arm_means[:, 2]
    return np.column_stack([p10 - p11, p11 - p00, p10 - p00]), ok


def mc_gcomp_weighted_batch(
    columns: Mapping[str, np.ndarray],
    spec: AnalysisSpec,
    weight_matrix: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Monte Carlo g-computation across K weight vectors over one dataset.

    Mediator draws are taken once per distinct row per Monte Carlo repetition
    and weighted, which estimates the same quantities as materializing each
    resample.  Returns (effects (K, 3), ok (K,)).
    """
    W = np.asarray(weight_matrix, dtype=np.float64)
    K, n = W.shape
    x = np.asarray(columns[spec.exposure], dtype=np.float64)
    z = np.asarray(columns[spec.mediator_name], dtype=np.float64)
    y = np.asarray(columns[spec.outcome_name], dtype=np.float64)
    m_design = build_design(columns, spec.mediator)
    o_design = build_design(columns, spec.outcome)

    base_w = W.mean(axis=0, keepdims=True)
    m_base, _, m_base_ok, _ = fit_logistic_batch(m_design, z[None, :], base_w)
    o_base, _, o_base_ok, _ = fit_logistic_batch(o_design, y[None, :], base_w)
    m_coefs, _, m_ok, _ = fit_logistic_batch(
        m_design, np.broadcast_to(z, (K, n)), W,
        start=m_base[0] if m_base_ok[0] else None,
    )
    o_coefs, _, o_ok, _ = fit_logistic_batch(
        o_design, np.broadcast_to(y, (K, n)), W,
        start=o_base[0] if o_base_ok[0] else None,
    )
    ok = m_ok & o_ok
    wsum = W.sum(axis=1)
    ok &= wsum > 0
    safe_wsum = np.where(wsum > 0, wsum, 1.0)

    def designs_at(x_val: float, z_val: float, formula: ModelFormula) -> np.ndarray:
        cf = dict(columns)
        cf[spec.exposure] = np.full(n, x_val)
        cf[spec.mediator_name] = np.full(n, z_val)
        return build_design(cf, formula)

    results = np.empty((K, 3))
    arms = [(1.0, 1.0), (0.0, 0.0), (0.0, 1.0)]
    arm_means = np.empty((K, 3))
    for a, (x_draw, x_pred) in enumerate(arms):
        pz = expit(m_coefs @ designs_at(x_draw, 0.0, spec.mediator).T)  # (K, n)
        eta0 = o_coefs @ designs_at(x_pred, 0.0, spec.outcome).T
        eta1 = o_coefs @ designs_at(x_pred, 1.0, spec.outcome).T
        acc = np.zeros(K)
        for _ in range(spec.mc_draws):
            draws = rng.random((K, n)) < pz
            preds = expit(np.where(draws, eta1, eta0))
            acc += (preds * W).sum(axis=1) / safe_wsum
        arm_means[:, a] = acc / spec.mc_draws
    p10, p00, p11 = arm_means[:, 0], arm_means[:, 1], arm_means[:, 2]
    results[:, 0] = p10 - p11
    results[:, 1] = p11 - p00
    results[:, 2] = p10 - p00
    return results, ok
