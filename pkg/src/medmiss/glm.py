"""Logistic regression core.

Design matrices with pairwise interactions, maximum-likelihood fitting by
iteratively reweighted least squares (IRLS), prediction, approximate-posterior
coefficient draws, and Bernoulli sampling.  Everything downstream (data
generation, imputation, mediation estimators, bootstrap) is built on these
primitives, so the fitting routines come in both a single-dataset form and a
batched form that solves many small IRLS problems at once.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import expit

MAX_ITER = 25
COEF_TOL = 1e-8
# |log-odds| beyond this bound is treated as separation / divergence.
DIVERGENCE_BOUND = 30.0

Term = tuple[str, ...]


class GlmError(Exception):
    """Base class for fitting errors."""


class RankDeficientError(GlmError):
    """Design matrix is rank deficient; carries the offending column labels."""

    def __init__(self, columns: Sequence[str]):
        self.columns = list(columns)
        super().__init__(f"rank-deficient design; collinear columns: {self.columns}")


class MissingValueError(ValueError):
    """A formula referenced a masked (NaN) cell."""


class NotConvergedError(GlmError):
    """Raised by callers that cannot proceed with an unconverged fit."""


def _normalize_term(term) -> Term:
    if isinstance(term, str):
        parts = tuple(p.strip() for p in term.split(":"))
    else:
        parts = tuple(term)
    if len(parts) not in (1, 2) or any(not p for p in parts):
        raise ValueError(f"term must be a variable or a pair, got {term!r}")
    if len(parts) == 2 and parts[0] == parts[1]:
        raise ValueError(f"interaction operands must be distinct, got {term!r}")
    return parts


@dataclass(frozen=True)
class ModelFormula:
    """Logistic model structure: response, main effects, pairwise interactions.

    Terms may be given as variable names ("X"), colon pairs ("C1:C2"), or
    tuples.  An intercept is always included and is not listed as a term.
    """

    response: str
    terms: tuple[Term, ...]

    def __init__(self, response: str, terms: Iterable = ()):
        normalized = tuple(_normalize_term(t) for t in terms)
        seen = set()
        for t in normalized:
            key = t if len(t) == 1 else tuple(sorted(t))
            if key in seen:
                raise ValueError(f"duplicate term {t} in formula for {response}")
            seen.add(key)
        object.__setattr__(self, "response", response)
        object.__setattr__(self, "terms", normalized)

    @property
    def labels(self) -> list[str]:
        return ["intercept"] + [":".join(t) for t in self.terms]

    @property
    def n_coef(self) -> int:
        return 1 + len(self.terms)

    def variables(self) -> set[str]:
        out = {self.response}
        for t in self.terms:
            out.update(t)
        return out

    def predictors(self) -> set[str]:
        return self.variables() - {self.response}

    def to_dict(self) -> dict:
        return {"response": self.response, "terms": [":".join(t) for t in self.terms]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelFormula":
        return cls(d["response"], d.get("terms", ()))


def build_design(
    columns: Mapping[str, np.ndarray], formula: ModelFormula, n_rows: int | None = None
) -> np.ndarray:
    """Build the (n, 1 + n_terms) design matrix for ``formula``.

    Column 0 is the intercept; each main-effect column copies the variable and
    each interaction column is the elementwise product.  Column order equals
    term order.  Masked cells (NaN) in any referenced predictor raise
    :class:`MissingValueError`; callers must subset or impute first.
    """
    for name in sorted(formula.predictors()):
        if name not in columns:
            raise KeyError(f"variable {name!r} not present in data")
    if n_rows is not None:
        n = n_rows
    elif columns:
        n = len(next(iter(columns.values())))
    elif not formula.terms:
        raise ValueError("cannot infer row count for an intercept-only design")
    else:  # pragma: no cover - predictors() nonempty implies columns nonempty
        raise ValueError("no columns supplied")
    out = np.empty((n, formula.n_coef), dtype=np.float64)
    out[:, 0] = 1.0
    for j, term in enumerate(formula.terms, start=1):
        col = np.asarray(columns[term[0]], dtype=np.float64)
        if len(term) == 2:
            col = col * np.asarray(columns[term[1]], dtype=np.float64)
        out[:, j] = col
    bad = ~np.isfinite(out)
    if bad.any():
        j = int(np.argwhere(bad.any(axis=0)).ravel()[0])
        raise MissingValueError(
            f"missing value in design column {formula.labels[j]!r}; "
            "subset to complete rows or impute first"
        )
    return out


def build_design_batch(columns: Mapping[str, np.ndarray], formula: ModelFormula) -> np.ndarray:
    """(K, n, 1 + n_terms) design stack from (K, n) column arrays."""
    K, n = next(iter(columns.values())).shape
    out = np.empty((K, n, formula.n_coef))
    out[..., 0] = 1.0
    for j, term in enumerate(formula.terms, start=1):
        col = columns[term[0]]
        if len(term) == 2:
            col = col * columns[term[1]]
        out[..., j] = col
    return out


@dataclass
class FittedGlm:
    """Fitted logistic model: coefficients on the log-odds scale.

    ``covariance`` is the inverse of the final weighted information matrix.
    ``converged=False`` marks separation or exhausted iterations; downstream
    users must treat such fits as an error condition.
    """

    coefficients: np.ndarray
    covariance: np.ndarray
    converged: bool
    iterations: int
    log_likelihood: float
    formula: ModelFormula | None = None
    diagnostic: str | None = None

    def __post_init__(self):
        if self.formula is not None and self.formula.n_coef != len(self.coefficients):
            raise ValueError("coefficient vector length does not match formula")
        if self.covariance.shape != (len(self.coefficients),) * 2:
            raise ValueError("covariance dimensions do not match coefficients")


def _log_likelihood(eta: np.ndarray, y: np.ndarray, w: np.ndarray) -> float:
    # sum w * (y*eta - log(1 + exp(eta))), stable for large |eta|
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def fit_logistic(
    design: np.ndarray,
    response: np.ndarray,
    weights: np.ndarray | None = None,
    formula: ModelFormula | None = None,
) -> FittedGlm:
    """Maximum-likelihood logistic fit via IRLS (Newton-Raphson).

    Stops when the largest coefficient change is below ``COEF_TOL`` or after
    ``MAX_ITER`` iterations.  Separation (any |coefficient| exceeding
    ``DIVERGENCE_BOUND``) yields ``converged=False`` rather than an exception,
    because callers such as the bootstrap need to decide whether to retry.
    Rank-deficient designs fail loudly with the collinear columns named.
    """
    X = np.asarray(design, dtype=np.float64)
    y = np.asarray(response, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("design rows must match response length")
    if weights is None:
        w = np.ones_like(y)
    else:
        w = np.asarray(weights, dtype=np.float64)
        if w.shape != y.shape:
            raise ValueError("weights must match response length")
        if (w < 0).any():
            raise ValueError("weights must be nonnegative")

    p = X.shape[1]
    beta = np.zeros(p)
    converged = False
    diagnostic = None
    it = 0
    info = None
    for it in range(1, MAX_ITER + 1):
        eta = X @ beta
        mu = expit(eta)
        grad = X.T @ (w * (y - mu))
        wvar = w * mu * (1.0 - mu)
        info = (X * wvar[:, None]).T @ X
        try:
            delta = np.linalg.solve(info, grad)
        except np.linalg.LinAlgError:
            _raise_if_rank_deficient(X, w, formula)
            diagnostic = "information matrix singular (degenerate weights / separation)"
            break
        beta = beta + delta
        if np.abs(beta).max() > DIVERGENCE_BOUND:
            diagnostic = "coefficients diverged (separation suspected)"
            break
        if np.abs(delta).max() < COEF_TOL:
            converged = True
            break

    eta = X @ beta
    mu = expit(eta)
    wvar = w * mu * (1.0 - mu)
    info = (X * wvar[:, None]).T @ X
    try:
        cov = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        cov = np.full((p, p), np.nan)
    if not converged and diagnostic is None:
        diagnostic = f"no convergence in {MAX_ITER} iterations"
    return FittedGlm(
        coefficients=beta,
        covariance=cov,
        converged=converged,
        iterations=it,
        log_likelihood=_log_likelihood(eta, y, w),
        formula=formula,
        diagnostic=diagnostic,
    )


def _raise_if_rank_deficient(X: np.ndarray, w: np.ndarray, formula: ModelFormula | None):
    used = X[w > 0] if (w is not None and (w == 0).any() and (w > 0).any()) else X
    rank = np.linalg.matrix_rank(used)
    if rank >= X.shape[1]:
        return
    # Name the columns involved: those whose removal restores full rank.
    labels = formula.labels if formula is not None else [f"col{j}" for j in range(X.shape[1])]
    collinear = []
    for j in range(X.shape[1]):
        rest = np.delete(used, j, axis=1)
        if np.linalg.matrix_rank(rest) == rank:
            collinear.append(labels[j])
    raise RankDeficientError(collinear or labels)


def fit_logistic_batch(
    designs: np.ndarray,
    responses: np.ndarray,
    weights: np.ndarray | None = None,
    need_cov: bool = False,
    start: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray | None, np.ndarray, int]:
    """Fit K independent logistic regressions at once.

    ``designs`` is either a shared (n, p) matrix or a (K, n, p) stack;
    ``responses`` is (K, n) (or (n,), broadcast); ``weights`` likewise.
    Zero weights drop rows, which is how callers express per-problem row
    subsets over a common array layout.  ``start`` (shape (p,) or (K, p))
    warm-starts Newton; the optimum is unaffected but hot loops converge in
    a couple of steps when started near the solution.

    Returns (coefficients (K, p), covariances (K, p, p) or None,
    converged (K,), iterations).  Problems that diverge or hit a singular
    information matrix are frozen and reported as unconverged rather than
    raising, since batch callers (bootstrap, chained imputation) handle
    failures per problem.
    """
    X = np.asarray(designs, dtype=np.float64)
    shared_design = X.ndim == 2
    n, p = X.shape[-2], X.shape[-1]
    Y = np.asarray(responses, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[None, :]
    K = Y.shape[0] if shared_design else X.shape[0]
    if not shared_design and Y.shape[0] == 1:
        Y = np.broadcast_to(Y, (K, n))
    if Y.shape != (K, n):
        raise ValueError("responses shape does not match designs")
    if weights is None:
        W = np.ones((K, n))
    else:
        W = np.asarray(weights, dtype=np.float64)
        W = np.broadcast_to(W, (K, n))
        if (W < 0).any():
            raise ValueError("weights must be nonnegative")

    beta = np.zeros((K, p))
    if start is not None:
        beta[:] = np.asarray(start, dtype=np.float64)
    active = np.ones(K, dtype=bool)
    converged = np.zeros(K, dtype=bool)

    # For a shared design the K information matrices are weighted sums of the
    # same rank-one terms, so one GEMM against the precomputed X (x) X table
    # replaces a (K, p, n) temporary per iteration.  Skip the table when it
    # would dwarf the design itself (large-n single fits).
    pair_table = None
    if shared_design and n * p * p <= 8_000_000:
        pair_table = (X[:, :, None] * X[:, None, :]).reshape(n, p * p)

    def newton_step(X_a, Y_a, W_a, beta_a):
        Xt_a = np.swapaxes(X_a, -1, -2)
        if X_a.ndim == 2:
            eta = beta_a @ Xt_a
        else:
            eta = np.matmul(X_a, beta_a[..., None])[..., 0]
        mu = expit(eta)
        resid = W_a * (Y_a - mu)
        wvar = W_a * mu * (1.0 - mu)
        if X_a.ndim == 2:
            grad = resid @ X_a
            if pair_table is not None:
                info = (wvar @ pair_table).reshape(-1, p, p)
            else:
                info = np.matmul(Xt_a[None] * wvar[:, None, :], X_a[None])
        else:
            grad = np.matmul(Xt_a, resid[..., None])[..., 0]
            info = np.matmul(Xt_a * wvar[:, None, :], X_a)
        return grad, info

    it = 0
    for it in range(1, MAX_ITER + 1):
        if not active.any():
            break
        idx = np.flatnonzero(active)
        all_active = idx.size == K
        X_a = X if (shared_design or all_active) else X[idx]
        Y_a = Y if all_active else Y[idx]
        W_a = W if all_active else W[idx]
        beta_a = beta if all_active else beta[idx]
        grad, info = newton_step(X_a, Y_a, W_a, beta_a)
        delta = np.zeros((idx.size, p))
        alive = np.ones(idx.size, dtype=bool)
        try:
            delta = np.linalg.solve(info, grad[..., None])[..., 0]
        except np.linalg.LinAlgError:
            # Isolate the singular problems; keep the rest moving.
            for j in range(idx.size):
                try:
                    delta[j] = np.linalg.solve(info[j], grad[j])
                except np.linalg.LinAlgError:
                    alive[j] = False
        new_beta = beta_a + np.where(alive[:, None], delta, 0.0)
        beta[idx] = new_beta
        diverged = np.abs(new_beta).max(axis=1) > DIVERGENCE_BOUND
        step = np.abs(delta).max(axis=1)
        done = alive & ~diverged & (step < COEF_TOL)
        converged[idx[done]] = True
        still = alive & ~diverged & ~done
        active[idx] = still

    cov = None
    if need_cov:
        _, info = newton_step(X, Y, W, beta)
        cov = np.full((K, p, p), np.nan)
        ok = np.flatnonzero(converged)
        try:
            cov[ok] = np.linalg.inv(info[ok])
        except np.linalg.LinAlgError:
            for k in ok:
                try:
                    cov[k] = np.linalg.inv(info[k])
                except np.linalg.LinAlgError:
                    converged[k] = False
    return beta, cov, converged, it


def predict_prob(fit: FittedGlm, design: np.ndarray) -> np.ndarray:
    """Predicted probabilities logit^{-1}(design @ coefficients)."""
    X = np.asarray(design, dtype=np.float64)
    if X.shape[-1] != len(fit.coefficients):
        raise ValueError(
            f"design has {X.shape[-1]} columns, fit has {len(fit.coefficients)} coefficients"
        )
    return expit(X @ fit.coefficients)


def draw_coefficients(fit: FittedGlm, rng: np.random.Generator) -> np.ndarray:
    """One draw from Normal(coefficients, covariance) via a (pivoted) square root.

    The approximate-posterior draw used by proper multiple imputation.  A
    positive-semidefinite covariance with zero directions (e.g. exactly zero)
    falls back to an eigenvalue square root; genuinely indefinite covariance
    is an error.
    """
    if not fit.converged:
        raise NotConvergedError("cannot draw coefficients from an unconverged fit")
    cov = np.asarray(fit.covariance, dtype=np.float64)
    try:
        root = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        vals, vecs = np.linalg.eigh(cov)
        floor = -1e-8 * max(1.0, float(np.abs(vals).max()))
        if vals.min() < floor:
            raise GlmError("coefficient covariance is not positive-semidefinite")
        root = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return fit.coefficients + root @ rng.standard_normal(len(fit.coefficients))


def draw_coefficients_batch(
    coefficients: np.ndarray, covariances: np.ndarray, normals: np.ndarray
) -> np.ndarray:
    """Vectorized Normal(coef, cov) draws given pre-drawn standard normals (K, p)."""
    try:
        roots = np.linalg.cholesky(covariances)
    except np.linalg.LinAlgError:
        K = coefficients.shape[0]
        roots = np.empty_like(covariances)
        for k in range(K):
            try:
                roots[k] = np.linalg.cholesky(covariances[k])
            except np.linalg.LinAlgError:
                vals, vecs = np.linalg.eigh(covariances[k])
                floor = -1e-8 * max(1.0, float(np.abs(vals).max()))
                if vals.min() < floor:
                    raise GlmError("coefficient covariance is not positive-semidefinite")
                roots[k] = vecs * np.sqrt(np.clip(vals, 0.0, None))
    return coefficients + np.matmul(roots, normals[..., None])[..., 0]


def sample_bernoulli(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Elementwise independent Bernoulli draws, returned as int8 0/1."""
    p = np.asarray(probs, dtype=np.float64)
    if not np.isfinite(p).all() or (p < 0).any() or (p > 1).any():
        raise ValueError("probabilities must lie in [0, 1]")
    return (rng.random(p.shape) < p).astype(np.int8)
