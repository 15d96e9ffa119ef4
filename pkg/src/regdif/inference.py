"""Decorrelated score inference: sparse nuisance-projection estimation, the
score test with chi-square reference, the one-step debiased estimator with
efficient-information standard errors, and the anchored Wald benchmark.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.stats import chi2, norm

from .em import EmConfig, FitResult, PenaltyConfig, penalized_em_fit, soft_threshold
from .model import (
    Dataset,
    ParamVector,
    SingularInformationError,
    _ScoreWorkspace,
    build_quadrature,
    dif_indices,
    flat_dim,
    item_slice,
    observed_information,
    population_indices,
    score_vector,
)

_COND_CAP = 1e10


@dataclass
class FocalSpec:
    """Ordered focal-coordinate index set (into the flat parameter vector)
    with a human-readable label; everything else is nuisance.
    """

    focal_indices: np.ndarray
    description: str = ""

    def __post_init__(self):
        self.focal_indices = np.asarray(self.focal_indices, dtype=int)
        if self.focal_indices.ndim != 1 or self.focal_indices.size < 1:
            raise ValueError("focal_indices must be a nonempty 1-d index set")
        if len(set(self.focal_indices.tolist())) != self.focal_indices.size:
            raise ValueError("focal indices must be distinct")

    @property
    def d0(self) -> int:
        return self.focal_indices.size

    def nuisance_indices(self, dim: int) -> np.ndarray:
        if self.focal_indices.min() < 0 or self.focal_indices.max() >= dim:
            raise ValueError("focal indices out of range")
        mask = np.ones(dim, dtype=bool)
        mask[self.focal_indices] = False
        return np.flatnonzero(mask)

    @classmethod
    def item_dif(cls, j: int, n_items: int, n_covariates: int) -> "FocalSpec":
        """Both DIF blocks of item j (0-based): the item-level null set."""
        return cls(dif_indices(j, n_covariates), f"item {j + 1} DIF block")

    @classmethod
    def item_full(cls, j: int, n_items: int, n_covariates: int) -> "FocalSpec":
        """Item j's full (a, d, beta0, beta1) block, as debiased per item."""
        sl = item_slice(j, n_covariates)
        return cls(np.arange(sl.start, sl.stop), f"item {j + 1} parameter block")

    @classmethod
    def population(cls, n_items: int, n_covariates: int) -> "FocalSpec":
        return cls(population_indices(n_items, n_covariates), "population block")

    @classmethod
    def single(cls, index: int, description: str = "") -> "FocalSpec":
        return cls(np.array([index]), description or f"coordinate {index}")


@dataclass
class DscoreReport:
    statistic: float
    df: int
    p_value: float
    w_hat: np.ndarray
    score_at_null: np.ndarray
    efficient_info: np.ndarray
    description: str = ""


@dataclass
class DebiasReport:
    estimate: np.ndarray
    se: np.ndarray
    ci_lower: np.ndarray
    ci_upper: np.ndarray
    alpha: float
    description: str = ""


@dataclass
class WaldReport:
    statistic: float
    df: int
    p_value: float
    description: str = ""


# ---------------------------------------------------------------------------
# Linear algebra guards
# ---------------------------------------------------------------------------

def _checked_inverse(M: np.ndarray, label: str, require_pd: bool = True) -> np.ndarray:
    """Inverse of a symmetrized matrix with explicit failure when it is not
    positive definite or its condition number exceeds 1e10. No pseudo-inverses.
    """
    S = 0.5 * (M + M.T)
    evals = np.linalg.eigvalsh(S)
    lo, hi = float(evals[0]), float(np.abs(evals).max())
    if require_pd and lo <= 0.0:
        raise SingularInformationError(
            f"information matrix for {label} is not positive definite (min eigenvalue {lo:.3e})"
        )
    if lo == 0.0 or hi / abs(lo) > _COND_CAP:
        raise SingularInformationError(
            f"information matrix for {label} has condition number above {_COND_CAP:.0e}"
        )
    return np.linalg.inv(S)


# ---------------------------------------------------------------------------
# Sparse projection of the focal score onto the nuisance scores
# ---------------------------------------------------------------------------

def _quadratic_lasso(A, b, lam, tol=1e-8, max_sweeps=10000):
    """argmin_w 1/2 w'Aw - b'w + lam ||w||_1 by cyclic coordinate descent.

    Coordinates with a nonpositive diagonal are pinned at zero (degenerate
    directions). With lam=0 the solve is done directly.
    """
    d1 = b.size
    diag = np.diag(A).copy()
    dead = diag <= 0.0
    if lam == 0.0:
        if dead.any():
            warnings.warn("degenerate nuisance direction; its projection weight is set to 0")
            w = np.zeros(d1)
            live = ~dead
            sub = A[np.ix_(live, live)]
            w[live] = np.linalg.lstsq(sub, b[live], rcond=None)[0]
            return w
        try:
            return np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            return np.linalg.lstsq(A, b, rcond=None)[0]
    if dead.any():
        warnings.warn("degenerate nuisance direction; its projection weight is set to 0")
    w = np.zeros(d1)
    live = np.flatnonzero(~dead)
    for _ in range(max_sweeps):
        delta = 0.0
        for k in live:
            rho = b[k] - A[k] @ w + diag[k] * w[k]
            new = soft_threshold(rho, lam) / diag[k]
            delta = max(delta, abs(new - w[k]))
            w[k] = new
        if delta < tol:
            break
    else:
        warnings.warn("projection-weight coordinate descent hit its sweep cap",
                      stacklevel=2)
    return w


def estimate_w_from_rows(rows: np.ndarray, spec: FocalSpec, lambda_prime: float,
                         nuisance: np.ndarray | None = None) -> np.ndarray:
    """L1-penalized regression of each focal per-observation gradient on the
    nuisance per-observation gradients; returns shape (d0, d1) where row m
    holds the projection weights for focal coordinate m.
    """
    n, d = rows.shape
    f = spec.focal_indices
    nu = spec.nuisance_indices(d) if nuisance is None else np.asarray(nuisance)
    G_eta = rows[:, nu]
    G_psi = rows[:, f]
    A = (G_eta.T @ G_eta) / n
    B = (G_eta.T @ G_psi) / n
    W = np.empty((spec.d0, nu.size))
    for m in range(spec.d0):
        W[m] = _quadratic_lasso(A, B[:, m], lambda_prime)
    return W


def estimate_w(fit: FitResult, data: Dataset, spec: FocalSpec, lambda_prime: float) -> np.ndarray:
    """Projection weights estimated from per-observation gradient rows at the
    fitted parameters (the sample analogue of the focal-on-nuisance score
    regression).
    """
    if lambda_prime < 0:
        raise ValueError("lambda_prime must be nonnegative")
    n_quad = fit.config.n_quad if fit.config is not None else 49
    grid = build_quadrature(n_quad, fit.estimate.population, data.covariates)
    _, rows = score_vector(fit.estimate, data, grid)
    return estimate_w_from_rows(rows, spec, lambda_prime)


def estimate_w_from_information(hessian: np.ndarray, spec: FocalSpec,
                                lambda_prime: float,
                                nuisance: np.ndarray | None = None) -> np.ndarray:
    """Projection weights from the observed-information blocks: each row m
    minimizes 1/2 w'H_ee w - w'H_ep[:, m] + lam' ||w||_1, whose lam'=0
    solution is the exact Schur-complement projection H_ee^{-1} H_ep.
    """
    if lambda_prime < 0:
        raise ValueError("lambda_prime must be nonnegative")
    d = hessian.shape[0]
    f = spec.focal_indices
    nu = spec.nuisance_indices(d) if nuisance is None else np.asarray(nuisance)
    A = hessian[np.ix_(nu, nu)]
    B = hessian[np.ix_(nu, f)]
    W = np.empty((spec.d0, nu.size))
    for m in range(spec.d0):
        W[m] = _quadratic_lasso(A, B[:, m], lambda_prime)
    return W


def decorrelated_score(params: ParamVector, w_hat: np.ndarray, data: Dataset,
                       spec: FocalSpec, n_quad: int = 49) -> np.ndarray:
    """Focal score minus the projected nuisance score, using the gradient of
    the negative average log-likelihood.
    """
    d = flat_dim(params.n_items, params.n_covariates)
    f = spec.focal_indices
    nu = spec.nuisance_indices(d)
    w_hat = np.asarray(w_hat, dtype=float)
    if w_hat.shape != (spec.d0, nu.size):
        raise ValueError(f"w_hat has shape {w_hat.shape}, expected {(spec.d0, nu.size)}")
    grid = build_quadrature(n_quad, params.population, data.covariates)
    g, _ = score_vector(params, data, grid)
    return g[f] - w_hat @ g[nu]


def efficient_information(params: ParamVector, w_hat: np.ndarray, data: Dataset,
                          spec: FocalSpec, n_quad: int = 49,
                          hessian: np.ndarray | None = None) -> np.ndarray:
    """Focal-block information with the projected cross block removed,
    symmetrized: H_pp - W H_ep. Raises when too ill-conditioned to invert.
    """
    d = flat_dim(params.n_items, params.n_covariates)
    f = spec.focal_indices
    nu = spec.nuisance_indices(d)
    if hessian is None:
        grid = build_quadrature(n_quad, params.population, data.covariates)
        hessian = observed_information(params, data, grid)
    I_eff = hessian[np.ix_(f, f)] - np.asarray(w_hat) @ hessian[np.ix_(nu, f)]
    I_eff = 0.5 * (I_eff + I_eff.T)
    evals = np.abs(np.linalg.eigvalsh(I_eff))
    if evals.min() == 0.0 or evals.max() / evals.min() > _COND_CAP:
        raise SingularInformationError(
            f"efficient information for {spec.description or 'focal block'} is singular"
        )
    return I_eff


# ---------------------------------------------------------------------------
# Shared per-fit quantities
# ---------------------------------------------------------------------------

class InferenceContext:
    """Caches the Hessian, gradient rows, and score of one fitted model so
    all per-item tests reuse a single observed-information evaluation.
    """

    def __init__(self, fit: FitResult, data: Dataset, n_quad: int | None = None):
        self.fit = fit
        self.data = data
        self.n_quad = n_quad or (fit.config.n_quad if fit.config is not None else 49)
        self.flat = fit.estimate.flatten()
        self._grid = None
        self._hessian = None
        self._score = None
        self._rows = None
        self._workspace = None

    @property
    def grid(self):
        if self._grid is None:
            self._grid = build_quadrature(self.n_quad, self.fit.estimate.population,
                                          self.data.covariates)
        return self._grid

    @property
    def hessian(self) -> np.ndarray:
        if self._hessian is None:
            self._hessian = observed_information(self.fit.estimate, self.data, self.grid)
        return self._hessian

    def score_and_rows(self):
        if self._score is None:
            self._score, self._rows = score_vector(self.fit.estimate, self.data, self.grid)
        return self._score, self._rows

    def score_at_restriction(self, spec: FocalSpec) -> np.ndarray:
        """Full score with the focal coordinates set to zero, nuisance kept at
        the fitted values; the grid is rebuilt when the restriction touches
        the population block.
        """
        if self._workspace is None:
            self._workspace = _ScoreWorkspace(self.data, self.n_quad)
        flat0 = self.flat.copy()
        flat0[spec.focal_indices] = 0.0
        return self._workspace.mean_score(flat0)


def _effective_partition(context: InferenceContext, spec: FocalSpec):
    """Focal and nuisance index sets. Nuisance coordinates pinned at zero by
    the fit are constants, not parameters; a pinned focal block is simply the
    null restriction already imposed.
    """
    d = context.flat.size
    f = spec.focal_indices
    nu = spec.nuisance_indices(d)
    penalty = context.fit.penalty
    if penalty is not None and penalty.fixed_zero_mask.any():
        nu = nu[~penalty.fixed_zero_mask[nu]]
    return f, nu


def _projection_weights(context: InferenceContext, spec: FocalSpec, nuisance,
                        lambda_prime: float, w_source: str) -> np.ndarray:
    if w_source == "information":
        return estimate_w_from_information(context.hessian, spec, lambda_prime,
                                           nuisance=nuisance)
    if w_source == "gradient":
        _, rows = context.score_and_rows()
        return estimate_w_from_rows(rows, spec, lambda_prime, nuisance=nuisance)
    raise ValueError(f"unknown w_source {w_source!r}")


# ---------------------------------------------------------------------------
# Tests and debiasing
# ---------------------------------------------------------------------------

def dscore_test(fit: FitResult, data: Dataset, spec: FocalSpec, lambda_prime: float,
                context: InferenceContext | None = None,
                w_source: str = "information") -> DscoreReport:
    """Decorrelated score test of the null that the focal coordinates are
    zero, with the nuisance held at the penalized estimate.
    """
    ctx = context or InferenceContext(fit, data)
    f, nu = _effective_partition(ctx, spec)
    W = _projection_weights(ctx, spec, nu, lambda_prime, w_source)
    g0 = ctx.score_at_restriction(spec)
    s = g0[f] - W @ g0[nu]
    I_eff = ctx.hessian[np.ix_(f, f)] - W @ ctx.hessian[np.ix_(nu, f)]
    I_eff = 0.5 * (I_eff + I_eff.T)
    I_inv = _checked_inverse(I_eff, spec.description or "focal block")
    T = float(data.n_persons * s @ I_inv @ s)
    if T < 0:  # pragma: no cover - impossible after the PD check
        raise SingularInformationError("negative score statistic")
    return DscoreReport(
        statistic=T,
        df=spec.d0,
        p_value=float(chi2.sf(T, spec.d0)),
        w_hat=W,
        score_at_null=s,
        efficient_info=I_eff,
        description=spec.description,
    )


def one_step_debias(fit: FitResult, data: Dataset, spec: FocalSpec, lambda_prime: float,
                    alpha: float = 0.05, context: InferenceContext | None = None,
                    w_source: str = "information") -> DebiasReport:
    """Single Newton correction of the penalized focal estimates using the
    decorrelated score, with efficient-information standard errors and
    normal-quantile confidence intervals.
    """
    if not 0 < alpha < 1:
        raise ValueError("alpha must be in (0, 1)")
    ctx = context or InferenceContext(fit, data)
    f, nu = _effective_partition(ctx, spec)
    W = _projection_weights(ctx, spec, nu, lambda_prime, w_source)
    g, _ = ctx.score_and_rows()
    s = g[f] - W @ g[nu]
    I_eff = ctx.hessian[np.ix_(f, f)] - W @ ctx.hessian[np.ix_(nu, f)]
    I_eff = 0.5 * (I_eff + I_eff.T)
    I_inv = _checked_inverse(I_eff, spec.description or "focal block")
    psi_tilde = ctx.flat[f] - I_inv @ s
    se = np.sqrt(np.diag(I_inv) / data.n_persons)
    z = float(norm.ppf(1.0 - alpha / 2.0))
    return DebiasReport(
        estimate=psi_tilde,
        se=se,
        ci_lower=psi_tilde - z * se,
        ci_upper=psi_tilde + z * se,
        alpha=alpha,
        description=spec.description,
    )


def wald_test_oracle(data: Dataset, anchors, target_item: int,
                     config: EmConfig | None = None) -> WaldReport:
    """Item-level Wald test in the model identified by anchor items (0-based
    indices) whose DIF blocks are pinned at zero.
    """
    anchors = sorted(set(int(a) for a in anchors))
    if not anchors:
        raise ValueError("anchor set must be nonempty")
    if target_item in anchors:
        raise ValueError(f"target item {target_item} is an anchor")
    config = config or EmConfig()
    J, K = data.n_items, data.n_covariates
    penalty = PenaltyConfig.for_model(J, K, 0.0, fixed_zero_items=anchors)
    fit = penalized_em_fit(data, penalty, config)
    grid = build_quadrature(config.n_quad, fit.estimate.population, data.covariates)
    H = observed_information(fit.estimate, data, grid)
    return wald_test_from_fit(fit, H, target_item, data.n_persons)


def wald_test_from_fit(fit: FitResult, hessian: np.ndarray, target_item: int,
                       n: int) -> WaldReport:
    """Wald test of a target item's DIF block from an already-fitted
    constrained model and its observed information.
    """
    K = fit.estimate.n_covariates
    fixed = fit.penalty.fixed_zero_mask
    free = np.flatnonzero(~fixed)
    target = dif_indices(target_item, K)
    if np.any(fixed[target]):
        raise ValueError(f"item {target_item + 1} has pinned DIF coordinates; cannot Wald-test it")
    I_free = hessian[np.ix_(free, free)]
    V = _checked_inverse(I_free, "constrained-model information")
    pos = np.searchsorted(free, target)
    V_block = V[np.ix_(pos, pos)]
    beta_hat = fit.estimate.flatten()[target]
    T = float(n * beta_hat @ _checked_inverse(V_block, f"item {target_item + 1} DIF covariance") @ beta_hat)
    df = target.size
    return WaldReport(
        statistic=T,
        df=df,
        p_value=float(chi2.sf(T, df)),
        description=f"item {target_item + 1} anchored Wald",
    )
