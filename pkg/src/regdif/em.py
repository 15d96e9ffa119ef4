"""Penalized EM estimation: posterior node weights, the population and item
M-steps, and the outer loop minimizing the negative average log-likelihood
plus an L1 penalty on the DIF coordinates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize

from .model import (
    Dataset,
    ItemParams,
    ParamVector,
    PopulationParams,
    QuadratureGrid,
    _LikelihoodCore,
    all_dif_mask,
    build_quadrature,
    flat_dim,
    item_slice,
    population_indices,
)


class ConvergenceWarning(UserWarning):
    """An inner solver hit its iteration cap; the best iterate was kept."""


# ---------------------------------------------------------------------------
# Configuration and result containers
# ---------------------------------------------------------------------------

@dataclass
class PenaltyConfig:
    """L1 penalty weight and coordinate masks over the flat parameter vector.

    ``penalized_mask`` must be True only on DIF coordinates; ``fixed_zero_mask``
    pins coordinates at zero (used by the refit and anchored variants) and must
    be disjoint from the penalized set.
    """

    lam: float
    penalized_mask: np.ndarray
    fixed_zero_mask: np.ndarray

    def __post_init__(self):
        self.penalized_mask = np.asarray(self.penalized_mask, dtype=bool)
        self.fixed_zero_mask = np.asarray(self.fixed_zero_mask, dtype=bool)
        if self.lam < 0:
            raise ValueError("penalty weight must be nonnegative")
        if self.penalized_mask.shape != self.fixed_zero_mask.shape:
            raise ValueError("penalty masks must have equal shapes")
        if np.any(self.penalized_mask & self.fixed_zero_mask):
            raise ValueError("penalized_mask and fixed_zero_mask must be disjoint")

    @classmethod
    def for_model(cls, n_items: int, n_covariates: int, lam: float,
                  fixed_zero_items=None, fixed_zero_mask=None) -> "PenaltyConfig":
        """Penalize all DIF coordinates; optionally pin the DIF blocks of
        ``fixed_zero_items`` (0-based indices) or an explicit mask at zero.
        """
        d = flat_dim(n_items, n_covariates)
        penalized = all_dif_mask(n_items, n_covariates)
        fixed = np.zeros(d, dtype=bool)
        if fixed_zero_items is not None:
            from .model import dif_indices
            for j in fixed_zero_items:
                fixed[dif_indices(j, n_covariates)] = True
        if fixed_zero_mask is not None:
            fixed |= np.asarray(fixed_zero_mask, dtype=bool)
        penalized &= ~fixed
        return cls(lam=lam, penalized_mask=penalized, fixed_zero_mask=fixed)

    def validate_for(self, n_items: int, n_covariates: int):
        d = flat_dim(n_items, n_covariates)
        if self.penalized_mask.shape != (d,):
            raise ValueError(f"penalty masks must have length {d}")
        if np.any(self.penalized_mask & ~all_dif_mask(n_items, n_covariates)):
            raise ValueError("only DIF coordinates may be penalized")
        if np.any(self.fixed_zero_mask[population_indices(n_items, n_covariates)]):
            raise ValueError("population coordinates cannot be pinned at zero")


@dataclass
class EmConfig:
    max_iter: int = 500
    em_tol: float = 1e-4
    mstep_tol: float = 1e-6
    n_quad: int = 49
    start: ParamVector | None = None

    def __post_init__(self):
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.em_tol <= 0 or self.mstep_tol <= 0:
            raise ValueError("tolerances must be positive")


@dataclass
class FitResult:
    """Penalized EM output: the estimate, the penalty weight, and the
    per-iteration penalized-loss trace (non-increasing up to 1e-8 slack).
    """

    estimate: ParamVector
    lam: float
    iterations: int
    converged: bool
    trace: np.ndarray
    final_loss: float
    flags: list = field(default_factory=list)
    penalty: PenaltyConfig | None = None
    config: EmConfig | None = None


def default_start(n_items: int, n_covariates: int) -> ParamVector:
    """Neutral starting point: unit slopes, zero intercepts, all effects zero."""
    items = [ItemParams(1.0, 0.0, np.zeros(n_covariates), np.zeros(n_covariates))
             for _ in range(n_items)]
    pop = PopulationParams(np.zeros(n_covariates), np.zeros(n_covariates))
    return ParamVector(items=items, population=pop)


def select_lambda(n: int, c: float) -> float:
    """Fixed-rate penalty weight c * sqrt(1/n)."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if c <= 0:
        raise ValueError("c must be positive")
    return c / math.sqrt(n)


def soft_threshold(z: float, t: float) -> float:
    """sign(z) * max(|z| - t, 0)."""
    if t < 0:
        raise ValueError("threshold must be nonnegative")
    if z > t:
        return z - t
    if z < -t:
        return z + t
    return 0.0


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

def posterior_weights(params: ParamVector, data: Dataset, grid: QuadratureGrid) -> np.ndarray:
    """Posterior probabilities of each quadrature node given a person's
    responses; rows are nonnegative and sum to one. Computed in log space.
    """
    core = _LikelihoodCore(params.flatten(), data, grid)
    return core.posterior()


# ---------------------------------------------------------------------------
# Population M-step
# ---------------------------------------------------------------------------

def _population_objective_factory(post, covariates, nodes):
    """Expected negative Gaussian log density of the nodes under the
    covariate-dependent latent normal, reduced to per-person node moments.
    """
    n = covariates.shape[0]
    K = covariates.shape[1]
    m1 = (post * nodes).sum(axis=1)
    m2 = (post * nodes ** 2).sum(axis=1)
    X = covariates
    half_log_2pi = 0.5 * math.log(2.0 * math.pi)

    def fun_and_grad(v):
        gamma = v[:K]
        delta = v[K:]
        mu = X @ gamma
        u = X @ delta
        with np.errstate(over="ignore"):
            inv_var = np.exp(-u)
        quad = m2 - 2.0 * mu * m1 + mu ** 2
        val = half_log_2pi + np.mean(0.5 * u + 0.5 * inv_var * quad)
        if not np.isfinite(val):
            return np.inf, np.zeros(2 * K)
        g_gamma = X.T @ (inv_var * (mu - m1)) / n
        g_delta = X.T @ (0.5 * (1.0 - inv_var * quad)) / n
        return val, np.concatenate([g_gamma, g_delta])

    return fun_and_grad


def m_step_population(post, data: Dataset, grid: QuadratureGrid,
                      start: PopulationParams, tol: float = 1e-6) -> PopulationParams:
    """Quasi-Newton (BFGS) minimization of the node-weighted negative Gaussian
    log density over the population effects. Never returns a point worse than
    ``start``.
    """
    K = data.n_covariates
    if K == 0:
        return PopulationParams(start.mean_effects.copy(), start.logvar_effects.copy())
    fg = _population_objective_factory(post, data.covariates, grid.nodes)
    v0 = np.concatenate([start.mean_effects, start.logvar_effects])
    res = minimize(fg, v0, jac=True, method="BFGS",
                   options={"gtol": tol, "maxiter": 200})
    if not res.success and np.linalg.norm(res.jac, ord=np.inf) > 10 * tol:
        warnings.warn("population M-step hit its iteration cap; keeping best iterate",
                      ConvergenceWarning)
    v = res.x if fg(res.x)[0] <= fg(v0)[0] else v0
    return PopulationParams(v[:K].copy(), v[K:].copy())


# ---------------------------------------------------------------------------
# Item M-step: IRLS with cyclic coordinate descent on the L1-penalized
# weighted logistic loss over the n*Q expanded records.
# ---------------------------------------------------------------------------

_CLAMP = 10.0  # |a_j|, |d_j| bound; keeps degenerate items (all 0/1) finite


def _item_design(nodes, covariates):
    """Expanded design over (person, node) records: columns (theta, 1, x, x*theta)."""
    n, Q = nodes.shape
    K = covariates.shape[1]
    th = nodes.ravel()
    C = np.empty((n * Q, 2 + 2 * K))
    C[:, 0] = th
    C[:, 1] = 1.0
    Xrep = np.repeat(covariates, Q, axis=0)
    C[:, 2:2 + K] = Xrep
    C[:, 2 + K:] = Xrep * th[:, None]
    return C


def _penalized_item_objective(C, y, omega, lam, penalized, coef):
    A = C @ coef
    smooth = -float(omega @ (y * A - np.logaddexp(0.0, A)))
    return smooth + lam * float(np.abs(coef[penalized]).sum())


def _item_kkt_residual(g, coef, lam, penalized, free):
    """Max violation of the subgradient conditions of the penalized objective."""
    worst = 0.0
    for m in np.flatnonzero(free):
        gm = g[m]
        if penalized[m]:
            if coef[m] == 0.0:
                r = max(abs(gm) - lam, 0.0)
            else:
                r = abs(gm + lam * math.copysign(1.0, coef[m]))
        else:
            if coef[m] >= _CLAMP:
                r = max(gm, 0.0)
            elif coef[m] <= -_CLAMP:
                r = max(-gm, 0.0)
            else:
                r = abs(gm)
        worst = max(worst, r)
    return worst


def _cd_sweeps(H, b, coef, lam, penalized, free, clamp_idx, tol, max_sweeps=1000):
    """Cyclic coordinate descent on the quadratic surrogate 1/2 c'Hc - b'c
    plus the L1 term on penalized coordinates; exact updates elsewhere.
    """
    idx = np.flatnonzero(free)
    for _ in range(max_sweeps):
        delta = 0.0
        for m in idx:
            hmm = H[m, m]
            if hmm <= 0.0 or not np.isfinite(hmm):
                continue
            rho = b[m] - H[m] @ coef + hmm * coef[m]
            if penalized[m]:
                new = soft_threshold(rho, lam) / hmm
            else:
                new = rho / hmm
                if m in clamp_idx:
                    new = min(max(new, -_CLAMP), _CLAMP)
            delta = max(delta, abs(new - coef[m]))
            coef[m] = new
        if delta < tol:
            break
    return coef


def _fit_item_coefs(C, y, omega, lam, coef0, tol, fixed_zero=None,
                    penalized=None, max_outer=50):
    """Minimize the weighted penalized logistic loss for one item's block.

    Returns (coef, flags). Outer IRLS loops form the usual quadratic
    surrogate; step halving guards against surrogate overshoot.
    """
    p = C.shape[1]
    K = (p - 2) // 2
    if penalized is None:
        penalized = np.zeros(p, dtype=bool)
        penalized[2:] = True
    if fixed_zero is None:
        fixed_zero = np.zeros(p, dtype=bool)
    free = ~fixed_zero
    clamp_idx = {0, 1}
    coef = np.asarray(coef0, dtype=float).copy()
    coef[fixed_zero] = 0.0
    coef[0] = min(max(coef[0], -_CLAMP), _CLAMP)
    coef[1] = min(max(coef[1], -_CLAMP), _CLAMP)

    flags = []
    obj = _penalized_item_objective(C, y, omega, lam, penalized, coef)
    best_obj, best_coef = obj, coef.copy()
    diverged = 0
    cd_tol = min(tol * 0.1, 1e-8)

    for _ in range(max_outer):
        A = C @ coef
        P = 1.0 / (1.0 + np.exp(-np.clip(A, -700, 700)))
        g = C.T @ (omega * (P - y))
        if _item_kkt_residual(g, coef, lam, penalized, free) <= tol:
            break
        W = omega * P * (1.0 - P)
        np.maximum(W, 1e-12 * omega, out=W)
        H = C.T @ (W[:, None] * C)
        b = C.T @ (W * A + omega * (y - P))
        cand = _cd_sweeps(H, b, coef.copy(), lam, penalized, free, clamp_idx, cd_tol)
        cand_obj = _penalized_item_objective(C, y, omega, lam, penalized, cand)
        halvings = 0
        while cand_obj > obj + 1e-8 and halvings < 30:
            cand = 0.5 * (cand + coef)
            cand_obj = _penalized_item_objective(C, y, omega, lam, penalized, cand)
            halvings += 1
        if cand_obj > obj + 1e-8:
            diverged += 1
            if diverged >= 2:
                flags.append("item_mstep_diverged")
                warnings.warn("item M-step kept diverging; returning best iterate",
                              ConvergenceWarning)
                break
        coef, obj = cand, cand_obj
        if obj < best_obj:
            best_obj, best_coef = obj, coef.copy()
    else:
        flags.append("item_mstep_maxiter")
    if obj > best_obj:
        coef = best_coef
    if abs(coef[0]) >= _CLAMP - 1e-9 or abs(coef[1]) >= _CLAMP - 1e-9:
        flags.append("item_clamped")
    return coef, flags


def m_step_item(post, data: Dataset, grid: QuadratureGrid, item_index: int,
                lam: float, start: ItemParams, tol: float = 1e-6,
                fixed_zero=None) -> ItemParams:
    """Penalized weighted logistic fit of one item's (a, d, beta0, beta1)
    block, treating the n*Q (person, node) records with posterior weights as
    pseudo-data. ``fixed_zero`` is a boolean mask over the item's block.
    """
    if lam < 0:
        raise ValueError("penalty weight must be nonnegative")
    K = data.n_covariates
    C = _item_design(grid.nodes, data.covariates)
    y = np.repeat(data.responses[:, item_index], grid.n_points)
    omega = (post / data.n_persons).ravel()
    coef0 = np.concatenate([[start.slope, start.intercept],
                            start.intercept_dif, start.slope_dif])
    coef, _ = _fit_item_coefs(C, y, omega, lam, coef0, tol, fixed_zero=fixed_zero)
    return ItemParams(float(coef[0]), float(coef[1]),
                      coef[2:2 + K].copy(), coef[2 + K:].copy())


# ---------------------------------------------------------------------------
# Outer EM loop
# ---------------------------------------------------------------------------

def penalized_em_fit(data: Dataset, penalty: PenaltyConfig, config: EmConfig) -> FitResult:
    """Alternate posterior-weight updates with the population and item
    M-steps until the penalized loss change drops below ``em_tol``.

    With ``lam=0`` and a fixed-zero mask over DIF blocks this is the plain
    constrained EM used by the refit and anchored methods.
    """
    J, K = data.n_items, data.n_covariates
    penalty.validate_for(J, K)
    start = config.start if config.start is not None else default_start(J, K)
    if start.n_items != J or start.n_covariates != K:
        raise ValueError("starting values do not match the data dimensions")

    flat = start.flatten()
    flat[penalty.fixed_zero_mask] = 0.0
    lam = penalty.lam
    pen_mask = penalty.penalized_mask
    X = data.covariates
    p = 2 + 2 * K

    trace = []
    flags = []
    converged = False
    iterations = 0

    for r in range(config.max_iter + 1):
        pop = PopulationParams(flat[J * p:J * p + K].copy(), flat[J * p + K:].copy())
        grid = build_quadrature(config.n_quad, pop, X)
        core = _LikelihoodCore(flat, data, grid)
        loss = -float(core.person_loglik.mean()) + lam * float(np.abs(flat[pen_mask]).sum())
        trace.append(loss)
        if r > 0 and abs(trace[-1] - trace[-2]) < config.em_tol:
            converged = True
            break
        if r == config.max_iter:
            break
        post = core.posterior()
        iterations += 1

        new_pop = m_step_population(post, data, grid, pop, tol=config.mstep_tol)

        C = _item_design(grid.nodes, X)
        omega = (post / data.n_persons).ravel()
        for j in range(J):
            sl = item_slice(j, K)
            y = np.repeat(data.responses[:, j], grid.n_points)
            coef, item_flags = _fit_item_coefs(
                C, y, omega, lam, flat[sl], config.mstep_tol,
                fixed_zero=penalty.fixed_zero_mask[sl],
                penalized=pen_mask[sl],
            )
            flat[sl] = coef
            for f in item_flags:
                tagged = f"item{j + 1}:{f}"
                if tagged not in flags:
                    flags.append(tagged)

        flat[J * p:J * p + K] = new_pop.mean_effects
        flat[J * p + K:] = new_pop.logvar_effects

    if not converged:
        flags.append("max_iter_reached")

    estimate = ParamVector.from_flat(flat, J, K)
    return FitResult(
        estimate=estimate,
        lam=lam,
        iterations=iterations,
        converged=converged,
        trace=np.asarray(trace),
        final_loss=trace[-1],
        flags=flags,
        penalty=penalty,
        config=config,
    )


def polish_ml_fit(fit: FitResult, data: Dataset, gtol: float = 1e-9,
                  maxiter: int = 500) -> FitResult:
    """Refine an unpenalized (possibly constrained) EM fit by quasi-Newton
    minimization of the loss over the free coordinates.

    EM's loss-change stopping rule can leave gradients around 1e-3; exact
    stationarity matters when a score is evaluated at the constrained optimum.
    """
    if fit.lam != 0:
        raise ValueError("polishing applies to unpenalized fits only")
    from .model import _ScoreWorkspace
    J, K = fit.estimate.n_items, fit.estimate.n_covariates
    n_quad = fit.config.n_quad if fit.config is not None else 49
    flat0 = fit.estimate.flatten()
    if fit.penalty is not None:
        free = np.flatnonzero(~fit.penalty.fixed_zero_mask)
    else:
        free = np.arange(flat0.size)
    ws = _ScoreWorkspace(data, n_quad)

    def fun_and_grad(vfree):
        flat = flat0.copy()
        flat[free] = vfree
        core = ws._full(flat)
        return -float(core.person_loglik.mean()), core.mean_score()[free]

    # keep the EM's box on slopes/intercepts so degenerate items stay bounded
    p = 2 + 2 * K
    bounds = [(-_CLAMP, _CLAMP) if (idx < J * p and idx % p < 2) else (None, None)
              for idx in free]
    res = minimize(fun_and_grad, flat0[free], jac=True, method="L-BFGS-B",
                   bounds=bounds,
                   options={"gtol": gtol, "ftol": 0.0, "maxiter": maxiter})
    flat = flat0.copy()
    if fun_and_grad(res.x)[0] <= fit.final_loss:
        flat[free] = res.x
    loss = fun_and_grad(flat[free])[0]
    return FitResult(
        estimate=ParamVector.from_flat(flat, J, K),
        lam=0.0,
        iterations=fit.iterations,
        converged=True,
        trace=np.append(fit.trace, loss),
        final_loss=loss,
        flags=fit.flags + ["polished"],
        penalty=fit.penalty,
        config=fit.config,
    )
