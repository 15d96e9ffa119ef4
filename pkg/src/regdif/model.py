"""Model core for covariate-moderated two-parameter logistic item response models.

Item intercepts and slopes are linear functions of person covariates, and the
latent trait is normal with covariate-dependent mean and log-variance. All
marginal quantities integrate the latent trait out on a per-person
Gauss-Hermite grid and are accumulated in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.special import expit, logsumexp


class NumericalError(RuntimeError):
    """Raised when a computation fails numerically (underflow, overflow, non-finite results)."""


class SingularInformationError(NumericalError):
    """Raised when an information matrix is too ill-conditioned to invert."""


# ---------------------------------------------------------------------------
# Parameter and data containers
# ---------------------------------------------------------------------------

@dataclass
class ItemParams:
    """Parameters of one item: slope, intercept, and their covariate effects.

    ``intercept_dif`` holds the covariate effects on the item intercept
    (d-DIF) and ``slope_dif`` the effects on the item slope (a-DIF); both
    have length K, the number of covariates.
    """

    slope: float
    intercept: float
    intercept_dif: np.ndarray
    slope_dif: np.ndarray

    def __post_init__(self):
        self.intercept_dif = np.asarray(self.intercept_dif, dtype=float)
        self.slope_dif = np.asarray(self.slope_dif, dtype=float)
        if self.intercept_dif.ndim != 1 or self.slope_dif.ndim != 1:
            raise ValueError("DIF effect vectors must be one-dimensional")
        if self.intercept_dif.shape != self.slope_dif.shape:
            raise ValueError(
                f"DIF vectors disagree in length: {self.intercept_dif.shape[0]} "
                f"vs {self.slope_dif.shape[0]}"
            )
        vals = [self.slope, self.intercept, *self.intercept_dif, *self.slope_dif]
        if not np.all(np.isfinite(vals)):
            raise ValueError("item parameters must be finite")

    @property
    def n_covariates(self) -> int:
        return self.intercept_dif.shape[0]


@dataclass
class PopulationParams:
    """Covariate effects on the latent mean and on the latent log-variance."""

    mean_effects: np.ndarray
    logvar_effects: np.ndarray

    def __post_init__(self):
        self.mean_effects = np.asarray(self.mean_effects, dtype=float)
        self.logvar_effects = np.asarray(self.logvar_effects, dtype=float)
        if self.mean_effects.shape != self.logvar_effects.shape or self.mean_effects.ndim != 1:
            raise ValueError("population effect vectors must be 1-d and of equal length")
        if not (np.all(np.isfinite(self.mean_effects)) and np.all(np.isfinite(self.logvar_effects))):
            raise ValueError("population parameters must be finite")

    @property
    def n_covariates(self) -> int:
        return self.mean_effects.shape[0]


@dataclass
class ParamVector:
    """Full parameter collection with a fixed flattening order.

    The flat layout is ``(a_1, d_1, beta0_1, beta1_1, ..., a_J, d_J,
    beta0_J, beta1_J, gamma, delta)`` giving dimension ``J*(2+2K) + 2K``.
    """

    items: list
    population: PopulationParams

    def __post_init__(self):
        K = self.population.n_covariates
        for j, it in enumerate(self.items):
            if it.n_covariates != K:
                raise ValueError(f"item {j + 1} has {it.n_covariates} covariate effects, expected {K}")

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_covariates(self) -> int:
        return self.population.n_covariates

    @property
    def dim(self) -> int:
        return flat_dim(self.n_items, self.n_covariates)

    def flatten(self) -> np.ndarray:
        J, K = self.n_items, self.n_covariates
        out = np.empty(self.dim)
        p = 2 + 2 * K
        for j, it in enumerate(self.items):
            b = j * p
            out[b] = it.slope
            out[b + 1] = it.intercept
            out[b + 2:b + 2 + K] = it.intercept_dif
            out[b + 2 + K:b + p] = it.slope_dif
        out[J * p:J * p + K] = self.population.mean_effects
        out[J * p + K:] = self.population.logvar_effects
        return out

    @classmethod
    def from_flat(cls, vec, n_items: int, n_covariates: int) -> "ParamVector":
        vec = np.asarray(vec, dtype=float)
        J, K = n_items, n_covariates
        if vec.shape != (flat_dim(J, K),):
            raise ValueError(f"expected flat vector of length {flat_dim(J, K)}, got {vec.shape}")
        p = 2 + 2 * K
        items = []
        for j in range(J):
            b = j * p
            items.append(ItemParams(
                slope=float(vec[b]),
                intercept=float(vec[b + 1]),
                intercept_dif=vec[b + 2:b + 2 + K].copy(),
                slope_dif=vec[b + 2 + K:b + p].copy(),
            ))
        pop = PopulationParams(vec[J * p:J * p + K].copy(), vec[J * p + K:].copy())
        return cls(items=items, population=pop)

    def item_arrays(self):
        """Return (slopes (J,), intercepts (J,), intercept_dif (J,K), slope_dif (J,K))."""
        a = np.array([it.slope for it in self.items])
        d = np.array([it.intercept for it in self.items])
        B0 = np.array([it.intercept_dif for it in self.items]).reshape(self.n_items, self.n_covariates)
        B1 = np.array([it.slope_dif for it in self.items]).reshape(self.n_items, self.n_covariates)
        return a, d, B0, B1


def flat_dim(n_items: int, n_covariates: int) -> int:
    return n_items * (2 + 2 * n_covariates) + 2 * n_covariates


def item_slice(j: int, n_covariates: int) -> slice:
    """Flat-vector slice of item j's block (a, d, beta0, beta1); j is 0-based."""
    p = 2 + 2 * n_covariates
    return slice(j * p, (j + 1) * p)


def dif_indices(j: int, n_covariates: int) -> np.ndarray:
    """Flat indices of item j's DIF coordinates (beta0 then beta1); j is 0-based."""
    p = 2 + 2 * n_covariates
    b = j * p
    return np.arange(b + 2, b + p)


def population_indices(n_items: int, n_covariates: int) -> np.ndarray:
    p = 2 + 2 * n_covariates
    return np.arange(n_items * p, n_items * p + 2 * n_covariates)


def all_dif_mask(n_items: int, n_covariates: int) -> np.ndarray:
    """Boolean mask over the flat vector that is True exactly on DIF coordinates."""
    mask = np.zeros(flat_dim(n_items, n_covariates), dtype=bool)
    for j in range(n_items):
        mask[dif_indices(j, n_covariates)] = True
    return mask


def coordinate_names(n_items: int, n_covariates: int, covariate_names=None) -> list:
    """Stable names for flat coordinates: item{j}_a, item{j}_d,
    item{j}_beta0_{cov}, item{j}_beta1_{cov}, pop_gamma_{cov}, pop_delta_{cov}.
    """
    if covariate_names is None:
        covariate_names = [f"x{k + 1}" for k in range(n_covariates)]
    if len(covariate_names) != n_covariates:
        raise ValueError("covariate_names length mismatch")
    names = []
    for j in range(1, n_items + 1):
        names.append(f"item{j}_a")
        names.append(f"item{j}_d")
        names.extend(f"item{j}_beta0_{c}" for c in covariate_names)
        names.extend(f"item{j}_beta1_{c}" for c in covariate_names)
    names.extend(f"pop_gamma_{c}" for c in covariate_names)
    names.extend(f"pop_delta_{c}" for c in covariate_names)
    return names


@dataclass
class Dataset:
    """Binary response matrix (n, J) paired with a covariate matrix (n, K)."""

    responses: np.ndarray
    covariates: np.ndarray

    def __post_init__(self):
        self.responses = np.asarray(self.responses, dtype=float)
        self.covariates = np.asarray(self.covariates, dtype=float)
        if self.responses.ndim != 2:
            raise ValueError("responses must be a 2-d array")
        if self.covariates.ndim != 2:
            raise ValueError("covariates must be a 2-d array")
        n, J = self.responses.shape
        if n < 1 or J < 1:
            raise ValueError("need at least one person and one item")
        if self.covariates.shape[0] != n:
            raise ValueError(
                f"responses have {n} rows but covariates have {self.covariates.shape[0]}"
            )
        if not np.all(np.isfinite(self.covariates)):
            raise ValueError("covariates contain non-finite entries")
        if not np.all((self.responses == 0.0) | (self.responses == 1.0)):
            raise ValueError("responses must be 0/1 with no missing entries")

    @property
    def n_persons(self) -> int:
        return self.responses.shape[0]

    @property
    def n_items(self) -> int:
        return self.responses.shape[1]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]


@dataclass
class QuadratureGrid:
    """Per-person Gauss-Hermite grid adapted to the covariate-dependent latent normal.

    ``nodes[i, q] = mu_i + sqrt(2) * sigma_i * standard_nodes[q]`` and the
    normalized weights ``standard_weights / sqrt(pi)`` are shared across
    persons (the affine map leaves them unchanged).
    """

    standard_nodes: np.ndarray
    standard_weights: np.ndarray
    nodes: np.ndarray
    weights: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    log_weights: np.ndarray = field(init=False)

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise NumericalError("quadrature weights must be positive")
        if abs(self.weights.sum() - 1.0) > 1e-10:
            raise NumericalError("normalized quadrature weights must sum to 1")
        if self.n_points > 1 and np.any(np.diff(self.standard_nodes) <= 0):
            raise NumericalError("quadrature nodes must be strictly increasing")
        self.log_weights = np.log(self.weights)

    @property
    def n_points(self) -> int:
        return self.standard_nodes.shape[0]

    @property
    def n_persons(self) -> int:
        return self.nodes.shape[0]

    def person_weights(self) -> np.ndarray:
        """Weights as an (n, Q) matrix; each row sums to 1."""
        return np.broadcast_to(self.weights, self.nodes.shape).copy()


@lru_cache(maxsize=32)
def _hermgauss(n_points: int):
    try:
        with np.errstate(all="ignore"):
            z, v = np.polynomial.hermite.hermgauss(n_points)
    except Exception as exc:
        raise NumericalError(f"Gauss-Hermite node computation failed for Q={n_points}") from exc
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(v)) and np.all(v > 0)):
        raise NumericalError(f"Gauss-Hermite node computation failed for Q={n_points}")
    return z, v


# ---------------------------------------------------------------------------
# Elementary operations
# ---------------------------------------------------------------------------

def irf_probability(theta: float, x, item: ItemParams) -> float:
    """Probability of a positive response at ability ``theta`` and covariates ``x``.

    Uses the logistic form with intercept ``d + beta0'x`` and slope
    ``a + beta1'x``; the result is strictly inside (0, 1).
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (item.n_covariates,):
        raise ValueError(f"covariate vector has shape {x.shape}, expected ({item.n_covariates},)")
    if not (np.isfinite(theta) and np.all(np.isfinite(x))):
        raise ValueError("irf_probability requires finite inputs")
    alpha = item.intercept + item.intercept_dif @ x
    beta = item.slope + item.slope_dif @ x
    return float(expit(alpha + beta * theta))


def latent_moments(x, pop: PopulationParams):
    """Latent mean ``gamma'x`` and variance ``exp(delta'x)`` at covariates ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (pop.n_covariates,):
        raise ValueError(f"covariate vector has shape {x.shape}, expected ({pop.n_covariates},)")
    mu = float(pop.mean_effects @ x)
    u = float(pop.logvar_effects @ x)
    if u > _LOG_VARIANCE_CAP:
        raise NumericalError(f"latent log-variance {u} overflows exp()")
    return mu, math.exp(u)


_LOG_VARIANCE_CAP = 700.0


def build_quadrature(n_points: int, pop: PopulationParams, covariates) -> QuadratureGrid:
    """Per-person quadrature grid of ``n_points`` Gauss-Hermite nodes."""
    if int(n_points) != n_points or n_points < 1:
        raise ValueError("n_points must be a positive integer")
    X = np.atleast_2d(np.asarray(covariates, dtype=float))
    z, v = _hermgauss(int(n_points))
    mu = X @ pop.mean_effects
    u = X @ pop.logvar_effects
    if np.any(u > _LOG_VARIANCE_CAP):
        raise NumericalError(
            f"latent log-variance up to {u.max()} overflows exp()"
        )
    sigma = np.exp(0.5 * u)
    nodes = mu[:, None] + math.sqrt(2.0) * sigma[:, None] * z[None, :]
    weights = v / math.sqrt(math.pi)
    return QuadratureGrid(
        standard_nodes=z,
        standard_weights=v,
        nodes=nodes,
        weights=weights,
        mu=mu,
        sigma=sigma,
    )


# ---------------------------------------------------------------------------
# Likelihood core
# ---------------------------------------------------------------------------

def _unpack(flat: np.ndarray, n_items: int, n_covariates: int):
    """Views into a flat parameter vector: (a (J,), d (J,), B0 (J,K), B1 (J,K), gamma, delta)."""
    J, K = n_items, n_covariates
    p = 2 + 2 * K
    M = flat[:J * p].reshape(J, p)
    a = M[:, 0]
    d = M[:, 1]
    B0 = M[:, 2:2 + K]
    B1 = M[:, 2 + K:]
    gamma = flat[J * p:J * p + K]
    delta = flat[J * p + K:]
    return a, d, B0, B1, gamma, delta


def _predictors(flat, X, n_items):
    """Per-person item intercepts and slopes: (alpha (n,J), beta (n,J))."""
    K = X.shape[1]
    a, d, B0, B1, _, _ = _unpack(flat, n_items, K)
    alpha = d[None, :] + X @ B0.T
    beta = a[None, :] + X @ B1.T
    return alpha, beta


def _log_bernoulli(A, Y):
    """log f(y | linear predictor A), stable for large |A|; shapes broadcast."""
    return Y * A - np.logaddexp(0.0, A)


class _LikelihoodCore:
    """Shared per-evaluation state: linear predictors, log response terms,
    posterior node weights, and the pieces of the analytic score.
    """

    def __init__(self, flat, data: Dataset, grid: QuadratureGrid):
        self.data = data
        self.grid = grid
        self.flat = np.asarray(flat, dtype=float)
        J, K = data.n_items, data.n_covariates
        alpha, beta = _predictors(self.flat, data.covariates, J)
        self.beta = beta
        theta = grid.nodes  # (n, Q)
        A = alpha[:, None, :] + beta[:, None, :] * theta[:, :, None]  # (n, Q, J)
        self.logf = _log_bernoulli(A, data.responses[:, None, :])
        self.prob = expit(A)
        # log of the unnormalized posterior over nodes
        self.log_joint = grid.log_weights[None, :] + self.logf.sum(axis=2)
        self.person_loglik = logsumexp(self.log_joint, axis=1)
        if not np.all(np.isfinite(self.person_loglik)):
            bad = int(np.argmin(np.isfinite(self.person_loglik)))
            raise NumericalError(
                f"all quadrature terms underflowed for person {bad}; "
                "the log-sum-exp path is mandatory and still produced -inf"
            )

    def posterior(self) -> np.ndarray:
        return np.exp(self.log_joint - self.person_loglik[:, None])

    def score_rows(self) -> np.ndarray:
        """Per-person gradient rows of the loss (negative average log-likelihood),
        differentiating the quadrature approximation exactly (the grid moves
        with the population parameters).
        """
        data, grid = self.data, self.grid
        n, J, K = data.n_persons, data.n_items, data.n_covariates
        post = self.posterior()
        theta = grid.nodes
        R = data.responses[:, None, :] - self.prob  # (n, Q, J)
        B = np.einsum("iq,iqj->ij", post, R)
        C = np.einsum("iq,iqj->ij", post * theta, R)
        S = np.einsum("iqj,ij->iq", R, self.beta)
        t1 = (post * S).sum(axis=1)
        t2 = 0.5 * (post * S * (theta - grid.mu[:, None])).sum(axis=1)

        rows = np.empty((n, flat_dim(J, K)))
        p = 2 + 2 * K
        X = data.covariates
        for j in range(J):
            b = j * p
            rows[:, b] = C[:, j]
            rows[:, b + 1] = B[:, j]
            rows[:, b + 2:b + 2 + K] = B[:, j][:, None] * X
            rows[:, b + 2 + K:b + p] = C[:, j][:, None] * X
        rows[:, J * p:J * p + K] = t1[:, None] * X
        rows[:, J * p + K:] = t2[:, None] * X
        np.negative(rows, out=rows)
        return rows

    def mean_score(self) -> np.ndarray:
        return self.score_rows().mean(axis=0)


def _check_grid(params: ParamVector, data: Dataset, grid: QuadratureGrid):
    if grid.n_persons != data.n_persons:
        raise ValueError("grid and dataset disagree on the number of persons")
    mu = data.covariates @ params.population.mean_effects
    if not np.allclose(mu, grid.mu, atol=1e-10, rtol=0.0):
        raise ValueError("quadrature grid was not built from these population parameters")


def _check_dims(params: ParamVector, data: Dataset):
    if params.n_items != data.n_items:
        raise ValueError(f"params have {params.n_items} items, data has {data.n_items}")
    if params.n_covariates != data.n_covariates:
        raise ValueError(
            f"params have {params.n_covariates} covariates, data has {data.n_covariates}"
        )


def marginal_loglik(params: ParamVector, data: Dataset, grid: QuadratureGrid) -> float:
    """Average marginal log-likelihood (1/n) sum_i log f(y_i | x_i)."""
    _check_dims(params, data)
    _check_grid(params, data, grid)
    core = _LikelihoodCore(params.flatten(), data, grid)
    return float(core.person_loglik.mean())


def score_vector(params: ParamVector, data: Dataset, grid: QuadratureGrid):
    """Gradient of the loss (negative average log-likelihood) at ``params``.

    Returns ``(score, rows)`` where ``rows`` holds the n per-person gradient
    contributions whose mean is ``score``.
    """
    _check_dims(params, data)
    _check_grid(params, data, grid)
    core = _LikelihoodCore(params.flatten(), data, grid)
    rows = core.score_rows()
    return rows.mean(axis=0), rows


# ---------------------------------------------------------------------------
# Observed information (finite differences of the analytic score)
# ---------------------------------------------------------------------------

def fd_jacobian(fn, x0, step=1e-5) -> np.ndarray:
    """Central finite-difference Jacobian of a vector-valued function."""
    x0 = np.asarray(x0, dtype=float)
    cols = []
    for m in range(x0.size):
        hi = x0.copy()
        lo = x0.copy()
        hi[m] += step
        lo[m] -= step
        cols.append((np.asarray(fn(hi)) - np.asarray(fn(lo))) / (2.0 * step))
    return np.column_stack(cols)


class _ScoreWorkspace:
    """Mean score as a function of the flat parameter vector.

    Rebuilds the quadrature grid from the population block on every call, so
    finite differences across population coordinates see the grid move. For
    perturbations that touch a single item block, the cached response terms of
    the other items are reused.
    """

    def __init__(self, data: Dataset, n_points: int):
        self.data = data
        self.n_points = n_points

    def _full(self, flat):
        J, K = self.data.n_items, self.data.n_covariates
        _, _, _, _, gamma, delta = _unpack(flat, J, K)
        grid = build_quadrature(self.n_points, PopulationParams(gamma.copy(), delta.copy()),
                                self.data.covariates)
        return _LikelihoodCore(flat, self.data, grid)

    def mean_score(self, flat) -> np.ndarray:
        return self._full(flat).mean_score()

    def set_base(self, flat):
        self.base = self._full(np.asarray(flat, dtype=float))
        self.base_logf_sum = self.base.logf.sum(axis=2)

    def mean_score_item_perturbed(self, j: int, flat) -> np.ndarray:
        """Mean score at ``flat`` assuming it differs from the base point only
        inside item j's block. Numerically identical to ``mean_score``.
        """
        data = self.data
        base = self.base
        grid = base.grid
        J, K = data.n_items, data.n_covariates
        a, d, B0, B1, _, _ = _unpack(np.asarray(flat, dtype=float), J, K)
        X = data.covariates
        alpha_j = d[j] + X @ B0[j]
        beta_j = a[j] + X @ B1[j]
        A_j = alpha_j[:, None] + beta_j[:, None] * grid.nodes
        logf_j = _log_bernoulli(A_j, data.responses[:, [j]])
        log_joint = grid.log_weights[None, :] + (self.base_logf_sum
                                                 - base.logf[:, :, j] + logf_j)
        norm = logsumexp(log_joint, axis=1)
        post = np.exp(log_joint - norm[:, None])

        R = data.responses[:, None, :] - base.prob
        R[:, :, j] = data.responses[:, [j]] - expit(A_j)
        beta_mat = base.beta.copy()
        beta_mat[:, j] = beta_j
        theta = grid.nodes
        B = np.einsum("iq,iqj->ij", post, R)
        C = np.einsum("iq,iqj->ij", post * theta, R)
        S = np.einsum("iqj,ij->iq", R, beta_mat)
        t1 = (post * S).sum(axis=1)
        t2 = 0.5 * (post * S * (theta - grid.mu[:, None])).sum(axis=1)

        n = data.n_persons
        out = np.empty(flat_dim(J, K))
        p = 2 + 2 * K
        GB = (B.T @ X) / n  # (J, K)
        GC = (C.T @ X) / n
        for jj in range(J):
            b = jj * p
            out[b] = C[:, jj].mean()
            out[b + 1] = B[:, jj].mean()
            out[b + 2:b + 2 + K] = GB[jj]
            out[b + 2 + K:b + p] = GC[jj]
        out[J * p:J * p + K] = (t1 @ X) / n
        out[J * p + K:] = (t2 @ X) / n
        return -out


def observed_information(params: ParamVector, data: Dataset, grid: QuadratureGrid,
                         step: float = 1e-5) -> np.ndarray:
    """Observed information: central finite-difference Jacobian of the analytic
    score of the loss, symmetrized as (H + H') / 2.
    """
    _check_dims(params, data)
    _check_grid(params, data, grid)
    J, K = data.n_items, data.n_covariates
    flat = params.flatten()
    ws = _ScoreWorkspace(data, grid.n_points)
    ws.set_base(flat)
    d = flat.size
    p = 2 + 2 * K
    H = np.empty((d, d))
    for m in range(d):
        hi = flat.copy()
        lo = flat.copy()
        hi[m] += step
        lo[m] -= step
        if m < J * p:
            j = m // p
            col = (ws.mean_score_item_perturbed(j, hi)
                   - ws.mean_score_item_perturbed(j, lo)) / (2.0 * step)
        else:
            col = (ws.mean_score(hi) - ws.mean_score(lo)) / (2.0 * step)
        H[:, m] = col
    if not np.all(np.isfinite(H)):
        bad = int(np.argwhere(~np.isfinite(H))[0][1])
        name = coordinate_names(J, K)[bad]
        raise NumericalError(f"observed information is non-finite at coordinate {name}")
    return 0.5 * (H + H.T)
