"""Monte Carlo study engine: data generation from the study's true model,
per-replication runs of the four comparison methods (selection-only
regularized DIF, naive refit, decorrelated score, anchored Wald), and
aggregation into rejection/bias/variance/SE-recovery metrics.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from multiprocessing import get_context

import numpy as np
from scipy.special import expit

from .em import EmConfig, PenaltyConfig, penalized_em_fit, select_lambda
from .inference import (
    FocalSpec,
    InferenceContext,
    _checked_inverse,
    dscore_test,
    one_step_debias,
)
from .model import (
    Dataset,
    ItemParams,
    NumericalError,
    ParamVector,
    PopulationParams,
    SingularInformationError,
    build_quadrature,
    coordinate_names,
    dif_indices,
    observed_information,
)

COVARIATE_NAMES = ("age", "gender", "product")

# True generating values: per item (d, a, a-DIF on age/gender/product,
# d-DIF on age/gender/product). Items 4-6 carry DIF only under the 50%
# condition; items 7-12 never do.
TRUE_ITEM_TABLE = (
    (0.00, 2.00, (0.20, 0.50, 0.20), (0.20, -0.50, -0.20)),
    (1.20, 1.20, (-0.20, -0.50, 0.00), (-0.20, 0.25, 0.00)),
    (-0.20, 2.00, (-0.25, 0.25, 0.10), (-0.15, -0.25, -0.15)),
    (1.50, 1.50, (0.20, -0.50, -0.20), (0.20, 0.50, 0.20)),
    (1.20, 1.20, (-0.20, -0.50, 0.00), (-0.20, 0.25, 0.00)),
    (1.10, 1.90, (-0.25, 0.25, -0.10), (-0.15, -0.25, 0.15)),
    (-1.80, 2.40, (0.00, 0.00, 0.00), (0.00, 0.00, 0.00)),
    (0.50, 1.50, (0.00, 0.00, 0.00), (0.00, 0.00, 0.00)),
    (0.60, 1.40, (0.00, 0.00, 0.00), (0.00, 0.00, 0.00)),
    (-2.00, 1.80, (0.00, 0.00, 0.00), (0.00, 0.00, 0.00)),
    (0.60, 2.30, (0.00, 0.00, 0.00), (0.00, 0.00, 0.00)),
    (1.60, 1.80, (0.00, 0.00, 0.00), (0.00, 0.00, 0.00)),
)
TRUE_GAMMA = (-0.2, -0.2, -0.2)
TRUE_DELTA = (-0.1, 0.3, 0.1)

# Penalty-rate constants c (lambda = c / sqrt(n)) per DIF condition,
# estimated at n=500 by the study that fixed this design.
LAMBDA_CONSTANTS = {0: 0.8291, 25: 0.6883, 50: 0.5727}

N_ITEMS = len(TRUE_ITEM_TABLE)
N_COVARIATES = 3


@dataclass
class TrueModel:
    """Generating parameters under a DIF condition (percent of DIF items)."""

    dif_pct: int
    params: ParamVector = field(init=False)

    def __post_init__(self):
        if self.dif_pct not in (0, 25, 50):
            raise ValueError("dif_pct must be one of 0, 25, 50")
        n_dif = {0: 0, 25: 3, 50: 6}[self.dif_pct]
        items = []
        for j, (d, a, a_dif, d_dif) in enumerate(TRUE_ITEM_TABLE):
            if j < n_dif:
                items.append(ItemParams(a, d, np.array(d_dif), np.array(a_dif)))
            else:
                items.append(ItemParams(a, d, np.zeros(3), np.zeros(3)))
        pop = PopulationParams(np.array(TRUE_GAMMA), np.array(TRUE_DELTA))
        self.params = ParamVector(items=items, population=pop)

    @property
    def dif_items(self) -> tuple:
        """1-based numbers of the items that truly carry DIF."""
        return tuple(range(1, {0: 0, 25: 3, 50: 6}[self.dif_pct] + 1))


@dataclass
class StudyConfig:
    """Fully crossed design over sample sizes and DIF conditions."""

    sample_sizes: tuple = (500, 1000, 2500)
    dif_conditions: tuple = (0, 25, 50)
    replications: int = 500
    seed: int = 0
    methods: tuple = ("reg-dif", "refit", "dscore", "oracle")
    lambda_constants: dict = field(default_factory=lambda: dict(LAMBDA_CONSTANTS))
    alpha: float = 0.05
    oracle_anchors: tuple = (11, 12)  # 1-based item numbers
    n_quad: int = 49
    max_iter: int = 500
    em_tol: float = 1e-4
    mstep_tol: float = 1e-6

    def __post_init__(self):
        self.sample_sizes = tuple(int(n) for n in self.sample_sizes)
        self.dif_conditions = tuple(int(p) for p in self.dif_conditions)
        self.methods = tuple(self.methods)
        self.lambda_constants = {int(k): float(v) for k, v in self.lambda_constants.items()}
        if self.replications < 1:
            raise ValueError("replications must be at least 1")
        known = {"reg-dif", "refit", "dscore", "oracle"}
        bad = set(self.methods) - known
        if bad:
            raise ValueError(f"unknown methods: {sorted(bad)}")
        for pct in self.dif_conditions:
            if pct not in (0, 25, 50):
                raise ValueError("dif_conditions entries must be 0, 25, or 50")
            if pct not in self.lambda_constants:
                raise ValueError(f"no lambda constant for the {pct}% condition")

    def em_config(self) -> EmConfig:
        return EmConfig(max_iter=self.max_iter, em_tol=self.em_tol,
                        mstep_tol=self.mstep_tol, n_quad=self.n_quad)


def replication_seed(root_seed: int, n: int, dif_pct: int, replication: int) -> np.random.SeedSequence:
    """Independent, order-free stream for one replication: the spawn key is
    the (n, dif_pct, replication) triple, so a record depends only on the
    root seed and its own coordinates, never on scheduling.
    """
    return np.random.SeedSequence(root_seed, spawn_key=(n, dif_pct, replication))


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------

def generate_covariates(n: int, rng: np.random.Generator) -> np.ndarray:
    """Columns (age, gender, product): gender ~ Bernoulli(0.5); age is N(0,1)
    shifted by +0.2 for gender = 1; product is their interaction.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    gender = (rng.random(n) < 0.5).astype(float)
    age = rng.normal(0.0, 1.0, n) + 0.2 * gender
    return np.column_stack([age, gender, age * gender])


def generate_responses(X: np.ndarray, true_model: TrueModel,
                       rng: np.random.Generator) -> np.ndarray:
    """Draw latent traits from the covariate-dependent normal, then Bernoulli
    responses from the item response functions.
    """
    params = true_model.params
    pop = params.population
    mu = X @ pop.mean_effects
    sigma = np.exp(0.5 * (X @ pop.logvar_effects))
    theta = rng.normal(mu, sigma)
    a, d, B0, B1 = params.item_arrays()
    alpha = d[None, :] + X @ B0.T
    beta = a[None, :] + X @ B1.T
    prob = expit(alpha + beta * theta[:, None])
    return (rng.random(prob.shape) < prob).astype(float)


def generate_dataset(n: int, dif_pct: int, rng: np.random.Generator):
    tm = TrueModel(dif_pct)
    X = generate_covariates(n, rng)
    Y = generate_responses(X, tm, rng)
    return Dataset(Y, X), tm


# ---------------------------------------------------------------------------
# One replication
# ---------------------------------------------------------------------------

_COORD_NAMES = coordinate_names(N_ITEMS, N_COVARIATES, list(COVARIATE_NAMES))


def _estimate_dict(flat: np.ndarray) -> dict:
    return {name: float(v) for name, v in zip(_COORD_NAMES, flat)}


def _flagged(p_values: dict, alpha: float) -> list:
    return sorted(int(k[4:]) for k, p in p_values.items() if p is not None and p < alpha)


def _item_wald(fit, hessian, item_j, n, coords=None):
    """Wald statistic for item_j's (0-based) free DIF coordinates against zero.

    Returns (statistic, df, p) with the covariance block taken from the
    inverse information over all free coordinates.
    """
    from scipy.stats import chi2

    fixed = fit.penalty.fixed_zero_mask
    free = np.flatnonzero(~fixed)
    target = dif_indices(item_j, N_COVARIATES) if coords is None else np.asarray(coords)
    target = target[~fixed[target]]
    if target.size == 0:
        return None
    V = _checked_inverse(hessian[np.ix_(free, free)], "constrained-model information")
    pos = np.searchsorted(free, target)
    V_block = V[np.ix_(pos, pos)]
    beta_hat = fit.estimate.flatten()[target]
    T = float(n * beta_hat @ _checked_inverse(V_block, f"item {item_j + 1} DIF covariance") @ beta_hat)
    return T, int(target.size), float(chi2.sf(T, target.size))


def _se_dict(fit, hessian, n) -> dict:
    """Standard errors sqrt(diag(I_free^{-1}) / n) for free coordinates;
    pinned coordinates are absent (no valid SE exists for them).
    """
    fixed = fit.penalty.fixed_zero_mask
    free = np.flatnonzero(~fixed)
    V = _checked_inverse(hessian[np.ix_(free, free)], "constrained-model information")
    se = np.sqrt(np.diag(V) / n)
    return {_COORD_NAMES[idx]: float(s) for idx, s in zip(free, se)}


def _run_penalized(data: Dataset, lam: float, config: StudyConfig):
    penalty = PenaltyConfig.for_model(N_ITEMS, N_COVARIATES, lam)
    return penalized_em_fit(data, penalty, config.em_config())


def _method_reg_dif(fit) -> dict:
    flat = fit.estimate.flatten()
    flagged = []
    for j in range(N_ITEMS):
        if np.any(flat[dif_indices(j, N_COVARIATES)] != 0.0):
            flagged.append(j + 1)
    return {
        "ok": True,
        "estimate": _estimate_dict(flat),
        "flagged_items": flagged,
        "lambda": fit.lam,
        "converged": fit.converged,
        "flags": list(fit.flags),
    }


def _method_dscore(fit, data: Dataset, config: StudyConfig) -> dict:
    ctx = InferenceContext(fit, data, n_quad=config.n_quad)
    lam_prime = fit.lam
    p_values, statistics, errors = {}, {}, {}
    for j in range(N_ITEMS):
        key = f"item{j + 1}"
        try:
            rep = dscore_test(fit, data, FocalSpec.item_dif(j, N_ITEMS, N_COVARIATES),
                              lam_prime, context=ctx)
            p_values[key] = rep.p_value
            statistics[key] = rep.statistic
        except (NumericalError, np.linalg.LinAlgError) as exc:
            p_values[key] = None
            errors[key] = str(exc)
    debiased, se = {}, {}
    blocks = [FocalSpec.item_full(j, N_ITEMS, N_COVARIATES) for j in range(N_ITEMS)]
    blocks.append(FocalSpec.population(N_ITEMS, N_COVARIATES))
    for spec in blocks:
        try:
            deb = one_step_debias(fit, data, spec, lam_prime, alpha=config.alpha, context=ctx)
            for idx, est, s in zip(spec.focal_indices, deb.estimate, deb.se):
                debiased[_COORD_NAMES[idx]] = float(est)
                se[_COORD_NAMES[idx]] = float(s)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            errors[spec.description] = str(exc)
    return {
        "ok": True,
        "p_values": p_values,
        "statistics": statistics,
        "flagged_items": _flagged(p_values, config.alpha),
        "debiased": debiased,
        "se": se,
        "lambda_prime": lam_prime,
        "errors": errors,
    }


def _method_refit(reg_fit, data: Dataset, config: StudyConfig) -> dict:
    flat_pen = reg_fit.estimate.flatten()
    zero_mask = np.zeros(flat_pen.size, dtype=bool)
    selected = {}
    for j in range(N_ITEMS):
        idx = dif_indices(j, N_COVARIATES)
        zeroed = idx[flat_pen[idx] == 0.0]
        zero_mask[zeroed] = True
        kept = [int(i) for i in idx if flat_pen[i] != 0.0]
        selected[f"item{j + 1}"] = [_COORD_NAMES[i] for i in kept]
    penalty = PenaltyConfig.for_model(N_ITEMS, N_COVARIATES, 0.0, fixed_zero_mask=zero_mask)
    fit = penalized_em_fit(data, penalty, config.em_config())
    grid = build_quadrature(config.n_quad, fit.estimate.population, data.covariates)
    hessian = observed_information(fit.estimate, data, grid)
    se = _se_dict(fit, hessian, data.n_persons)
    p_values, errors = {}, {}
    for j in range(N_ITEMS):
        key = f"item{j + 1}"
        if not selected[key]:
            p_values[key] = None
            continue
        try:
            wald = _item_wald(fit, hessian, j, data.n_persons)
            p_values[key] = wald[2]
        except (NumericalError, np.linalg.LinAlgError) as exc:
            p_values[key] = None
            errors[key] = str(exc)
    return {
        "ok": True,
        "estimate": _estimate_dict(fit.estimate.flatten()),
        "se": se,
        "p_values": p_values,
        "flagged_items": _flagged(p_values, config.alpha),
        "selected": selected,
        "converged": fit.converged,
        "errors": errors,
    }


def _method_oracle(data: Dataset, config: StudyConfig) -> dict:
    anchors0 = sorted(a - 1 for a in config.oracle_anchors)
    penalty = PenaltyConfig.for_model(N_ITEMS, N_COVARIATES, 0.0, fixed_zero_items=anchors0)
    fit = penalized_em_fit(data, penalty, config.em_config())
    grid = build_quadrature(config.n_quad, fit.estimate.population, data.covariates)
    hessian = observed_information(fit.estimate, data, grid)
    p_values, errors = {}, {}
    tested = [j for j in range(N_ITEMS) if j not in anchors0]
    for j in tested:
        key = f"item{j + 1}"
        try:
            wald = _item_wald(fit, hessian, j, data.n_persons)
            p_values[key] = wald[2]
        except (NumericalError, np.linalg.LinAlgError) as exc:
            p_values[key] = None
            errors[key] = str(exc)
    flagged = _flagged(p_values, config.alpha)
    # Final estimates and SEs come from the model whose anchor set is the
    # items the Wald tests did not flag (plus the fixed anchors).
    final_anchors0 = sorted(set(anchors0) | {j for j in tested if (j + 1) not in flagged})
    if set(final_anchors0) == set(anchors0):
        final_fit, final_hessian = fit, hessian
    else:
        final_penalty = PenaltyConfig.for_model(N_ITEMS, N_COVARIATES, 0.0,
                                                fixed_zero_items=final_anchors0)
        final_fit = penalized_em_fit(data, final_penalty, config.em_config())
        final_grid = build_quadrature(config.n_quad, final_fit.estimate.population,
                                      data.covariates)
        final_hessian = observed_information(final_fit.estimate, data, final_grid)
    se = _se_dict(final_fit, final_hessian, data.n_persons)
    return {
        "ok": True,
        "estimate": _estimate_dict(final_fit.estimate.flatten()),
        "se": se,
        "p_values": p_values,
        "flagged_items": flagged,
        "anchors": [a + 1 for a in anchors0],
        "final_anchors": [a + 1 for a in final_anchors0],
        "converged": final_fit.converged,
        "errors": errors,
    }


def run_replication(condition, seed, config: StudyConfig) -> dict:
    """One dataset, all requested methods. ``condition`` is (n, dif_pct) and
    ``seed`` an integer replication index resolved through the study's
    counter-based stream split, or an explicit SeedSequence.
    """
    n, dif_pct = int(condition[0]), int(condition[1])
    if isinstance(seed, np.random.SeedSequence):
        ss, rep_idx = seed, -1
    else:
        rep_idx = int(seed)
        ss = replication_seed(config.seed, n, dif_pct, rep_idx)
    rng = np.random.Generator(np.random.PCG64(ss))
    data, _ = generate_dataset(n, dif_pct, rng)

    record = {"n": n, "dif_pct": dif_pct, "replication": rep_idx, "methods": {}}
    methods = record["methods"]
    need_penalized = any(m in config.methods for m in ("reg-dif", "refit", "dscore"))

    reg_fit = None
    if need_penalized:
        lam = select_lambda(n, config.lambda_constants[dif_pct])
        try:
            reg_fit = _run_penalized(data, lam, config)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            for m in ("reg-dif", "refit", "dscore"):
                if m in config.methods:
                    methods[m] = {"ok": False, "error": f"penalized fit failed: {exc}"}

    if reg_fit is not None:
        if "reg-dif" in config.methods:
            methods["reg-dif"] = _method_reg_dif(reg_fit)
        if "dscore" in config.methods:
            try:
                methods["dscore"] = _method_dscore(reg_fit, data, config)
            except (NumericalError, np.linalg.LinAlgError) as exc:
                methods["dscore"] = {"ok": False, "error": str(exc)}
        if "refit" in config.methods:
            try:
                methods["refit"] = _method_refit(reg_fit, data, config)
            except (NumericalError, np.linalg.LinAlgError) as exc:
                methods["refit"] = {"ok": False, "error": str(exc)}

    if "oracle" in config.methods:
        try:
            methods["oracle"] = _method_oracle(data, config)
        except (NumericalError, np.linalg.LinAlgError) as exc:
            methods["oracle"] = {"ok": False, "error": str(exc)}

    return record


def _replication_task(args):
    condition, rep_idx, config = args
    return run_replication(condition, rep_idx, config)


# ---------------------------------------------------------------------------
# Study driver and aggregation
# ---------------------------------------------------------------------------

def run_study(config: StudyConfig, jobs: int = 1):
    """All replications of all crossed conditions, optionally in parallel.
    Returns (metric rows, raw records); identical output for any ``jobs``.
    """
    tasks = []
    for n in config.sample_sizes:
        for pct in config.dif_conditions:
            for r in range(config.replications):
                tasks.append(((n, pct), r, config))
    if jobs > 1 and len(tasks) > 1:
        with get_context("fork").Pool(processes=jobs) as pool:
            records = pool.map(_replication_task, tasks, chunksize=1)
    else:
        records = [_replication_task(t) for t in tasks]
    return aggregate_records(records, config), records


_ESTIMATE_KEY = {"reg-dif": "estimate", "refit": "estimate", "oracle": "estimate",
                 "dscore": "debiased"}
_SE_METHODS = ("refit", "dscore", "oracle")


def _metric_name(dif_pct: int, item: int, true_dif_items) -> str:
    if dif_pct == 0:
        return "type1_error"
    return "power" if item in true_dif_items else "fdr"


def aggregate_records(records, config: StudyConfig) -> list:
    """Rows of (method, n, dif_condition, target, metric, value, n_effective).

    Rejection metrics are per item (type1_error / power / fdr by condition);
    bias and variance are per coordinate, with coordinates pinned or penalized
    to zero entering as zeros for the selection-based methods while the
    debiased estimator always contributes its own values; se_recovery is
    sqrt(mean se^2) / sd(estimates) over replications where an SE exists, and
    the zero-filled variant is added for the refit method. Cells with no
    valid value carry "NA".
    """
    rows = []
    by_cond = {}
    for rec in records:
        by_cond.setdefault((rec["n"], rec["dif_pct"]), []).append(rec)

    for method in config.methods:
        for n in config.sample_sizes:
            for pct in config.dif_conditions:
                recs = [r["methods"].get(method) for r in by_cond.get((n, pct), [])]
                recs = [m for m in recs if m is not None]
                ok = [m for m in recs if m.get("ok")]
                truth = TrueModel(pct)
                true_flat = truth.params.flatten()
                dif_items = set(truth.dif_items)

                # rejection rates
                for j in range(1, N_ITEMS + 1):
                    key = f"item{j}"
                    vals = []
                    for m in ok:
                        if method == "reg-dif":
                            vals.append(1.0 if j in m["flagged_items"] else 0.0)
                            continue
                        if key not in m["p_values"]:
                            continue  # oracle anchors are never tested
                        p = m["p_values"][key]
                        if p is None:
                            if method == "refit" and key not in m.get("errors", {}):
                                # nothing selected: the item cannot be flagged
                                vals.append(0.0)
                            continue
                        vals.append(1.0 if p < config.alpha else 0.0)
                    if method == "oracle" and j in config.oracle_anchors:
                        continue
                    metric = _metric_name(pct, j, dif_items)
                    rows.append(_row(method, n, pct, key, metric, vals))

                # bias and variance per coordinate
                est_key = _ESTIMATE_KEY[method]
                for idx, name in enumerate(_COORD_NAMES):
                    ests = [m[est_key][name] for m in ok if name in m[est_key]]
                    if ests:
                        arr = np.asarray(ests)
                        rows.append(_row_value(method, n, pct, name, "bias",
                                               float(arr.mean() - true_flat[idx]), len(arr)))
                        var = float(arr.var(ddof=1)) if len(arr) > 1 else None
                        rows.append(_row_value(method, n, pct, name, "variance", var, len(arr)))
                    else:
                        rows.append(_row_value(method, n, pct, name, "bias", None, 0))
                        rows.append(_row_value(method, n, pct, name, "variance", None, 0))

                # SE recovery
                if method in _SE_METHODS:
                    for name in _COORD_NAMES:
                        pairs = [(m["se"][name], m[est_key][name])
                                 for m in ok if name in m.get("se", {}) and name in m[est_key]]
                        rows.append(_se_row(method, n, pct, name, "se_recovery", pairs))
                        if method == "refit":
                            filled = [(m.get("se", {}).get(name, 0.0), m[est_key][name])
                                      for m in ok if name in m[est_key]]
                            rows.append(_se_row(method, n, pct, name,
                                                "se_recovery_zero_filled", filled))
    return rows


def _row(method, n, pct, target, metric, vals):
    value = float(np.mean(vals)) if vals else None
    return _row_value(method, n, pct, target, metric, value, len(vals))


def _row_value(method, n, pct, target, metric, value, n_eff):
    return {
        "method": method,
        "n": n,
        "dif_condition": pct,
        "target": target,
        "metric": metric,
        "value": value,
        "n_effective": n_eff,
    }


def _se_row(method, n, pct, name, metric, pairs):
    if len(pairs) < 2:
        return _row_value(method, n, pct, name, metric, None, len(pairs))
    ses = np.asarray([p[0] for p in pairs])
    ests = np.asarray([p[1] for p in pairs])
    sd = ests.std(ddof=1)
    if sd == 0.0:
        return _row_value(method, n, pct, name, metric, None, len(pairs))
    value = float(math.sqrt(float(np.mean(ses ** 2))) / sd)
    return _row_value(method, n, pct, name, metric, value, len(pairs))
