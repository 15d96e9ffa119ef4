"""Shared fixtures: random model/dataset builders in the range of the study's
generating values, and a small identified-model ML fit reused across tests.
"""

import numpy as np
import pytest

import regdif as rd
from regdif.simulation import TrueModel, generate_covariates


def table2_params(dif_pct=50):
    return TrueModel(dif_pct).params


def TABLE2_COVS(n, rng):
    return generate_covariates(n, rng)


def random_model(seed, n, n_items, n_cov, max_dif=0.4):
    """Random parameters in a moderate range plus a dataset drawn from them."""
    rng = np.random.default_rng(seed)
    items = [
        rd.ItemParams(
            rng.uniform(0.6, 2.2),
            rng.uniform(-1.5, 1.5),
            rng.uniform(-max_dif, max_dif, n_cov),
            rng.uniform(-max_dif, max_dif, n_cov),
        )
        for _ in range(n_items)
    ]
    pop = rd.PopulationParams(rng.uniform(-0.3, 0.3, n_cov), rng.uniform(-0.3, 0.3, n_cov))
    pv = rd.ParamVector(items, pop)
    X = rng.normal(size=(n, n_cov))
    theta = rng.normal(X @ pop.mean_effects, np.exp(0.5 * X @ pop.logvar_effects))
    a, d, B0, B1 = pv.item_arrays()
    prob = 1.0 / (1.0 + np.exp(-((d[None, :] + X @ B0.T) + (a[None, :] + X @ B1.T) * theta[:, None])))
    Y = (rng.random((n, n_items)) < prob).astype(float)
    return pv, rd.Dataset(Y, X)


def random_dataset(seed, n, dif_pct=0):
    rng = np.random.default_rng(seed)
    from regdif.simulation import generate_dataset
    data, tm = generate_dataset(n, dif_pct, rng)
    return data, tm


def anchored_ml_fit(data, anchors, extra_fixed_items=(), n_quad=21, polish=True):
    """Unpenalized EM fit with the given 0-based items' DIF blocks pinned,
    refined to a stationary point.
    """
    J, K = data.n_items, data.n_covariates
    penalty = rd.PenaltyConfig.for_model(J, K, 0.0,
                                         fixed_zero_items=list(anchors) + list(extra_fixed_items))
    config = rd.EmConfig(em_tol=1e-8, n_quad=n_quad)
    fit = rd.penalized_em_fit(data, penalty, config)
    if polish:
        fit = rd.polish_ml_fit(fit, data)
    return fit


@pytest.fixture(scope="session")
def small_ml_fit():
    """Identified 4-item model fit to a stationary point of the plain loss."""
    pv, data = random_model(seed=77, n=300, n_items=4, n_cov=2, max_dif=0.0)
    fit = anchored_ml_fit(data, anchors=range(4))
    return fit, data


@pytest.fixture(scope="session")
def plain_2pl_fit():
    """Covariate-free 4-item model (K=0) at an exact ML stationary point."""
    pv, data = random_model(seed=78, n=300, n_items=4, n_cov=0)
    penalty = rd.PenaltyConfig.for_model(4, 0, 0.0)
    fit = rd.penalized_em_fit(data, penalty, rd.EmConfig(em_tol=1e-8, n_quad=21))
    fit = rd.polish_ml_fit(fit, data)
    return fit, data
