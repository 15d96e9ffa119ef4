"""Stable on-disk formats: CSV data interchange, JSON parameter/report files,
and the run manifest. Floats are serialized with Python's shortest
round-trip repr (at most 17 significant digits), so equal values always
produce equal bytes and parsing recovers them exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .em import EmConfig, FitResult, PenaltyConfig
from .model import ParamVector, coordinate_names, flat_dim


def fmt(value) -> str:
    """Canonical text form of a cell: shortest round-trip repr for floats,
    plain str otherwise, "NA" for missing.
    """
    if value is None:
        return "NA"
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{path}: invalid JSON ({exc})") from exc


def sha256_file(path) -> str:
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# CSV data files
# ---------------------------------------------------------------------------

def write_responses_csv(path, responses: np.ndarray):
    responses = np.asarray(responses)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"item_{j + 1}" for j in range(responses.shape[1])])
        for row in responses:
            w.writerow([str(int(v)) for v in row])


def write_covariates_csv(path, covariates: np.ndarray, names):
    covariates = np.asarray(covariates)
    if covariates.shape[1] != len(names):
        raise ValueError("covariate names do not match the matrix width")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(names))
        for row in covariates:
            w.writerow([fmt(float(v)) for v in row])


def _read_csv_matrix(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}:1: empty file, expected a header row")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValueError(
                    f"{path}:{lineno}: expected {len(header)} fields, found {len(row)}"
                )
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric entry") from None
    if not rows:
        raise ValueError(f"{path}: no data rows")
    return header, np.asarray(rows)


def read_responses_csv(path) -> np.ndarray:
    header, mat = _read_csv_matrix(path)
    if not np.all((mat == 0.0) | (mat == 1.0)):
        bad = int(np.argwhere(~((mat == 0.0) | (mat == 1.0)))[0][0]) + 2
        raise ValueError(f"{path}:{bad}: responses must be 0 or 1")
    return mat


def read_covariates_csv(path):
    header, mat = _read_csv_matrix(path)
    return mat, list(header)


# ---------------------------------------------------------------------------
# Fit files
# ---------------------------------------------------------------------------

def fit_to_dict(fit: FitResult, covariate_names_list) -> dict:
    J, K = fit.estimate.n_items, fit.estimate.n_covariates
    names = coordinate_names(J, K, covariate_names_list)
    flat = fit.estimate.flatten()
    penalty = fit.penalty
    config = fit.config or EmConfig()
    return {
        "n_items": J,
        "n_covariates": K,
        "covariate_names": list(covariate_names_list),
        "lambda": fit.lam,
        "estimate": {name: float(v) for name, v in zip(names, flat)},
        "fixed_zero": [names[i] for i in np.flatnonzero(penalty.fixed_zero_mask)]
        if penalty is not None else [],
        "penalized": [names[i] for i in np.flatnonzero(penalty.penalized_mask)]
        if penalty is not None else [],
        "iterations": fit.iterations,
        "converged": bool(fit.converged),
        "trace": [float(v) for v in fit.trace],
        "final_loss": float(fit.final_loss),
        "flags": list(fit.flags),
        "n_quad": config.n_quad,
        "em_tol": config.em_tol,
        "mstep_tol": config.mstep_tol,
        "max_iter": config.max_iter,
    }


def fit_from_dict(doc: dict):
    """Rebuild (FitResult, covariate_names) from a fit document."""
    J, K = int(doc["n_items"]), int(doc["n_covariates"])
    cov_names = list(doc["covariate_names"])
    names = coordinate_names(J, K, cov_names)
    est = doc["estimate"]
    missing = [n for n in names if n not in est]
    if missing:
        raise ValueError(f"fit file is missing coordinates, e.g. {missing[0]}")
    flat = np.array([float(est[n]) for n in names])
    d = flat_dim(J, K)
    name_to_idx = {n: i for i, n in enumerate(names)}
    fixed = np.zeros(d, dtype=bool)
    for n in doc.get("fixed_zero", []):
        fixed[name_to_idx[n]] = True
    penalized = np.zeros(d, dtype=bool)
    for n in doc.get("penalized", []):
        penalized[name_to_idx[n]] = True
    penalty = PenaltyConfig(lam=float(doc["lambda"]), penalized_mask=penalized,
                            fixed_zero_mask=fixed)
    config = EmConfig(
        max_iter=int(doc.get("max_iter", 500)),
        em_tol=float(doc.get("em_tol", 1e-4)),
        mstep_tol=float(doc.get("mstep_tol", 1e-6)),
        n_quad=int(doc.get("n_quad", 49)),
    )
    fit = FitResult(
        estimate=ParamVector.from_flat(flat, J, K),
        lam=float(doc["lambda"]),
        iterations=int(doc.get("iterations", 0)),
        converged=bool(doc.get("converged", True)),
        trace=np.asarray(doc.get("trace", [doc.get("final_loss", 0.0)])),
        final_loss=float(doc.get("final_loss", 0.0)),
        flags=list(doc.get("flags", [])),
        penalty=penalty,
        config=config,
    )
    return fit, cov_names


# ---------------------------------------------------------------------------
# True-model files
# ---------------------------------------------------------------------------

def true_model_to_dict(true_model) -> dict:
    from .simulation import COVARIATE_NAMES
    params = true_model.params
    items = []
    for j, it in enumerate(params.items):
        items.append({
            "item": j + 1,
            "a": it.slope,
            "d": it.intercept,
            "beta0": {c: float(v) for c, v in zip(COVARIATE_NAMES, it.intercept_dif)},
            "beta1": {c: float(v) for c, v in zip(COVARIATE_NAMES, it.slope_dif)},
        })
    pop = params.population
    return {
        "dif_condition": true_model.dif_pct,
        "items": items,
        "population": {
            "gamma": {c: float(v) for c, v in zip(COVARIATE_NAMES, pop.mean_effects)},
            "delta": {c: float(v) for c, v in zip(COVARIATE_NAMES, pop.logvar_effects)},
        },
    }


# ---------------------------------------------------------------------------
# Metrics table
# ---------------------------------------------------------------------------

METRIC_COLUMNS = ("method", "n", "dif_condition", "target", "metric", "value", "n_effective")


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([fmt(row[c]) for c in METRIC_COLUMNS])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [dict(r) for r in reader]


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

def build_manifest(command: str, config: dict, seed, wall_clock_sec: float,
                   input_paths: dict) -> dict:
    from . import __version__
    return {
        "command": command,
        "config": config,
        "seed": seed,
        "version": __version__,
        "wall_clock_sec": wall_clock_sec,
        "input_digests": {str(k): sha256_file(p) for k, p in input_paths.items()},
    }
