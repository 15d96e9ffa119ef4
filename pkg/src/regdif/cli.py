"""Command-line entry points: ``generate`` simulated datasets, ``fit`` the
penalized model, ``test`` DIF hypotheses with debiased estimates, and
``simulate`` the full Monte Carlo study.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure.
The environment variable REGDIF_SEED overrides any configured seed.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .em import EmConfig, PenaltyConfig, penalized_em_fit, select_lambda
from .fileio import (
    build_manifest,
    fit_from_dict,
    fit_to_dict,
    read_covariates_csv,
    read_json,
    read_responses_csv,
    true_model_to_dict,
    write_covariates_csv,
    write_json,
    write_metrics_csv,
    write_responses_csv,
)
from .inference import FocalSpec, InferenceContext, dscore_test, one_step_debias, wald_test_from_fit
from .model import Dataset, NumericalError, coordinate_names, dif_indices, observed_information
from .simulation import (
    COVARIATE_NAMES,
    StudyConfig,
    TrueModel,
    generate_covariates,
    generate_responses,
    run_study,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _resolve_seed(seed):
    env = os.environ.get("REGDIF_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"REGDIF_SEED must be an integer, got {env!r}")
    return seed


def _parse_item_list(text) -> list:
    try:
        items = [int(t) for t in str(text).split(",") if t != ""]
    except ValueError:
        raise UsageError(f"expected a comma-separated item list, got {text!r}")
    if not items or any(i < 1 for i in items):
        raise UsageError("item numbers are 1-based positive integers")
    return items


def _load_dataset(responses_path, covariates_path):
    Y = read_responses_csv(responses_path)
    X, names = read_covariates_csv(covariates_path)
    return Dataset(Y, X), names


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------

def cmd_generate(args) -> int:
    seed = _resolve_seed(args.seed)
    if args.condition not in (0, 25, 50):
        raise UsageError("--condition must be 0, 25, or 50")
    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    true_model = TrueModel(args.condition)
    X = generate_covariates(args.n, rng)
    Y = generate_responses(X, true_model, rng)
    write_responses_csv(out / "responses.csv", Y)
    write_covariates_csv(out / "covariates.csv", X, COVARIATE_NAMES)
    write_json(out / "truth.json", true_model_to_dict(true_model))
    manifest = build_manifest(
        "generate",
        {"n": args.n, "condition": args.condition, "out": str(out)},
        seed, time.time() - t0,
        {"responses.csv": out / "responses.csv",
         "covariates.csv": out / "covariates.csv",
         "truth.json": out / "truth.json"},
    )
    write_json(out / "manifest.json", manifest)
    print(f"wrote {args.n} persons x {Y.shape[1]} items to {out}")
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def cmd_fit(args) -> int:
    t0 = time.time()
    data, cov_names = _load_dataset(args.responses, args.covariates)
    J, K = data.n_items, data.n_covariates
    if args.lam is not None:
        lam = args.lam
    else:
        lam = select_lambda(data.n_persons, args.lambda_rule)
    fixed_items = [i - 1 for i in _parse_item_list(args.anchor)] if args.anchor else None
    if fixed_items and max(fixed_items) >= J:
        raise UsageError(f"anchor item number exceeds J={J}")
    fixed_mask = None
    if args.fix_zero:
        names = coordinate_names(J, K, cov_names)
        index = {n: i for i, n in enumerate(names)}
        fixed_mask = np.zeros(len(names), dtype=bool)
        for coord in args.fix_zero.split(","):
            if coord not in index:
                raise UsageError(f"unknown coordinate {coord!r}")
            fixed_mask[index[coord]] = True
    penalty = PenaltyConfig.for_model(J, K, lam, fixed_zero_items=fixed_items,
                                      fixed_zero_mask=fixed_mask)
    config = EmConfig(max_iter=args.max_iter, em_tol=args.em_tol,
                      mstep_tol=args.mstep_tol, n_quad=args.q)
    fit = penalized_em_fit(data, penalty, config)
    doc = fit_to_dict(fit, cov_names)
    doc["manifest"] = build_manifest(
        "fit",
        {"lambda": lam, "anchor": args.anchor, "fix_zero": args.fix_zero,
         "q": args.q, "em_tol": args.em_tol, "mstep_tol": args.mstep_tol,
         "max_iter": args.max_iter},
        None, time.time() - t0,
        {"responses": args.responses, "covariates": args.covariates},
    )
    write_json(args.out, doc)
    status = "converged" if fit.converged else "did not converge"
    print(f"fit {status} after {fit.iterations} iterations; "
          f"penalized loss {fit.final_loss:.6f}; wrote {args.out}")
    return 0


# ---------------------------------------------------------------------------
# test
# ---------------------------------------------------------------------------

def _dscore_target_reports(fit, data, ctx, targets, cov_names, lam_prime, alpha):
    J, K = fit.estimate.n_items, fit.estimate.n_covariates
    names = coordinate_names(J, K, cov_names)
    out = []
    for target in targets:
        if isinstance(target, int):  # 1-based item
            j = target - 1
            spec_test = FocalSpec.item_dif(j, J, K)
            spec_debias = FocalSpec.item_full(j, J, K)
            label = f"item{target}"
        else:
            idx = names.index(target)
            spec_test = FocalSpec.single(idx, target)
            spec_debias = spec_test
            label = target
        rep = dscore_test(fit, data, spec_test, lam_prime, context=ctx)
        deb = one_step_debias(fit, data, spec_debias, lam_prime, alpha=alpha, context=ctx)
        coords = [names[i] for i in spec_debias.focal_indices]
        out.append({
            "target": label,
            "statistic": rep.statistic,
            "df": rep.df,
            "p_value": rep.p_value,
            "debiased": {c: float(v) for c, v in zip(coords, deb.estimate)},
            "se": {c: float(v) for c, v in zip(coords, deb.se)},
            "ci_lower": {c: float(v) for c, v in zip(coords, deb.ci_lower)},
            "ci_upper": {c: float(v) for c, v in zip(coords, deb.ci_upper)},
        })
    return out


def cmd_test(args) -> int:
    t0 = time.time()
    fit, fit_cov_names = fit_from_dict(read_json(args.fit))
    data, cov_names = _load_dataset(args.responses, args.covariates)
    if data.n_items != fit.estimate.n_items or data.n_covariates != fit.estimate.n_covariates:
        raise ValueError(
            f"fit is for {fit.estimate.n_items} items x {fit.estimate.n_covariates} covariates, "
            f"data has {data.n_items} x {data.n_covariates}"
        )
    if cov_names != fit_cov_names:
        raise ValueError(f"covariate headers {cov_names} do not match the fit's {fit_cov_names}")
    J, K = data.n_items, data.n_covariates

    targets = []
    if args.all_items:
        targets = list(range(1, J + 1))
    if args.item:
        targets.extend(_parse_item_list(args.item))
    if args.coord:
        targets.extend(args.coord.split(","))
    if not targets:
        raise UsageError("choose targets via --item, --coord, or --all-items")

    lam_prime = fit.lam if args.lambda_prime is None else args.lambda_prime
    doc = {"method": args.method, "alpha": args.alpha, "lambda_prime": lam_prime}

    if args.method == "dscore":
        ctx = InferenceContext(fit, data)
        doc["targets"] = _dscore_target_reports(fit, data, ctx, targets, cov_names,
                                                lam_prime, args.alpha)
    else:  # oracle-wald on an anchored unpenalized fit
        if fit.lam != 0:
            raise UsageError("--method oracle-wald needs an unpenalized fit (--lambda 0)")
        if fit.penalty is None or not fit.penalty.fixed_zero_mask.any():
            raise UsageError("--method oracle-wald needs a fit with anchored items")
        from .model import build_quadrature
        grid = build_quadrature(fit.config.n_quad, fit.estimate.population, data.covariates)
        hessian = observed_information(fit.estimate, data, grid)
        reports = []
        for target in targets:
            if not isinstance(target, int):
                raise UsageError("oracle-wald targets are items, not coordinates")
            j = target - 1
            if fit.penalty.fixed_zero_mask[dif_indices(j, K)].all():
                raise UsageError(f"item {target} is an anchor; it cannot be tested")
            wald = wald_test_from_fit(fit, hessian, j, data.n_persons)
            reports.append({"target": f"item{target}", "statistic": wald.statistic,
                            "df": wald.df, "p_value": wald.p_value})
        doc["targets"] = reports

    doc["manifest"] = build_manifest(
        "test",
        {"method": args.method, "alpha": args.alpha, "lambda_prime": lam_prime},
        None, time.time() - t0,
        {"fit": args.fit, "responses": args.responses, "covariates": args.covariates},
    )
    write_json(args.out, doc)
    for rep in doc["targets"]:
        p = rep["p_value"]
        print(f"{rep['target']}: statistic={rep['statistic']:.4f} df={rep['df']} p={p:.4g}")
    return 0


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

_STUDY_KEYS = {"sample_sizes", "dif_conditions", "replications", "seed", "methods",
               "lambda_constants", "alpha", "oracle_anchors", "n_quad", "max_iter",
               "em_tol", "mstep_tol"}


def cmd_simulate(args) -> int:
    t0 = time.time()
    doc = read_json(args.config)
    unknown = set(doc) - _STUDY_KEYS
    if unknown:
        raise UsageError(f"unknown study-config keys: {sorted(unknown)}")
    doc["seed"] = _resolve_seed(doc.get("seed", 0))
    try:
        config = StudyConfig(**doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid study config: {exc}")

    out = Path(args.out)
    records_dir = out / "records"
    records_dir.mkdir(parents=True, exist_ok=True)
    jobs = args.jobs if args.jobs else (os.cpu_count() or 1)

    rows, records = run_study(config, jobs=jobs)

    failures = 0
    for rec in records:
        name = f"rep_n{rec['n']}_c{rec['dif_pct']}_r{rec['replication']:05d}.json"
        write_json(records_dir / name, rec)
        failures += sum(1 for m in rec["methods"].values() if not m.get("ok"))
    write_metrics_csv(out / "metrics.csv", rows)
    manifest = build_manifest(
        "simulate",
        {k: doc.get(k) for k in sorted(_STUDY_KEYS & set(doc))},
        config.seed, time.time() - t0,
        {"config": args.config},
    )
    write_json(out / "manifest.json", manifest)
    print(f"wrote {len(records)} replication records and metrics.csv to {out}")
    if failures:
        print(f"warning: {failures} method runs failed; see the records for details",
              file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="regdif", description=__doc__)
    parser.add_argument("--version", action="version", version=f"regdif {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a dataset from the study's true model")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--condition", type=int, required=True,
                   help="percent of DIF items: 0, 25, or 50")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    f = sub.add_parser("fit", help="penalized EM fit")
    f.add_argument("--responses", required=True)
    f.add_argument("--covariates", required=True)
    lam_group = f.add_mutually_exclusive_group(required=True)
    lam_group.add_argument("--lambda", dest="lam", type=float,
                           help="L1 penalty weight")
    lam_group.add_argument("--lambda-rule", dest="lambda_rule", type=float, metavar="C",
                           help="use C / sqrt(n)")
    f.add_argument("--anchor", help="comma-separated 1-based items whose DIF is pinned at 0")
    f.add_argument("--fix-zero", dest="fix_zero",
                   help="comma-separated coordinate names pinned at 0")
    f.add_argument("--q", type=int, default=49, help="quadrature points")
    f.add_argument("--em-tol", type=float, default=1e-4)
    f.add_argument("--mstep-tol", type=float, default=1e-6)
    f.add_argument("--max-iter", type=int, default=500)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("test", help="DIF tests and one-step debiased estimates")
    t.add_argument("--fit", required=True)
    t.add_argument("--responses", required=True)
    t.add_argument("--covariates", required=True)
    t.add_argument("--item", help="comma-separated 1-based item numbers")
    t.add_argument("--coord", help="comma-separated coordinate names (df=1 each)")
    t.add_argument("--all-items", action="store_true")
    t.add_argument("--alpha", type=float, default=0.05)
    t.add_argument("--lambda-prime", dest="lambda_prime", type=float,
                   help="projection penalty; defaults to the fit's lambda")
    t.add_argument("--method", choices=["dscore", "oracle-wald"], default="dscore")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", help="run a Monte Carlo study from a config file")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=0,
                   help="parallel workers (default: all cores); outputs do not depend on it")
    s.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
