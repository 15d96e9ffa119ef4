"""End-to-end CLI tests through subprocesses: file formats, exit codes,
determinism, and the documented coordinate-name scheme.
"""

import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest
from scipy.stats import chi2


def run_cli(*args, env_extra=None, cwd=None):
    import os
    env = dict(os.environ)
    env.pop("REGDIF_SEED", None)
    if env_extra:
        env.update(env_extra)
    return subprocess.run([sys.executable, "-m", "regdif", *map(str, args)],
                          capture_output=True, text=True, env=env, cwd=cwd)


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "gen"
    res = run_cli("generate", "--n", 80, "--condition", 25, "--seed", 11, "--out", out)
    assert res.returncode == 0, res.stderr
    return out


@pytest.fixture(scope="module")
def small_fit(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit") / "fit.json"
    res = run_cli("fit", "--responses", dataset_dir / "responses.csv",
                  "--covariates", dataset_dir / "covariates.csv",
                  "--lambda-rule", 0.6883, "--q", 11, "--em-tol", 1e-3,
                  "--out", out)
    assert res.returncode == 0, res.stderr
    return out


class TestGenerate:
    def test_row_counts(self, tmp_path):
        out = tmp_path / "g"
        res = run_cli("generate", "--n", 10, "--condition", 0, "--seed", 1, "--out", out)
        assert res.returncode == 0, res.stderr
        lines = (out / "responses.csv").read_text().strip().split("\n")
        assert len(lines) == 11
        assert lines[0].split(",") == [f"item_{j}" for j in range(1, 13)]
        cov_header = (out / "covariates.csv").read_text().split("\n")[0]
        assert cov_header == "age,gender,product"
        assert (out / "manifest.json").exists()

    def test_same_seed_identical_digests(self, tmp_path):
        r1 = run_cli("generate", "--n", 25, "--condition", 50, "--seed", 7,
                     "--out", tmp_path / "a")
        r2 = run_cli("generate", "--n", 25, "--condition", 50, "--seed", 7,
                     "--out", tmp_path / "b")
        assert r1.returncode == 0 and r2.returncode == 0
        for name in ("responses.csv", "covariates.csv", "truth.json"):
            assert digest(tmp_path / "a" / name) == digest(tmp_path / "b" / name)

    def test_truth_respects_condition(self, dataset_dir):
        truth = json.loads((dataset_dir / "truth.json").read_text())
        assert truth["dif_condition"] == 25
        for item in truth["items"]:
            if item["item"] in (4, 5, 6):
                assert all(v == 0.0 for v in item["beta0"].values())
                assert all(v == 0.0 for v in item["beta1"].values())
            if item["item"] == 1:
                assert item["beta1"]["gender"] == 0.5
        assert truth["population"]["gamma"]["age"] == -0.2

    def test_env_seed_override(self, tmp_path):
        r1 = run_cli("generate", "--n", 15, "--condition", 0, "--seed", 1,
                     "--out", tmp_path / "a", env_extra={"REGDIF_SEED": "123"})
        r2 = run_cli("generate", "--n", 15, "--condition", 0, "--seed", 999,
                     "--out", tmp_path / "b", env_extra={"REGDIF_SEED": "123"})
        assert digest(tmp_path / "a" / "responses.csv") == digest(tmp_path / "b" / "responses.csv")
        manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
        assert manifest["seed"] == 123

    def test_bad_condition_exits_1(self, tmp_path):
        res = run_cli("generate", "--n", 5, "--condition", 30, "--seed", 0,
                      "--out", tmp_path / "x")
        assert res.returncode == 1
        assert "condition" in res.stderr


class TestFit:
    def test_total_shrinkage_zeroes_dif(self, dataset_dir, tmp_path):
        out = tmp_path / "fit.json"
        res = run_cli("fit", "--responses", dataset_dir / "responses.csv",
                      "--covariates", dataset_dir / "covariates.csv",
                      "--lambda", 1e6, "--q", 11, "--em-tol", 1e-3, "--out", out)
        assert res.returncode == 0, res.stderr
        doc = json.loads(out.read_text())
        for name, val in doc["estimate"].items():
            if "_beta0_" in name or "_beta1_" in name:
                assert val == 0.0
        assert np.all(np.diff(doc["trace"]) <= 1e-8)

    def test_anchored_fit_pins_dif(self, dataset_dir, tmp_path):
        out = tmp_path / "anchored.json"
        res = run_cli("fit", "--responses", dataset_dir / "responses.csv",
                      "--covariates", dataset_dir / "covariates.csv",
                      "--lambda", 0, "--anchor", "11,12", "--q", 11,
                      "--em-tol", 1e-3, "--out", out)
        assert res.returncode == 0, res.stderr
        doc = json.loads(out.read_text())
        fixed = set(doc["fixed_zero"])
        for j in (11, 12):
            for fam in ("beta0", "beta1"):
                for cov in ("age", "gender", "product"):
                    assert f"item{j}_{fam}_{cov}" in fixed
        assert len(fixed) == 12
        for name in fixed:
            assert doc["estimate"][name] == 0.0

    def test_lambda_required(self, dataset_dir, tmp_path):
        res = run_cli("fit", "--responses", dataset_dir / "responses.csv",
                      "--covariates", dataset_dir / "covariates.csv",
                      "--out", tmp_path / "f.json")
        assert res.returncode == 1

    def test_dimension_mismatch_names_shapes(self, dataset_dir, tmp_path):
        bad = tmp_path / "short.csv"
        lines = (dataset_dir / "covariates.csv").read_text().strip().split("\n")
        bad.write_text("\n".join(lines[:40]) + "\n")
        res = run_cli("fit", "--responses", dataset_dir / "responses.csv",
                      "--covariates", bad, "--lambda", 0.1, "--out", tmp_path / "f.json")
        assert res.returncode == 1
        assert "80" in res.stderr and "39" in res.stderr

    def test_parse_error_names_file_and_line(self, dataset_dir, tmp_path):
        bad = tmp_path / "bad.csv"
        lines = (dataset_dir / "responses.csv").read_text().strip().split("\n")
        lines[3] = lines[3].replace("1", "2", 1) if "1" in lines[3] else lines[3] + "x"
        bad.write_text("\n".join(lines) + "\n")
        res = run_cli("fit", "--responses", bad,
                      "--covariates", dataset_dir / "covariates.csv",
                      "--lambda", 0.1, "--out", tmp_path / "f.json")
        assert res.returncode == 1
        assert "bad.csv" in res.stderr and ":4" in res.stderr


class TestTestCommand:
    def test_item_level_df(self, dataset_dir, small_fit, tmp_path):
        out = tmp_path / "report.json"
        res = run_cli("test", "--fit", small_fit,
                      "--responses", dataset_dir / "responses.csv",
                      "--covariates", dataset_dir / "covariates.csv",
                      "--item", 3, "--out", out)
        assert res.returncode == 0, res.stderr
        doc = json.loads(out.read_text())
        (rep,) = doc["targets"]
        assert rep["target"] == "item3"
        assert rep["df"] == 6
        assert rep["p_value"] == pytest.approx(chi2.sf(rep["statistic"], 6), abs=1e-12)
        assert set(rep["debiased"]) == {f"item3_{c}" for c in
                                        ["a", "d", "beta0_age", "beta0_gender",
                                         "beta0_product", "beta1_age", "beta1_gender",
                                         "beta1_product"]}
        for name, lo in rep["ci_lower"].items():
            assert lo < rep["ci_upper"][name]

    def test_single_coordinate_df(self, dataset_dir, small_fit, tmp_path):
        out = tmp_path / "coord.json"
        res = run_cli("test", "--fit", small_fit,
                      "--responses", dataset_dir / "responses.csv",
                      "--covariates", dataset_dir / "covariates.csv",
                      "--coord", "item3_beta1_gender", "--out", out)
        assert res.returncode == 0, res.stderr
        (rep,) = json.loads(out.read_text())["targets"]
        assert rep["df"] == 1
        assert list(rep["debiased"]) == ["item3_beta1_gender"]

    def test_oracle_wald_from_anchored_fit(self, dataset_dir, tmp_path):
        fit_path = tmp_path / "anchored.json"
        res = run_cli("fit", "--responses", dataset_dir / "responses.csv",
                      "--covariates", dataset_dir / "covariates.csv",
                      "--lambda", 0, "--anchor", "11,12", "--q", 11,
                      "--em-tol", 1e-3, "--out", fit_path)
        assert res.returncode == 0, res.stderr
        out = tmp_path / "wald.json"
        res = run_cli("test", "--fit", fit_path,
                      "--responses", dataset_dir / "responses.csv",
                      "--covariates", dataset_dir / "covariates.csv",
                      "--method", "oracle-wald", "--item", "1,2", "--out", out)
        assert res.returncode == 0, res.stderr
        doc = json.loads(out.read_text())
        assert [t["target"] for t in doc["targets"]] == ["item1", "item2"]
        assert all(t["df"] == 6 for t in doc["targets"])

    def test_oracle_wald_rejects_penalized_fit(self, dataset_dir, small_fit, tmp_path):
        res = run_cli("test", "--fit", small_fit,
                      "--responses", dataset_dir / "responses.csv",
                      "--covariates", dataset_dir / "covariates.csv",
                      "--method", "oracle-wald", "--item", 1,
                      "--out", tmp_path / "w.json")
        assert res.returncode == 1

    def test_numerical_failure_exits_2(self, dataset_dir, small_fit, tmp_path):
        doc = json.loads(small_fit.read_text())
        doc["estimate"]["pop_delta_age"] = 1000.0
        broken = tmp_path / "broken.json"
        broken.write_text(json.dumps(doc))
        res = run_cli("test", "--fit", broken,
                      "--responses", dataset_dir / "responses.csv",
                      "--covariates", dataset_dir / "covariates.csv",
                      "--item", 1, "--out", tmp_path / "r.json")
        assert res.returncode == 2


class TestSimulate:
    CONFIG = {
        "sample_sizes": [150],
        "dif_conditions": [0],
        "replications": 2,
        "seed": 31,
        "methods": ["reg-dif"],
        "n_quad": 11,
        "em_tol": 1e-3,
    }

    def _run(self, tmp_path, name, config=None, jobs=1, env_extra=None):
        cfg_path = tmp_path / f"{name}.json"
        cfg_path.write_text(json.dumps(config or self.CONFIG))
        out = tmp_path / name
        res = run_cli("simulate", "--config", cfg_path, "--out", out,
                      "--jobs", jobs, env_extra=env_extra)
        assert res.returncode == 0, res.stderr
        return out

    def test_outputs_and_schema(self, tmp_path):
        out = self._run(tmp_path, "s1")
        recs = sorted((out / "records").iterdir())
        assert len(recs) == 2
        assert recs[0].name == "rep_n150_c0_r00000.json"
        lines = (out / "metrics.csv").read_text().strip().split("\n")
        assert lines[0] == "method,n,dif_condition,target,metric,value,n_effective"
        t1 = [l for l in lines if ",type1_error," in l]
        assert len(t1) == 12
        assert (out / "manifest.json").exists()

    def test_byte_identical_reruns_and_jobs(self, tmp_path):
        out1 = self._run(tmp_path, "r1", jobs=1)
        out2 = self._run(tmp_path, "r2", jobs=1)
        out3 = self._run(tmp_path, "r3", jobs=2)
        d1, d2, d3 = (digest(o / "metrics.csv") for o in (out1, out2, out3))
        assert d1 == d2 == d3
        for rec in (out1 / "records").iterdir():
            assert digest(rec) == digest(out3 / "records" / rec.name)

    def test_env_seed_override(self, tmp_path):
        out1 = self._run(tmp_path, "e1", env_extra={"REGDIF_SEED": "77"})
        out2 = self._run(tmp_path, "e2")
        assert digest(out1 / "metrics.csv") != digest(out2 / "metrics.csv")
        assert json.loads((out1 / "manifest.json").read_text())["seed"] == 77

    def test_unknown_config_key_exits_1(self, tmp_path):
        cfg = dict(self.CONFIG)
        cfg["bogus"] = 1
        cfg_path = tmp_path / "bad.json"
        cfg_path.write_text(json.dumps(cfg))
        res = run_cli("simulate", "--config", cfg_path, "--out", tmp_path / "bad")
        assert res.returncode == 1
        assert "bogus" in res.stderr


class TestUsage:
    def test_version(self):
        res = run_cli("--version")
        assert res.returncode == 0
        assert "regdif" in res.stdout

    def test_no_command_exits_1(self):
        res = run_cli()
        assert res.returncode == 1
