"""End-to-end command line flows in temporary directories.

Covers config validation, strict data parsing with line numbers, fit
artifacts, determinism of outputs, and exit codes.
"""

import json
import math
import os

import numpy as np
import pytest

from sparsekl.cli import main, read_csv, read_xy_data, write_csv
from sparsekl.cox import sample_inhomogeneous_pp
from sparsekl.svgp import elbo, load_checkpoint


def write_config(tmp_path, name, doc):
    path = tmp_path / name
    path.write_text(json.dumps(doc), encoding="utf-8")
    return str(path)


def regression_dataset(tmp_path, n=25, seed=0):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0.0, 1.0, size=n))
    y = np.sin(2 * np.pi * x) + 0.2 * rng.standard_normal(n)
    path = tmp_path / "train.csv"
    write_csv(path, ["x1", "y"], np.column_stack([x, y]))
    return str(path)


def small_fit_config(tmp_path, data, out, extra_model=None, iters=12):
    model = {
        "kernel": {"variance": 1.0, "lengthscales": [0.3]},
        "num_inducing": 4,
        "noise_var": 0.1,
    }
    model.update(extra_model or {})
    return write_config(
        tmp_path,
        "fit.json",
        {
            "data": data,
            "out": out,
            "seed": 0,
            "model": model,
            "optimizer": {"max_iters": iters, "refine_iters": iters},
        },
    )


class TestConfigValidation:
    def test_unknown_keys_are_listed_with_paths(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path,
            "bad.json",
            {
                "data": "x.csv",
                "model": {
                    "kernel": {"variance": 1.0, "lengthscales": [1.0], "shape": 3},
                    "num_inducing": 2,
                    "noise_var": 0.1,
                },
                "extra_top": True,
            },
        )
        rc = main(["fit-regression", "--config", cfg])
        err = capsys.readouterr().err
        assert rc == 2
        assert "unknown keys" in err
        assert "extra_top" in err and "model.kernel.shape" in err

    def test_missing_required_keys(self, tmp_path, capsys):
        cfg = write_config(tmp_path, "bad.json", {"data": "x.csv", "model": {}})
        rc = main(["fit-regression", "--config", cfg])
        err = capsys.readouterr().err
        assert rc == 2
        assert "missing required" in err
        assert "model.kernel" in err and "model.noise_var" in err

    def test_bad_value_types(self, tmp_path, capsys):
        cfg = write_config(
            tmp_path,
            "bad.json",
            {
                "data": "x.csv",
                "model": {
                    "kernel": {"variance": -2.0, "lengthscales": [1.0]},
                    "num_inducing": 2,
                    "noise_var": 0.1,
                },
            },
        )
        rc = main(["fit-regression", "--config", cfg])
        err = capsys.readouterr().err
        assert rc == 2
        assert "model.kernel.variance" in err and "positive" in err

    def test_config_file_missing(self, tmp_path, capsys):
        rc = main(["verify", "--config", str(tmp_path / "absent.json")])
        assert rc == 2
        assert "cannot read config" in capsys.readouterr().err

    def test_config_not_json(self, tmp_path, capsys):
        path = tmp_path / "broken.json"
        path.write_text("{not json", encoding="utf-8")
        rc = main(["verify", "--config", str(path)])
        assert rc == 2
        assert "not valid JSON" in capsys.readouterr().err

    def test_data_path_must_exist(self, tmp_path, capsys):
        cfg = small_fit_config(tmp_path, str(tmp_path / "nope.csv"), str(tmp_path / "o"))
        rc = main(["fit-regression", "--config", cfg])
        assert rc == 2
        assert "does not exist" in capsys.readouterr().err

    def test_cox_domain_dimension_must_match_kernel(self, tmp_path, capsys):
        events = tmp_path / "ev.csv"
        write_csv(events, ["x1"], [[0.5]])
        cfg = write_config(
            tmp_path,
            "cox.json",
            {
                "data": str(events),
                "out": str(tmp_path / "o"),
                "model": {
                    "kernel": {"variance": 1.0, "lengthscales": [1.0, 1.0]},
                    "num_inducing": 2,
                    "domain": [[0.0, 1.0]],
                },
            },
        )
        rc = main(["fit-cox", "--config", cfg])
        assert rc == 2
        assert "domain" in capsys.readouterr().err


class TestCsvHandling:
    def test_roundtrip_values_are_exact(self, tmp_path):
        path = tmp_path / "t.csv"
        rows = np.array([[0.1, 1.0 / 3.0], [math.pi, 1e-300]])
        write_csv(path, ["a", "b"], rows)
        back = read_csv(str(path), ["a", "b"])
        np.testing.assert_array_equal(back, rows)

    def test_write_is_deterministic_bytes(self, tmp_path):
        rows = [[0.5, 2.0], [1.5, -3.25]]
        p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
        write_csv(p1, ["u", "v"], rows)
        write_csv(p2, ["u", "v"], rows)
        assert p1.read_bytes() == p2.read_bytes()

    def test_header_mismatch_names_line_one(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("wrong,cols\n1.0,2.0\n", encoding="utf-8")
        with pytest.raises(Exception, match="line 1"):
            read_csv(str(path), ["a", "b"])

    def test_field_count_error_names_line(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,b\n1.0,2.0\n3.0\n", encoding="utf-8")
        with pytest.raises(Exception, match="line 3"):
            read_csv(str(path), ["a", "b"])

    def test_non_numeric_error_names_line(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,b\n1.0,fish\n", encoding="utf-8")
        with pytest.raises(Exception, match="line 2"):
            read_csv(str(path), ["a", "b"])

    def test_non_finite_rejected(self, tmp_path):
        path = tmp_path / "t.csv"
        path.write_text("a,b\n1.0,nan\n", encoding="utf-8")
        with pytest.raises(Exception, match="non-finite"):
            read_csv(str(path), ["a", "b"])

    def test_read_xy_shapes(self, tmp_path):
        path = tmp_path / "t.csv"
        write_csv(path, ["x1", "x2", "y"], [[0.0, 1.0, 2.0], [3.0, 4.0, 5.0]])
        X, Y = read_xy_data(str(path), 2)
        assert X.shape == (2, 2) and Y.shape == (2,)


class TestGenerate:
    def _config(self, tmp_path, kind, out, **kw):
        gen = {"kind": kind}
        gen.update(kw)
        return write_config(
            tmp_path, f"gen-{kind}.json", {"out": out, "seed": 3, "generate": gen}
        )

    def test_regression_deterministic(self, tmp_path):
        out1, out2 = str(tmp_path / "g1"), str(tmp_path / "g2")
        cfg1 = self._config(tmp_path, "regression", out1, n=40)
        assert main(["generate", "--config", cfg1]) == 0
        cfg2 = self._config(tmp_path, "regression", out2, n=40)
        assert main(["generate", "--config", cfg2]) == 0
        b1 = (tmp_path / "g1" / "dataset.csv").read_bytes()
        b2 = (tmp_path / "g2" / "dataset.csv").read_bytes()
        assert b1 == b2

    def test_seed_override_changes_output(self, tmp_path):
        out1, out2 = str(tmp_path / "g1"), str(tmp_path / "g2")
        cfg = self._config(tmp_path, "regression", out1, n=40)
        assert main(["generate", "--config", cfg]) == 0
        assert main(["generate", "--config", cfg, "--seed", "9", "--out", out2]) == 0
        b1 = (tmp_path / "g1" / "dataset.csv").read_bytes()
        b2 = (tmp_path / "g2" / "dataset.csv").read_bytes()
        assert b1 != b2

    def test_classification_labels(self, tmp_path):
        out = str(tmp_path / "gc")
        cfg = self._config(tmp_path, "classification", out, n=30)
        assert main(["generate", "--config", cfg]) == 0
        data = read_csv(os.path.join(out, "dataset.csv"), ["x1", "y"])
        assert set(np.unique(data[:, 1])) <= {-1.0, 1.0}

    def test_cox_events_inside_domain(self, tmp_path):
        out = str(tmp_path / "gx")
        cfg = self._config(
            tmp_path, "cox", out, rate=30.0, domain=[[0.0, 2.0]]
        )
        assert main(["generate", "--config", cfg]) == 0
        ev = read_csv(os.path.join(out, "dataset.csv"), ["x1"])
        assert np.all(ev >= 0.0) and np.all(ev <= 2.0)


class TestFitRegression:
    def test_artifacts_and_summary(self, tmp_path):
        data = regression_dataset(tmp_path)
        out = str(tmp_path / "fit")
        cfg = small_fit_config(tmp_path, data, out)
        assert main(["fit-regression", "--config", cfg]) == 0
        for name in ("checkpoint.json", "trace.csv", "predictions.csv", "summary.json"):
            assert os.path.exists(os.path.join(out, name)), name
        summary = json.loads((tmp_path / "fit" / "summary.json").read_text())
        assert summary["task"] == "fit-regression"
        assert summary["n_data"] == 25 and summary["num_inducing"] == 4
        assert summary["collapsed_bound"] >= summary["final_elbo"] - 1e-9
        assert summary["collapsed_gap"] >= -1e-9

    def test_checkpoint_reproduces_final_elbo(self, tmp_path):
        data = regression_dataset(tmp_path)
        out = str(tmp_path / "fit")
        cfg = small_fit_config(tmp_path, data, out)
        assert main(["fit-regression", "--config", cfg]) == 0
        summary = json.loads((tmp_path / "fit" / "summary.json").read_text())
        state = load_checkpoint(os.path.join(out, "checkpoint.json"))
        X, Y = read_xy_data(data, 1)
        assert elbo(state, X, Y) == summary["final_elbo"]

    def test_trace_is_monotone(self, tmp_path):
        data = regression_dataset(tmp_path)
        out = str(tmp_path / "fit")
        cfg = small_fit_config(tmp_path, data, out)
        assert main(["fit-regression", "--config", cfg]) == 0
        trace = read_csv(
            os.path.join(out, "trace.csv"),
            ["iter", "objective", "step_scale", "grad_norm"],
        )
        assert np.all(np.diff(trace[:, 1]) >= 0.0)

    def test_reruns_are_identical_except_wall_time(self, tmp_path):
        data = regression_dataset(tmp_path)
        out1, out2 = str(tmp_path / "f1"), str(tmp_path / "f2")
        cfg1 = small_fit_config(tmp_path, data, out1)
        assert main(["fit-regression", "--config", cfg1]) == 0
        cfg2 = small_fit_config(tmp_path, data, out2)
        assert main(["fit-regression", "--config", cfg2]) == 0
        for name in ("checkpoint.json", "trace.csv", "predictions.csv"):
            b1 = (tmp_path / "f1" / name).read_bytes()
            b2 = (tmp_path / "f2" / name).read_bytes()
            assert b1 == b2, name
        s1 = json.loads((tmp_path / "f1" / "summary.json").read_text())
        s2 = json.loads((tmp_path / "f2" / "summary.json").read_text())
        s1.pop("wall_time_s"), s2.pop("wall_time_s")
        assert s1 == s2

    def test_bad_labels_exit_data_error(self, tmp_path, capsys):
        data = regression_dataset(tmp_path)  # continuous targets
        out = str(tmp_path / "fc")
        model = {
            "kernel": {"variance": 1.0, "lengthscales": [0.3]},
            "num_inducing": 3,
        }
        cfg = write_config(
            tmp_path,
            "cls.json",
            {"data": data, "out": out, "model": model,
             "optimizer": {"max_iters": 5, "refine_iters": 0}},
        )
        rc = main(["fit-classification", "--config", cfg])
        assert rc == 3
        assert "labels" in capsys.readouterr().err


class TestFitClassification:
    def test_small_run(self, tmp_path):
        rng = np.random.default_rng(1)
        x = np.sort(rng.uniform(0.0, 1.0, size=30))
        y = np.where(np.sin(2 * np.pi * x) + 0.3 * rng.standard_normal(30) >= 0, 1.0, -1.0)
        data = tmp_path / "cls.csv"
        write_csv(data, ["x1", "y"], np.column_stack([x, y]))
        out = str(tmp_path / "out")
        cfg = write_config(
            tmp_path,
            "cls.json",
            {
                "data": str(data),
                "out": out,
                "seed": 0,
                "model": {
                    "kernel": {"variance": 1.0, "lengthscales": [0.3]},
                    "num_inducing": 4,
                },
                "optimizer": {"max_iters": 10, "refine_iters": 10},
            },
        )
        assert main(["fit-classification", "--config", cfg]) == 0
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["task"] == "fit-classification"
        assert "collapsed_bound" not in summary


class TestFitCox:
    def test_small_run(self, tmp_path):
        lam = lambda p: 20.0 * (1.0 + np.sin(2 * np.pi * p[:, 0]))
        events = sample_inhomogeneous_pp(lam, 41.0, [0.0], [1.0], seed=2)
        data = tmp_path / "events.csv"
        write_csv(data, ["x1"], events)
        out = str(tmp_path / "out")
        cfg = write_config(
            tmp_path,
            "cox.json",
            {
                "data": str(data),
                "out": out,
                "seed": 0,
                "model": {
                    "kernel": {"variance": 0.5, "lengthscales": [0.25], "mean": 3.0},
                    "num_inducing": 5,
                    "domain": [[0.0, 1.0]],
                    "quad_orders": [30],
                },
                "optimizer": {"max_iters": 8, "refine_iters": 8},
            },
        )
        assert main(["fit-cox", "--config", cfg]) == 0
        summary = json.loads((tmp_path / "out" / "summary.json").read_text())
        assert summary["task"] == "fit-cox"
        assert summary["n_events"] == events.shape[0]
        assert summary["integrated_intensity"] > 0.0
        preds = read_csv(os.path.join(out, "predictions.csv"), ["x1", "intensity"])
        assert np.all(preds[:, 1] >= 0.0)


class TestVerifyTask:
    def test_small_verify_passes(self, tmp_path, capsys):
        out = str(tmp_path / "v")
        cfg = write_config(
            tmp_path, "v.json", {"out": out, "seed": 0, "verify": {"instances": 5}}
        )
        rc = main(["verify", "--config", cfg])
        assert rc == 0
        assert "pass" in capsys.readouterr().out
        report = json.loads((tmp_path / "v" / "report.json").read_text())
        assert report["all_pass"] is True
        assert len(report["instances"]) == 5
