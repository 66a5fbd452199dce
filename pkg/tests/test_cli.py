import csv
import hashlib
import json
import os

import numpy as np
import pytest

from netstrat.cli import run
from netstrat.data import write_study
from netstrat.estimands import ESTIMAND_COLUMNS
from conftest import arm_count_study


def sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


DATA_FLAGS = ["--classes", "classes.csv", "--students", "students.csv",
              "--edges", "edges.csv"]


def data_flags(d):
    return ["--classes", str(d / "classes.csv"),
            "--students", str(d / "students.csv"),
            "--edges", str(d / "edges.csv")]


@pytest.fixture(scope="module")
def simdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("sim")
    code = run(["simulate", "--out", str(d), "--classes", "6", "--students", "6",
                "--edges", "0.4", "--seed", "5"])
    assert code == 0
    return d


@pytest.fixture(scope="module")
def fitdir(tmp_path_factory, simdir):
    d = tmp_path_factory.mktemp("fit")
    code = run(["fit", *data_flags(simdir), "--out", str(d), "--seed", "7",
                "--chains", "2", "--warmup", "100", "--samples", "50"])
    assert code == 0
    return d


def test_simulate_writes_study_and_truth(simdir):
    for name in ("classes.csv", "students.csv", "edges.csv", "truth.json",
                 "manifest.json"):
        assert (simdir / name).exists()
    truth = json.loads((simdir / "truth.json").read_text())
    assert len(truth["strata"]) == 36
    assert truth["config"]["n_classes"] == 6


def test_simulate_is_rerun_identical(simdir, tmp_path):
    d = tmp_path / "again"
    assert run(["simulate", "--out", str(d), "--classes", "6", "--students",
                "6", "--edges", "0.4", "--seed", "5"]) == 0
    for name in ("classes.csv", "students.csv", "edges.csv", "truth.json"):
        assert sha256(d / name) == sha256(simdir / name)


def test_validate_accepts_simulated_study(simdir, tmp_path, capsys):
    out = tmp_path / "rep"
    assert run(["validate", *data_flags(simdir), "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "36 students in 6 classes" in text
    report = json.loads((out / "report.json").read_text())
    assert report["n_students"] == 36
    assert set(report["arms"]) == {"1", "2", "3"}


def test_mom_reference_proportions(tmp_path, capsys):
    data = arm_count_study({
        1: [(30, 1), (30, 1), (29, 1)],
        2: [(29, 3), (29, 3), (29, 4)],
        3: [(30, 13), (30, 13), (30, 14)],
    })
    src = tmp_path / "study"
    src.mkdir()
    write_study(data, str(src))
    out = tmp_path / "mom"
    assert run(["mom", *data_flags(src), "--out", str(out), "--seed", "3"]) == 0
    text = capsys.readouterr().out
    assert "RewardComplier" in text and "NeverTaker" in text
    got = json.loads((out / "mom.json").read_text())
    want = (0.034, 0.081, 0.329, 0.556)
    assert np.allclose(got["proportions"], want, atol=1e-3)
    assert sum(got["proportions"]) == 1.0
    assert not got["monotonicity_violation"]
    assert all(se > 0 for se in got["standard_errors"])


def test_fit_outputs_and_manifest(fitdir, simdir):
    for name in ("draws.csv", "diagnostics.json", "manifest.json"):
        assert (fitdir / name).exists()
    man = json.loads((fitdir / "manifest.json").read_text())
    assert man["subcommand"] == "fit"
    assert man["seed"] == 7
    assert sorted(man["outputs"]) == ["diagnostics.json", "draws.csv"]
    for rec in man["inputs"].values():
        assert rec["sha256"] == sha256(rec["path"])
    assert "timestamp" not in json.dumps(man).lower()
    with open(fitdir / "draws.csv", newline="") as fh:
        header = next(csv.reader(fh))
    assert header[:3] == ["chain", "iteration", "log_posterior"]
    assert "sigma_a" in header and "gamma[011]" in header
    diag = json.loads((fitdir / "diagnostics.json").read_text())
    assert {"n_divergent", "max_rhat", "min_ess"} <= set(diag)


def test_fit_is_thread_invariant(simdir, fitdir, tmp_path, monkeypatch):
    d = tmp_path / "fit2"
    monkeypatch.setenv("NETSTRAT_THREADS", "2")
    assert run(["fit", *data_flags(simdir), "--out", str(d), "--seed", "7",
                "--chains", "2", "--warmup", "100", "--samples", "50"]) == 0
    assert sha256(d / "draws.csv") == sha256(fitdir / "draws.csv")
    man = json.loads((d / "manifest.json").read_text())
    assert man["options"]["threads"] == 2


def test_estimate_pipeline(fitdir, simdir, capsys):
    code = run(["estimate", *data_flags(simdir), "--out", str(fitdir),
                "--seed", "7", "--s-grid", "0,0.25,0.5",
                "--contrasts", "2-1,3-2"])
    assert code == 0
    assert "estimand summaries from 100 draws" in capsys.readouterr().out
    with open(fitdir / "estimands.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    assert header == ESTIMAND_COLUMNS
    kinds = {(r[0], r[1]) for r in rows}
    assert ("pce", "000") in kinds and ("cse", "111") in kinds
    prof = json.loads((fitdir / "profiles.json").read_text())
    assert prof["n_draws"] == 100
    assert len(prof["shares"]["mean"]) == 4
    with open(fitdir / "homophily.csv", newline="") as fh:
        hrows = list(csv.reader(fh))
    assert hrows[0] == ["stratum", "friend_111", "friend_011", "friend_001",
                        "friend_000"]
    assert len(hrows) == 5
    man = json.loads((fitdir / "manifest.json").read_text())
    assert man["subcommand"] == "estimate"
    assert "draws" in man["inputs"]


def test_estimate_requires_fit_first(simdir, tmp_path, capsys):
    out = tmp_path / "nofit"
    code = run(["estimate", *data_flags(simdir), "--out", str(out)])
    assert code == 1
    assert "netstrat fit" in capsys.readouterr().err


def test_diagnose_reads_draws_back(fitdir, capsys):
    assert run(["diagnose", "--out", str(fitdir)]) == 0
    text = capsys.readouterr().out
    assert "R-hat" in text and "ESS" in text
    assert "max split R-hat" in text


def test_gradcheck_internal_synthetic(tmp_path, capsys):
    assert run(["gradcheck", "--seed", "2"]) == 0
    assert "worst relative error" in capsys.readouterr().out


def test_usage_errors_exit_one(capsys):
    assert run(["frobnicate"]) == 1
    assert run(["fit", "--no-such-flag"]) == 1
    assert run(["fit"]) == 1                      # missing data paths
    assert run(["mom"]) == 1
    assert run(["simulate"]) == 1                 # missing --out
    capsys.readouterr()


def test_bad_option_values_exit_one(simdir, tmp_path, capsys):
    base = ["estimate", *data_flags(simdir), "--out", str(tmp_path)]
    assert run(base + ["--contrasts", "9-1"]) == 1
    assert run(base + ["--s-grid", "a,b"]) == 1
    assert run(base + ["--threads", "0"]) == 1
    capsys.readouterr()


def test_bad_config_json_exits_one(simdir, tmp_path, capsys):
    bad = tmp_path / "cfg.json"
    bad.write_text("{not json")
    code = run(["validate", *data_flags(simdir), "--config", str(bad)])
    assert code == 1
    assert "config" in capsys.readouterr().err


def test_invalid_data_exits_one(tmp_path, capsys):
    (tmp_path / "classes.csv").write_text("class_id,z\nc1,2\n")
    (tmp_path / "students.csv").write_text(
        "student_id,class_id,m,y\ns1,MISSING,0,1\n")
    (tmp_path / "edges.csv").write_text("student_a,student_b\n")
    assert run(["validate", *data_flags(tmp_path)]) == 1
    assert "validation error" in capsys.readouterr().err


def test_io_error_exits_three(tmp_path, capsys):
    blocker = tmp_path / "blocker"
    blocker.write_text("just a file")
    code = run(["simulate", "--out", str(blocker / "sub"), "--classes", "3",
                "--students", "4", "--edges", "0.2"])
    assert code == 3
    assert "i/o error" in capsys.readouterr().err


def test_version_and_help_exit_zero(capsys):
    assert run(["--version"]) == 0
    assert run(["--help"]) == 0
    assert "netstrat" in capsys.readouterr().out
