import json

import numpy as np
import pytest

from rastmpc.cli import EXIT_OK, EXIT_SOLVER, EXIT_USAGE, EXIT_VERIFY, main


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


def test_plan_danger_with_horizon(tmp_path):
    assert main(["plan", "danger.json", "--horizon", "4", "--out-dir", str(tmp_path)]) == EXIT_OK
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert plan["horizon"] == 4 and len(plan["delta"]) == 4
    assert all(0.1 <= d <= 0.8 for d in plan["delta"])
    assert plan["diagnostics"]["constraint_residual"] <= 1e-7
    m = manifest(tmp_path)
    assert m["overrides"]["horizon"] == 4 and m["exit_code"] == 0


def test_plan_deterministic_zero_gain(tmp_path):
    assert main(["plan", "deterministic.json", "--out-dir", str(tmp_path)]) == EXIT_OK
    plan = json.loads((tmp_path / "plan.json").read_text())
    assert np.all(np.array(plan["K"]) == 0)
    assert not plan["stochastic"]


def test_env_out_dir(tmp_path, monkeypatch):
    monkeypatch.setenv("RASTMPC_OUT_DIR", str(tmp_path / "env"))
    assert main(["verify", "quantile"]) == EXIT_OK
    assert (tmp_path / "env" / "manifest.json").exists()
    assert (tmp_path / "env" / "verify.json").exists()


def test_parse_errors(tmp_path):
    assert main(["plan", str(tmp_path / "nope.json"), "--out-dir", str(tmp_path)]) == EXIT_USAGE
    assert manifest(tmp_path)["exit_code"] == EXIT_USAGE
    bad = tmp_path / "bad.json"
    bad.write_text("[1, 2]")
    assert main(["simulate", str(bad), "--out-dir", str(tmp_path)]) == EXIT_USAGE
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["plan", "danger.json", "--horizon", "0", "--out-dir", str(tmp_path)]) == EXIT_USAGE


def test_solver_failure_exit_code(tmp_path):
    # a start far outside the output band cannot satisfy the chance rows on the first node
    data = json.loads(open(_bundled("danger.json")).read())
    data["initial_state"] = [5.0, 0.0]
    data["options"] = {"max_iter": 20}
    path = tmp_path / "hopeless.json"
    path.write_text(json.dumps(data))
    assert main(["plan", str(path), "--out-dir", str(tmp_path)]) == EXIT_SOLVER
    assert manifest(tmp_path)["solver"]["status"] != "converged"


def _bundled(name):
    from rastmpc.model import resolve_scenario_path

    return str(resolve_scenario_path(name))


def test_simulate_csv_and_replay(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    args = ["simulate", "safe.json", "--seed", "1", "--t-end", "3"]
    assert main(args + ["--out-dir", str(a)]) == EXIT_OK
    header = (a / "trajectory.csv").read_text().splitlines()[0]
    assert header == "t,y,ref,ymax,ymin,r,rmax,rmin,dt,dtmax,dtmin"
    body = np.loadtxt(a / "trajectory.csv", delimiter=",", skiprows=1)
    assert body[:, 0].max() >= 3.0 - 1e-9
    assert np.all((body[:, 5] >= 0) & (body[:, 5] <= 1))
    assert main(["replay", str(a / "manifest.json"), "--out-dir", str(b)]) == EXIT_OK
    assert (a / "trajectory.csv").read_bytes() == (b / "trajectory.csv").read_bytes()
    assert manifest(b)["replayed"]["argv"][:2] == ["simulate", "safe.json"]


def test_montecarlo_files(tmp_path):
    assert main(["montecarlo", "danger.json", "--samples", "2", "--seed", "0", "--t-end", "1",
                 "--out-dir", str(tmp_path)]) == EXIT_OK
    assert sorted(p.name for p in tmp_path.glob("sample_*.csv")) == ["sample_0.csv", "sample_1.csv"]
    stats = json.loads((tmp_path / "stats.json").read_text())
    assert stats["n_samples"] == 2 and "state0.0" in stats["max_violation"]


def test_verify_reports(tmp_path, capsys):
    assert main(["verify", "decomposition", "--n", "6", "--out-dir", str(tmp_path)]) == EXIT_OK
    assert "PASS decomposition" in capsys.readouterr().out
    assert main(["verify", "nosuch", "--out-dir", str(tmp_path)]) == EXIT_USAGE


def test_verify_failure_exit(tmp_path, monkeypatch, capsys):
    from rastmpc import verify

    failing = verify.CheckReport("quantile", False, 1.0, 1e-9, instance={"p": 0.5})
    monkeypatch.setattr(verify, "run_suite", lambda name, **kw: [failing])
    assert main(["verify", "quantile", "--out-dir", str(tmp_path)]) == EXIT_VERIFY
    assert '"p": 0.5' in capsys.readouterr().err
