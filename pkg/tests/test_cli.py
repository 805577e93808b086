import json
import subprocess
import sys
import time

import pytest

from lvrtcsr.cli import EXIT_ERROR, EXIT_NOT_CERTIFIED, EXIT_OK, EXIT_UNSOUND, main
from lvrtcsr.csr import CSREstimate
from lvrtcsr.data import CASE_FAULT, CASE_MODEL
from lvrtcsr.dynamics import FaultScenario, Trajectory
from lvrtcsr.feasreg import Polytope
from lvrtcsr.io import dump_json
from lvrtcsr.lff import LyapunovCandidate
from lvrtcsr.synth import ring_network_dict

BASE = ["--model", str(CASE_MODEL), "--scenario", str(CASE_FAULT)]


def run(cmd, out, *extra):
    return main([cmd, *BASE, "--out", str(out), *extra])


def test_assess_outputs(tmp_path):
    assert run("assess", tmp_path) == EXIT_OK
    rep = json.loads((tmp_path / "assessment.json").read_text())
    assert rep["verdict"] == "stable"
    est = CSREstimate.load(tmp_path / "estimate.json")
    assert est.v == rep["v_max"]
    traj = Trajectory.from_csv(tmp_path / "trajectory_postfault.csv")
    assert traj.states.shape[1] == 4
    assert Trajectory.from_csv(tmp_path / "trajectory_faulton.csv").times[-1] == pytest.approx(0.2)


def test_assess_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("assess", a) == EXIT_OK and run("assess", b) == EXIT_OK
    for name in ("assessment.json", "estimate.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_long_fault_not_certified(tmp_path):
    assert run("assess", tmp_path, "--clearing-time", "10") == EXIT_NOT_CERTIFIED
    assert json.loads((tmp_path / "assessment.json").read_text())["verdict"] == "not-certified"


def test_missing_model_is_error(tmp_path, capsys):
    code = main(["assess", "--model", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert code == EXIT_ERROR
    assert "not found" in capsys.readouterr().err


def test_bad_flag_values(tmp_path):
    assert run("assess", tmp_path, "--nline", "0") == EXIT_ERROR
    with pytest.raises(SystemExit):
        run("assess", tmp_path, "--grid", "abc")


def test_stage_commands(tmp_path):
    assert main(["sep", "--model", str(CASE_MODEL), "--out", str(tmp_path / "s0")]) == EXIT_OK
    assert run("sep", tmp_path) == EXIT_OK
    sep = json.loads((tmp_path / "sep.json").read_text())
    assert FaultScenario.from_dict(sep["scenario"]) == FaultScenario.load(CASE_FAULT)
    assert run("polytope", tmp_path) == EXIT_OK
    assert Polytope.load(tmp_path / "polytope.json").n_facets == 4
    assert list(tmp_path.glob("pwl_*.csv"))
    assert run("lff", tmp_path) == EXIT_OK
    assert LyapunovCandidate.load(tmp_path / "lff_lmi.json").label == "lmi-refined"
    res = json.loads((tmp_path / "lff_residuals.json").read_text())
    assert res["lmi_residual"] <= 1e-8
    assert run("estimate", tmp_path) == EXIT_OK


def test_oracle_smoke_and_negative_control(tmp_path):
    t0 = time.perf_counter()
    assert run("oracle", tmp_path, "--grid", "11x11") == EXIT_OK
    assert time.perf_counter() - t0 < 5
    audit = json.loads((tmp_path / "audit.json").read_text())
    assert audit["soundness_violations"] == 0
    # inflate the level 10x: the audit must flag it
    run("estimate", tmp_path)
    est = json.loads((tmp_path / "estimate.json").read_text())
    est["v"] *= 10
    dump_json(est, tmp_path / "bad.json")
    code = run("oracle", tmp_path / "neg", "--grid", "41x41", "--estimate", str(tmp_path / "bad.json"))
    assert code == EXIT_UNSOUND


def test_plotdata_two_machine(tmp_path):
    out = tmp_path / "fresh" / "dir"
    assert run("plotdata", out, "--grid", "21x21") == EXIT_OK
    bundle = json.loads((out / "bundle.json").read_text())
    for name in bundle["files"]:
        assert (out / name).is_file()
    edges = (out / "polytope_edges.csv").read_text()
    assert "true-fb" in edges and "acfb" in edges
    assert "flow-out" in (out / "flowout_segments.csv").read_text()


def test_plotdata_guard_three_machines(tmp_path):
    dump_json(ring_network_dict(3), tmp_path / "ring.json")
    dump_json(FaultScenario(0, 0.5, 0.1).to_dict(), tmp_path / "fault.json")
    code = main(["plotdata", "--model", str(tmp_path / "ring.json"), "--scenario", str(tmp_path / "fault.json"),
                 "--out", str(tmp_path / "o")])
    assert code == EXIT_OK
    bundle = json.loads((tmp_path / "o" / "bundle.json").read_text())
    assert "guard" in bundle and bundle["files"] == ["trajectory_postfault.csv"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "lvrtcsr", "sep", "--model", str(CASE_MODEL),
                           "--out", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "sep.json").is_file()
