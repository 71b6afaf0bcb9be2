"""End-to-end CLI runs on small systems: artifacts, exit codes, reruns."""

import json
import subprocess
import sys

import pytest
from filelock import FileLock

from pcroa import __version__, cli
from pcroa.config import load_config
from pcroa.errors import SolverNumericalError, ValidationFailure

SCALAR = {
    "name": "cubic",
    "system": {"states": ["x"], "params": [{"name": "a", "dist": "uniform", "low": 0.5, "high": 1.5}],
               "rhs": ["-a*x + x^3"]},
    "pce": {"p": 1},
    "simulate": {"mean_start": [0.3], "t_end": 5.0, "n_points": 11},
    "equilibrium": {"mean_start": [0.3]},
    "recover": {"sweep": [0.0, 0.01]},
    "output": {"formats": ["csv", "json"]},
}


def write(tmp_path, raw, name="cfg.json"):
    f = tmp_path / name
    f.write_text(json.dumps(raw))
    return f


@pytest.fixture()
def scalar_cfg(tmp_path):
    return write(tmp_path, SCALAR)


@pytest.mark.parametrize("command, artifact", [("tensor", "tensors.json"), ("expand", "expanded.json"),
                                               ("simulate", "simulate.json"),
                                               ("equilibrium", "equilibrium.json")])
def test_cheap_commands_idempotent(tmp_path, scalar_cfg, command, artifact):
    out = tmp_path / "out"
    assert cli.main([command, str(scalar_cfg), "--out", str(out), "--quiet"]) == 0
    first = (out / artifact).read_bytes()
    assert cli.main([command, str(scalar_cfg), "--out", str(out), "--quiet"]) == 0
    assert (out / artifact).read_bytes() == first
    meta = json.loads(first)["meta"]
    assert meta["version"] == __version__
    assert meta["config_hash"] == load_config(scalar_cfg).hash
    assert "runtime_s" not in first.decode()
    assert (out / "run.log").exists()


def test_csv_header(tmp_path, scalar_cfg):
    out = tmp_path / "out"
    assert cli.main(["simulate", str(scalar_cfg), "--out", str(out), "--quiet"]) == 0
    lines = (out / "modes.csv").read_text().splitlines()
    assert lines[0] == f"# pcroa {__version__} config {load_config(scalar_cfg).hash}"
    assert lines[1] == "t,x_0,x_1"
    assert len(lines) == 2 + 11


def test_equilibrium_artifact(tmp_path, scalar_cfg):
    out = tmp_path / "out"
    cli.main(["equilibrium", str(scalar_cfg), "--out", str(out), "--quiet"])
    doc = json.loads((out / "equilibrium.json").read_text())
    assert max(abs(v) for v in doc["x_ep"]) < 1e-6
    assert doc["max_real_eig"] < 0
    assert [m["xi"] for m in doc["members"]] == [-1.0, 1.0]


def test_roa_and_recover(tmp_path, scalar_cfg):
    out = tmp_path / "out"
    assert cli.main(["recover", str(scalar_cfg), "--out", str(out), "--quiet"]) == 0
    cert = json.loads((out / "certificate.json").read_text())
    rec = json.loads((out / "recover.json").read_text())
    assert cert["meta"]["config_hash"] == rec["meta"]["config_hash"]
    assert [(e["method"], e["status"]) for e in rec["entries"]] == [("slice", "optimal"), ("sos", "optimal")]
    assert (out / "r0_0.json").exists() and (out / "r0_1.json").exists()
    before = (out / "certificate.json").read_bytes(), (out / "recover.json").read_bytes()
    # a rerun reuses the certificate with matching hash
    assert cli.main(["recover", str(scalar_cfg), "--out", str(out), "--quiet"]) == 0
    assert ((out / "certificate.json").read_bytes(), (out / "recover.json").read_bytes()) == before


def test_stale_artifact_recomputed(tmp_path, scalar_cfg):
    out = tmp_path / "out"
    cli.main(["equilibrium", str(scalar_cfg), "--out", str(out), "--quiet"])
    doc = json.loads((out / "equilibrium.json").read_text())
    doc["meta"]["config_hash"] = "0" * 16
    (out / "equilibrium.json").write_text(json.dumps(doc))
    r = cli.Runner(load_config(scalar_cfg), out, figures=False)
    assert r.read_json("equilibrium.json") is None


def test_exit_config_error(tmp_path):
    bad = dict(SCALAR, pce={"p": 1, "order": 2})
    assert cli.main(["expand", str(write(tmp_path, bad)), "--out", str(tmp_path / "o"), "--quiet"]) == 2
    assert cli.main(["expand", str(tmp_path / "missing.json"), "--quiet"]) == 2


def test_exit_sweep_file(tmp_path, scalar_cfg):
    assert cli.main(["recover", str(scalar_cfg), "--sigma", str(tmp_path / "none.json"), "--quiet"]) == 2


def test_exit_equilibrium(tmp_path):
    raw = dict(SCALAR, system={"states": ["x"], "rhs": ["x + x^3"]}, equilibrium={"mean_start": [0.5]})
    assert cli.main(["equilibrium", str(write(tmp_path, raw)), "--out", str(tmp_path / "o"), "--quiet"]) == 3


def test_exit_sos_infeasible(tmp_path, scalar_cfg):
    sig = tmp_path / "sig.json"
    sig.write_text("[5.0]")
    out = tmp_path / "o"
    assert cli.main(["recover", str(scalar_cfg), "--sigma", str(sig), "--out", str(out), "--quiet"]) == 4
    rec = json.loads((out / "recover.json").read_text())
    assert rec["entries"][0]["status"] == "infeasible"


def test_exit_validate_not_planar(tmp_path, scalar_cfg):
    assert cli.main(["validate", str(scalar_cfg), "--out", str(tmp_path / "o"), "--quiet"]) == 2


@pytest.mark.parametrize("exc, code", [(SolverNumericalError("x", code="stall"), 5),
                                       (ValidationFailure("x", code="diverging_samples"), 6)])
def test_exit_codes_mapped(tmp_path, scalar_cfg, monkeypatch, exc, code):
    def boom(self):
        raise exc
    monkeypatch.setattr(cli.Runner, "expand", boom)
    assert cli.main(["expand", str(scalar_cfg), "--out", str(tmp_path / "o"), "--quiet"]) == code


def test_lock_held(tmp_path, scalar_cfg):
    out = tmp_path / "o"
    out.mkdir()
    lock = FileLock(str(out / ".pcroa.lock"))
    with lock:
        with pytest.raises(Exception) as exc:
            cli.run("expand", str(scalar_cfg), out=str(out))
        assert exc.value.code == "locked"
    assert cli.main(["expand", str(scalar_cfg), "--out", str(out), "--quiet"]) == 0


def test_overrides_change_hash(tmp_path, scalar_cfg):
    out = tmp_path / "o"
    cli.main(["expand", str(scalar_cfg), "--out", str(out), "--p", "2", "--quiet"])
    doc = json.loads((out / "expanded.json").read_text())
    assert doc["p"] == 2 and len(doc["names"]) == 3
    assert doc["meta"]["config_hash"] != load_config(scalar_cfg).hash
    assert json.loads((out / "config.json").read_text())["pce"]["p"] == 2


def test_python_dash_m(tmp_path, scalar_cfg):
    out = tmp_path / "o"
    r = subprocess.run([sys.executable, "-m", "pcroa", "tensor", str(scalar_cfg), "--out", str(out), "--quiet"],
                       capture_output=True, text=True, timeout=120)
    assert r.returncode == 0, r.stderr
    assert (out / "tensors.json").exists()
    r = subprocess.run([sys.executable, "-m", "pcroa", "bogus", str(scalar_cfg)], capture_output=True, text=True)
    assert r.returncode != 0 and "invalid choice" in r.stderr
