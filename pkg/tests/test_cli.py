import csv
import io
import json

import numpy as np
import pytest
from click.testing import CliRunner

from hodgestrata import cli
from hodgestrata import conformal as C
from hodgestrata.surface import ConvergenceError

TORUS = {"schema_version": 1, "experiment": "mesh", "surface": {"kind": "torus", "N": 8},
         "vhs": {"n": 2}, "seed": 0}


def write(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


def invoke(*args):
    return CliRunner().invoke(cli.main, [str(a) for a in args])


# -- config validation ----------------------------------------------------------------

def test_normalize_fills_defaults():
    cfg = cli.normalize_config(TORUS, "mesh", source="x/torus_small.json")
    assert cfg["name"] == "torus_small"
    assert cfg["vhs"] == {"kind": "chain", "n": 2, "twist": None}
    assert cfg["parameters"]["holomorphic_weights"] == [2]
    assert cli.normalize_config(TORUS, "mesh", seed=7)["seed"] == 7


@pytest.mark.parametrize("patch, verb", [
    ({"schema_version": 2}, "mesh"),
    ({"extra": 1}, "mesh"),
    ({"experiment": "vhs"}, "mesh"),
    ({"surface": {"kind": "torus", "N": 5}}, "mesh"),
    ({"surface": {"kind": "sphere"}}, "mesh"),
    ({"experiment": "nhc"}, "nhc"),                        # torus with a genus-2 verb
    ({"vhs": {"n": 5}}, "mesh"),
    ({"parameters": {"bogus": 1}}, "mesh"),
    ({"seed": -1}, "mesh"),
    ({"name": "a/b"}, "mesh"),
])
def test_normalize_rejects(patch, verb):
    with pytest.raises(cli.ConfigError):
        cli.normalize_config({**TORUS, **patch}, verb)


@pytest.mark.parametrize("verb, params", [
    ("nhc", {"t_list": [0.1, 0.3]}),
    ("conformal", {"R_list": [1.0, 0.5, 0.5]}),
    ("conformal", {"R_list": [2.0, 0.5]}),
    ("conformal", {"hbar": 20}),
    ("conformal", {"hbar": [0.01, 0.0]}),
    ("conformal", {"q_norms": [0.1, 0.1]}),
    ("slice", {"n_random": 0}),
    ("transversality", {"finite_differences": "yes"}),
])
def test_normalize_rejects_parameters(verb, params):
    raw = {"schema_version": 1, "experiment": verb, "surface": {"kind": "bolza"},
           "parameters": params}
    with pytest.raises(cli.ConfigError):
        cli.normalize_config(raw, verb)


def test_slice_verb_accepts_kuranishi():
    raw = {"schema_version": 1, "experiment": "kuranishi", "vhs": {"n": 3}}
    assert cli.normalize_config(raw, "slice")["experiment"] == "kuranishi"


def test_jsonable():
    out = cli.jsonable({"a": 1 + 2j, "b": np.float64(np.inf), "c": np.arange(2), "d": (np.nan,)})
    assert out == {"a": [1.0, 2.0], "b": "inf", "c": [0, 1], "d": ["nan"]}


# -- running ----------------------------------------------------------------------------------

def test_mesh_verb_writes_reports(tmp_path):
    cfg = write(tmp_path / "t.json", TORUS)
    out = tmp_path / "out"
    res = invoke("mesh", "--config", cfg, "--out", out)
    assert res.exit_code == 0, res.output
    assert "t: pass" in res.output
    rep = json.loads((out / "t.json").read_text())
    assert rep["status"] == "pass" and rep["exit_code"] == 0
    rows = list(csv.DictReader((out / "t.checks.csv").open()))
    assert rows and all(r["passed"] == "True" for r in rows)
    assert "started" in json.loads((out / "t.meta.json").read_text())


def test_reports_are_deterministic(tmp_path):
    cfg = write(tmp_path / "t.json", TORUS)
    for d in ("a", "b"):
        assert invoke("mesh", "--config", cfg, "--out", tmp_path / d).exit_code == 0
    for f in ("t.json", "t.checks.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_malformed_config_writes_nothing(tmp_path):
    good = write(tmp_path / "good.json", TORUS)
    bad = write(tmp_path / "bad.json", {**TORUS, "surface": {"kind": "torus", "N": 7}})
    out = tmp_path / "out"
    res = invoke("mesh", "--config", good, "--config", bad, "--out", out)
    assert res.exit_code == 2
    assert not out.exists()
    res = invoke("mesh", "--config", tmp_path / "missing.json", "--out", out)
    assert res.exit_code == 2 and not out.exists()


def test_duplicate_names_rejected(tmp_path):
    a = write(tmp_path / "a.json", {**TORUS, "name": "same"})
    b = write(tmp_path / "b.json", {**TORUS, "name": "same"})
    res = invoke("mesh", "--config", a, "--config", b, "--out", tmp_path / "out")
    assert res.exit_code == 2 and not (tmp_path / "out").exists()


def test_summary(tmp_path):
    out = tmp_path / "out"
    cfgs = [write(tmp_path / f"{n}.json", {**TORUS, "name": n}) for n in ("zeta", "alpha")]
    assert invoke("mesh", "--config", cfgs[0], "--config", cfgs[1], "--out", out).exit_code == 0
    res = invoke("summary", out / "zeta.json", out / "alpha.json")
    assert res.exit_code == 0
    rows = list(csv.DictReader(io.StringIO(res.output)))
    assert [r["name"] for r in rows] == ["alpha", "zeta"]
    assert all(r["status"] == "pass" and r["n_failed"] == "0" for r in rows)
    target = tmp_path / "summary.csv"
    assert invoke("summary", out / "alpha.json", "--out", target).exit_code == 0
    assert target.read_text().startswith(",".join(cli.SUMMARY_FIELDS))


def test_summary_bad_input(tmp_path):
    assert invoke("summary", tmp_path / "nope.json").exit_code == 2
    p = write(tmp_path / "x.json", {"schema_version": 99})
    assert invoke("summary", p).exit_code == 2


def test_conformal_failure_exit_code(tmp_path, monkeypatch):
    real = C.solve_conformal_step

    def failing(v, u, R, *a, **k):
        if R < 0.4:
            raise ConvergenceError("forced", {})
        return real(v, u, R, *a, **k)

    monkeypatch.setattr(C, "solve_conformal_step", failing)
    raw = {"schema_version": 1, "experiment": "conformal", "name": "cf",
           "surface": {"kind": "bolza", "h": 0.07},
           "parameters": {"R_list": [1.0, 0.5, 0.25], "slope_R": [0.5, 1.0]}}
    cfg = write(tmp_path / "cf.json", raw)
    out = tmp_path / "out"
    res = invoke("conformal", "--config", cfg, "--out", out)
    assert res.exit_code == 3
    rep = json.loads((out / "cf.json").read_text())
    assert rep["status"] == "fail" and rep["results"]["failure"]["R"] == 0.25
    lines = (out / "cf.trajectory.jsonl").read_text().splitlines()
    assert [json.loads(x)["R"] for x in lines] == [1.0, 0.5]
    rows = cli.report_summary([out / "cf.json"])
    assert rows[0]["largest_solved_R"] == 0.5 and "reached_R_min" in rows[0]["failed_checks"]
