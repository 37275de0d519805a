import json
import os

import jsonschema
import pytest

from dlab import cli
from dlab.experiments import (OUTPUT_ENV, REGISTRY, UsageError, list_experiments, load_schema, make_config,
                              run)

SMALL = {"grid": {"n_steps": 512}, "mc": {"M": 32}}


def test_registry():
    names = [n for n, _, _ in list_experiments()]
    assert len(names) == 10 and "bracket-bm" in names
    assert names == sorted(REGISTRY, key=names.index)
    for _, desc, tol in list_experiments():
        assert desc and tol and all(v > 0 for v in tol.values())


def test_make_config_errors():
    with pytest.raises(UsageError):
        make_config("foo")
    with pytest.raises(UsageError):
        make_config("bracket-bm", {"bogus": 1})
    with pytest.raises(UsageError):
        make_config("bracket-bm", {"tolerances": {"nope": 0.1}})
    with pytest.raises(Exception):
        make_config("bracket-bm", {"tolerances": {"limit_abs": -1}})


@pytest.mark.parametrize("name", ["bracket-bm", "forward-vs-ito", "ito-c02ac", "chain-rule", "orthogonality"])
def test_report_validates_and_is_deterministic(name):
    a = run(make_config(name, SMALL, seed=3), write=False)
    b = run(make_config(name, SMALL, seed=3, workers=2), write=False)
    jsonschema.validate(json.loads(a.to_json()), load_schema())
    da, db = a.deterministic_part(), b.deterministic_part()
    assert json.dumps(da, sort_keys=True) == json.dumps(db, sort_keys=True)
    c = run(make_config(name, SMALL, seed=4), write=False)
    assert c.deterministic_part()["metrics"] != da["metrics"]


def test_run_writes_artifacts(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    rep = run(make_config("bracket-bm", SMALL, seed=1))
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["bracket-bm.csv", "bracket-bm.json"]
    doc = json.loads((tmp_path / "bracket-bm.json").read_text())
    assert doc["pass"] == rep.passed and doc["seed"] == 1
    assert (tmp_path / "bracket-bm.csv").read_text().splitlines()[0].count(",") >= 1


def _config(tmp_path, doc):
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(doc))
    return str(p)


def test_cli_list(capsys):
    assert cli.main(["list"]) == 0
    out = capsys.readouterr().out
    assert len(out.strip().splitlines()) == 10 and "bracket-bm" in out


def test_cli_run_pass_and_fail(tmp_path, capsys):
    cfg = _config(tmp_path, {"experiment": "bracket-bm"})
    out = tmp_path / "out"
    assert cli.main(["run", cfg, "--seed", "5", "--output-dir", str(out)]) == 0
    first = json.loads((out / "bracket-bm.json").read_text())
    assert cli.main(["run", cfg, "--seed", "5", "--output-dir", str(out), "--workers", "2"]) == 0
    second = json.loads((out / "bracket-bm.json").read_text())
    first.pop("timing"), second.pop("timing")
    assert first == second
    strict = _config(tmp_path, {"experiment": "bracket-bm", "tolerances": {"limit_abs": 1e-9}, **SMALL})
    assert cli.main(["run", strict, "--seed", "5", "--output-dir", str(out)]) == 1
    assert "FAIL bracket-bm" in capsys.readouterr().out


def test_cli_usage_errors(tmp_path):
    cfg = _config(tmp_path, {"experiment": "foo"})
    assert cli.main(["run", cfg, "--seed", "1"]) == 2
    assert cli.main(["run", _config(tmp_path, {"experiment": "bracket-bm"})]) == 2  # --seed is mandatory
    assert cli.main(["run", str(tmp_path / "missing.json"), "--seed", "1"]) == 2
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["mild", "--problem", "heat", "--at", "0"]) == 2
    assert cli.main(["mild", "--problem", "heat", "--at", "2,0"]) == 2


def test_cli_experiment_flag_overrides(tmp_path, capsys):
    cfg = _config(tmp_path, {"experiment": "foo", **SMALL})
    assert cli.main(["run", cfg, "--seed", "1", "--experiment", "forward-vs-ito",
                     "--output-dir", str(tmp_path)]) == 0
    assert (tmp_path / "forward-vs-ito.json").exists()


def test_cli_mild(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    assert cli.main(["mild", "--problem", "constant_source", "--at", "0.25,0.3", "--paths", "100",
                     "--steps", "16"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["value"] == pytest.approx(-0.75) and (tmp_path / "mild.json").exists()


def test_cli_decompose_and_girsanov(capsys):
    assert cli.main(["decompose", "--paths", "32", "--steps", "2048", "--seed", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["pass"] is True
    assert cli.main(["girsanov", "--paths", "1024", "--steps", "128", "--seed", "1"]) == 0


def test_cli_quasi_strong(capsys):
    code = cli.main(["quasi-strong", "--paths", "200", "--steps", "32", "--indices", "2,4,8",
                     "--eval-times", "2", "--eval-points", "5"])
    doc = json.loads(capsys.readouterr().out)
    assert code == (0 if doc["pass"] else 1)
    assert doc["indices"] == [2, 4, 8]


def test_atomic_write_leaves_no_temp_files(tmp_path):
    for seed in range(3):
        run(make_config("forward-vs-ito", SMALL, seed=seed, output_dir=str(tmp_path)))
    assert sorted(os.listdir(tmp_path)) == ["forward-vs-ito.csv", "forward-vs-ito.json"]
