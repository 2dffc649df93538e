import json

import numpy as np
import pytest

from cvarrl import cli
from cvarrl.env_core import save_instance
from cvarrl.properties import CheckResult

from conftest import two_path_instance


def test_gen_env_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    assert cli.main(["gen-env", "--seed", "4", "--out", str(a)]) == 0
    assert cli.main(["gen-env", "--seed", "4", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_oracle_two_path(tmp_path, capsys):
    env = tmp_path / "env.json"
    save_instance(env, *two_path_instance())
    assert cli.main(["oracle", "--env", str(env), "--tau", "0.5"]) == 0
    assert "cvar_star 0.8\n" in capsys.readouterr().out


def test_run_then_eval(tmp_path, capsys):
    env, cfg, out = tmp_path / "env.json", tmp_path / "cfg.json", tmp_path / "run"
    cli.main(["gen-env", "--seed", "1", "--states", "2", "--horizon", "2", "--upsilon", "0.25", "--out", str(env)])
    cfg.write_text(json.dumps({"tau": 0.5, "K": 4, "upsilon": 0.25, "class_size": 4}))
    assert cli.main(["run", "--config", str(cfg), "--env", str(env), "--out", str(out), "--seed", "3"]) == 0
    doc = json.loads((out / "result.json").read_text())
    assert doc["seed"] == 3 and len(doc["records"]) == 4
    assert (out / "metrics.csv").read_text().count("\n") == 5
    for which in ("last", "best", "sampled"):
        capsys.readouterr()
        assert cli.main(["eval", "--env", str(env), "--result", str(out / "result.json"), "--which", which]) == 0
        value = float(capsys.readouterr().out.split("cvar ")[-1])
        k = doc["policies"][which]["k"]
        assert abs(value - doc["records"][k - 1]["cvar_true_of_iterate"]) <= 1e-9


def test_bad_inputs(tmp_path):
    env, cfg = tmp_path / "env.json", tmp_path / "cfg.json"
    cli.main(["gen-env", "--out", str(env)])
    cfg.write_text(json.dumps({"tau": 2.0, "K": 1, "upsilon": 0.1}))
    assert cli.main(["run", "--config", str(cfg), "--env", str(env), "--out", str(tmp_path / "o")]) == 2
    cfg.write_text(json.dumps({"K": 1}))
    assert cli.main(["run", "--config", str(cfg), "--env", str(env), "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["oracle", "--env", str(tmp_path / "missing.json"), "--tau", "0.5"]) == 2
    assert cli.main(["props", "--suite", "nope"]) == 2
    assert cli.main(["frobnicate"]) == 2


def test_props_pass():
    assert cli.main(["props", "--suite", "eigen", "--suite", "sim-risk-neutral", "--trials", "5"]) == 0


def test_props_failure_exit(monkeypatch):
    monkeypatch.setitem(cli.SUITES, "eigen", lambda rng: CheckResult(False, 1.0, 0.0))
    assert cli.main(["props", "--suite", "eigen", "--trials", "2"]) == 3
