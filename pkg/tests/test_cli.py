import json
import subprocess
import sys

import pytest

from facade_recon import __version__
from facade_recon.cli import main
from facade_recon.config import RunConfig, load_run_config, parse_run_config
from facade_recon.errors import ConfigError


def run_cli(*argv):
    return subprocess.run([sys.executable, "-m", "facade_recon.cli", *argv], capture_output=True, text=True)


def test_dump_graph(capsys):
    assert main(["dump-graph", "--rows", "25", "--cols", "5"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["num_nodes"] == 125 and len(d["nodes"]) == 125
    assert d["num_grid_edges"] == 220
    assert d["nodes"][124]["row"] == 25 and d["nodes"][124]["col"] == 5


def test_missing_config_is_usage_error():
    r = run_cli("train", "--data", "x", "--out", "y")
    assert r.returncode == 2
    assert "usage:" in r.stderr and "--config" in r.stderr


def test_unknown_flag_is_usage_error():
    assert run_cli("dump-graph", "--bogus").returncode == 2


def test_invalid_config_exit_1(tmp_path):
    (tmp_path / "c.json").write_text(json.dumps({"seed": 1, "model": {"heads": "four", "gat_hiden": 3}}))
    r = run_cli("arch-summary", "--config", str(tmp_path / "c.json"))
    assert r.returncode == 1
    err = json.loads(r.stderr.strip().splitlines()[-1])
    assert err["error"] == "ConfigError" and "model.gat_hiden" in err["message"]


def test_seed_required():
    with pytest.raises(ConfigError, match="seed"):
        parse_run_config({"model": {}})
    with pytest.raises(ConfigError, match="seed"):
        parse_run_config({"seed": "7"})


def test_config_round_trip(tmp_path):
    raw = {"seed": 4, "model": {"enc_channels": 32, "dilations": [1, 2]}, "train": {"epochs": 20, "switch_epoch": 5},
           "scenarios": [{"name": "two", "masked": [3, 9]}], "inference": {"bands": [[0, 10]]},
           "data": {"synth": {"length": 1000}}}
    cfg = parse_run_config(raw)
    again = parse_run_config(json.loads(json.dumps(cfg.to_dict())))
    assert again == cfg
    assert again.to_dict() == cfg.to_dict()
    assert isinstance(cfg, RunConfig) and cfg.model.dilations == (1, 2)
    (tmp_path / "c.json").write_text(json.dumps(cfg.to_dict()))
    assert load_run_config(tmp_path / "c.json") == cfg


def test_synth_snapshot_and_version(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"directions": [0], "length": 300, "rows": 5, "cols": 3}))
    assert main(["synth", "--config", str(tmp_path / "s.json"), "--out", str(tmp_path / "d"), "--threads", "1"]) == 0
    snap = json.loads((tmp_path / "d" / "run.json").read_text())
    assert snap["version"] == __version__
    assert snap["threads"] == 1
    assert snap["config"]["length"] == 300
    assert (tmp_path / "d" / "manifest.json").exists()


def test_threads_env_fallback(tmp_path, monkeypatch):
    monkeypatch.setenv("FACADE_RECON_THREADS", "3")
    (tmp_path / "s.json").write_text(json.dumps({"directions": [0], "length": 300, "rows": 5, "cols": 3}))
    main(["synth", "--config", str(tmp_path / "s.json"), "--out", str(tmp_path / "d")])
    assert json.loads((tmp_path / "d" / "run.json").read_text())["threads"] == 3


def test_arch_summary(capsys):
    assert main(["arch-summary"]) == 0
    assert capsys.readouterr().out.strip().splitlines()[-1].startswith("total")
