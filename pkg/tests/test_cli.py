import json
import subprocess
import sys

import pytest

from pmu_purify.cli import main
from pmu_purify.verify import micro_config


@pytest.fixture
def micro_cfg(tmp_path):
    path = tmp_path / "micro.json"
    path.write_text(json.dumps(micro_config(0).to_dict()))
    return path


def run(*args):
    return main([str(a) for a in args])


def test_gen_data_twice_identical(tmp_path, micro_cfg):
    for name in ("a", "b"):
        assert run("gen-data", "--config", micro_cfg, "--out", tmp_path / name) == 0
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_eval_grid_without_classifier_exits_3(tmp_path, micro_cfg, capsys):
    out = tmp_path / "run"
    assert run("gen-data", "--config", micro_cfg, "--out", out) == 0
    capsys.readouterr()
    assert run("eval-grid", "--config", micro_cfg, "--out", out) == 3
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error MissingArtifactError:")
    assert "manifest.json" in err[0]


def test_invalid_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"diffusion": {"t_star": 40}}))
    assert run("gen-data", "--config", bad, "--out", tmp_path / "x") == 2
    assert capsys.readouterr().err.startswith("error ConfigurationError:")
    assert run("gen-data", "--config", tmp_path / "nope.json", "--out", tmp_path / "x") == 2
    assert run("gen-data", "--out", tmp_path / "x", "--workers", "0") == 2


def test_stepwise_pipeline(tmp_path, micro_cfg, capsys):
    out = tmp_path / "run"
    for cmd in ("gen-data", "train-classifier", "train-diffusion", "attack", "eval-grid", "l2-trace"):
        assert run(cmd, "--config", micro_cfg, "--out", out, "--workers", 1) == 0, cmd
    rows = (out / "report" / "f1_grid.csv").read_text().splitlines()
    assert rows[0] == "purifier,attack,f1" and len(rows) == 37
    summary = json.loads((out / "report" / "summary.json").read_text())
    assert "l2_trace" in summary and "f1_grid" in summary

    assert run("purify", "--config", micro_cfg, "--out", out, "--attack", "fgsm",
               "--purifier", "svd") == 0
    assert (out / "purified" / "svd" / "fgsm" / "manifest.json").exists()

    # a one-attack, one-purifier grid overwrites the csv with a single cell
    assert run("eval-grid", "--config", micro_cfg, "--out", out, "--attack", "pgd",
               "--purifier", "lowpass") == 0
    assert len((out / "report" / "f1_grid.csv").read_text().splitlines()) == 1 + 2


def test_pipeline_and_rerun_from_summary(tmp_path, micro_cfg):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("pipeline", "--config", micro_cfg, "--out", a, "--no-bench") == 0
    assert run("pipeline", "--config", a / "report" / "summary.json", "--out", b, "--no-bench",
               "--workers", 3) == 0
    for name in ("f1_grid.csv", "l2_trace.csv"):
        assert (a / "report" / name).read_bytes() == (b / "report" / name).read_bytes()


def test_seed_flag_changes_data(tmp_path, micro_cfg):
    run("gen-data", "--config", micro_cfg, "--out", tmp_path / "s0")
    run("gen-data", "--config", micro_cfg, "--out", tmp_path / "s1", "--seed", 1)
    a = (tmp_path / "s0" / "data" / "windows.f32").read_bytes()
    assert a != (tmp_path / "s1" / "data" / "windows.f32").read_bytes()


def test_unknown_attack_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("attack", "--attack", "jsma", "--out", tmp_path)
    assert exc.value.code == 2


def test_console_entry_point_runs():
    res = subprocess.run([sys.executable, "-m", "pmu_purify.cli", "--help"], capture_output=True,
                         text=True)
    assert res.returncode == 0
    for cmd in ("gen-data", "train-classifier", "train-diffusion", "attack", "purify", "eval-grid",
                "l2-trace", "bench", "verify"):
        assert cmd in res.stdout


def test_verify_command(tmp_path, capsys):
    assert run("verify", "--out", tmp_path) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 6 and all(l.startswith("PASS ") for l in lines)
