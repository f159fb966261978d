import json
import math

import numpy as np
import pytest

from pmu_purify.classifier import logits, macro_f1
from pmu_purify.config import RunConfig, load_config
from pmu_purify.diffusion import PurifyConfig, linear_schedule
from pmu_purify.evaluation import (ExperimentPlan, emit_report, l2_trace, load_classifier,
                                   load_plan_dataset, read_csv, run_f1_grid, run_latency_bench,
                                   run_pipeline, stage_gen_data, write_f1_grid)
from pmu_purify.exceptions import ConfigurationError, MissingArtifactError, PurifyError
from pmu_purify.verify import micro_config


@pytest.fixture(scope="module")
def micro(tmp_path_factory):
    plan = ExperimentPlan(micro_config(0), tmp_path_factory.mktemp("micro"))
    summary = run_pipeline(plan)
    return plan, summary


def test_grid_shape_and_columns(micro):
    plan, summary = micro
    rows = read_csv(plan.report_dir / "f1_grid.csv")
    assert len(rows) == 36
    assert {r["purifier"] for r in rows} == {"none", "feature-squeeze", "lowpass", "svd",
                                             "event-participation", "diffusion"}
    assert {r["attack"] for r in rows} == {"original", "fgsm", "pgd", "bim", "deepfool", "cw"}
    for r in rows:
        assert 0.0 <= float(r["f1"]) <= 1.0
        assert float(r["f1"]) == summary["f1_grid"][r["purifier"]][r["attack"]]


def test_unpurified_original_is_plain_f1(micro):
    plan, summary = micro
    ds = load_plan_dataset(plan)
    net = load_classifier(plan, ds)
    f1 = macro_f1(logits(net, ds.X("test")).argmax(axis=1), ds.y("test"))
    assert summary["f1_grid"]["none"]["original"] == f1


def test_summary_contents(micro):
    plan, summary = micro
    doc = json.loads((plan.report_dir / "summary.json").read_text())
    assert doc == json.loads(json.dumps(summary))
    assert doc["config_hash"] == plan.config.hash()
    assert set(doc["inputs"]) == {"dataset", "classifier", "estimator"}
    assert set(doc["attack_summaries"]) == set(plan.attacks)
    assert load_config(plan.report_dir / "summary.json") == plan.config
    assert (plan.out / "config.json").exists()


def test_l2_trace_csv(micro):
    plan, _ = micro
    rows = read_csv(plan.report_dir / "l2_trace.csv")
    assert len(rows) == 5 * len(plan.attacks)
    labels = [r["step_label"] for r in rows if r["attack"] == "pgd"]
    assert labels == ["initial", "forward", "backward-3", "backward-1", "backward-0"]
    sched = linear_schedule()
    pgd = [r for r in rows if r["attack"] == "pgd"]
    assert float(pgd[1]["mean_l2"]) == pytest.approx(
        math.sqrt(sched.alpha_bars[4]) * float(pgd[0]["mean_l2"]), rel=1e-9)
    assert pgd[0]["c_eps_t"] == "" and float(pgd[-1]["c_eps_t"]) > 1


def test_emit_is_byte_identical(micro, tmp_path):
    plan, _ = micro
    grid = run_f1_grid(plan)
    before = (plan.report_dir / "f1_grid.csv").read_bytes()
    emit_report(plan, grid, None, None)
    assert (plan.report_dir / "f1_grid.csv").read_bytes() == before
    summary = json.loads((plan.report_dir / "summary.json").read_text())
    assert "l2_trace" in summary and "attack_summaries" in summary  # merged, not dropped


def test_rerun_from_summary_is_identical(micro, tmp_path):
    plan, _ = micro
    cfg = load_config(plan.report_dir / "summary.json")
    plan2 = ExperimentPlan(cfg, tmp_path / "again", workers=2)
    run_pipeline(plan2)
    for name in ("f1_grid.csv", "l2_trace.csv"):
        assert (plan2.report_dir / name).read_bytes() == (plan.report_dir / name).read_bytes()
    for a in plan.attacks:
        assert ((plan2.attacked_dir(a) / "windows.f32").read_bytes()
                == (plan.attacked_dir(a) / "windows.f32").read_bytes())


def test_l2_trace_zero_for_identical_inputs():
    X = np.random.default_rng(0).standard_normal((4, 10, 2, 4))
    est = lambda x, t: 0.1 * x
    tr = l2_trace(X, X.copy(), est, linear_schedule(), PurifyConfig(), np.arange(4))
    assert np.all(tr["mean"] == 0) and tr["violation_fraction"] == 0.0


def test_l2_trace_oracle_path():
    # a linear contraction estimator: forward exact, backward never expands
    rng = np.random.default_rng(1)
    X = rng.standard_normal((6, 10, 2, 4))
    Xa = X + 0.1 * rng.standard_normal(X.shape)
    tr = l2_trace(X, Xa, lambda x, t: 2.0 * x, linear_schedule(), PurifyConfig(), np.arange(6))
    assert tr["labels"][:2] == ["initial", "forward"] and len(tr["mean"]) == 5
    assert tr["mean_nonincreasing"] and tr["violation_fraction"] == 0.0


def test_empty_grid_rejected(tmp_path):
    with pytest.raises(ConfigurationError):
        write_f1_grid({"rows": [], "columns": [], "f1": {}}, tmp_path / "g.csv")


def test_missing_artifacts(tmp_path):
    plan = ExperimentPlan(micro_config(0), tmp_path / "empty")
    with pytest.raises(MissingArtifactError, match="manifest.json"):
        run_f1_grid(plan)
    stage_gen_data(plan)
    with pytest.raises(MissingArtifactError, match="classifier|attacked"):
        run_f1_grid(plan)


def test_latency_rows(tmp_path):
    cfg = micro_config(0)
    plan = ExperimentPlan(cfg, tmp_path / "bench")
    stage_gen_data(plan)
    rows = run_latency_bench(plan)
    assert {r["purifier"] for r in rows} == set(plan.purifiers) - {"none"}
    assert len(rows) == 5 * len(cfg.eval.pmu_counts)
    for r in rows:
        assert r["pmu_count"] in cfg.eval.pmu_counts and r["reps"] >= 30 and r["mean_ms"] > 0


def test_report_dir_failure(micro, tmp_path):
    plan, _ = micro
    blocker = tmp_path / "file"
    blocker.write_text("x")
    cfg = RunConfig.from_dict({**plan.config.to_dict(), "paths": {"report": "file/report"}})
    bad = ExperimentPlan(cfg, tmp_path)
    with pytest.raises(PurifyError):
        emit_report(bad, None, None, None)
