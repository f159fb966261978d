"""Experiment harness: purifier x attack F1 grid, L2 distance traces and the
streaming latency benchmark, plus the stage functions of the full pipeline.

Every stage reads its inputs from and writes its outputs to an output
directory, so the pipeline can be run end to end or one stage at a time and
produce identical files either way.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import platform
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy
import sklearn

from . import __version__, nn
from .attacks import attack_dataset, save_attacked
from .baselines import (EventParticipationPurifier, FeatureSqueezer, IdentityPurifier,
                        LowPassPurifier, SvdPurifier, butter_design, event_participation_purify,
                        feature_squeeze, lowpass_filter, svd_purify)
from .classifier import logits, macro_f1, train_classifier, write_history
from .config import PURIFIERS, SUMMARY_FORMAT, RunConfig
from .data import Dataset, generate_dataset, load_dataset, normalize, save_dataset, split
from .diffusion import (DiffusionPurifier, NoiseSchedule, build_estimator, forward_noise,
                        load_estimator, purify, save_estimator, step_constants, train_diffusion)
from .exceptions import ConfigurationError, MissingArtifactError, PurifyError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# artifact paths
# ---------------------------------------------------------------------------


@dataclass
class ExperimentPlan:
    """Where a run's artifacts live and which attacks/purifiers it covers."""

    config: RunConfig
    out: Path
    workers: int = 1
    attacks: list = field(default_factory=list)
    purifiers: list = field(default_factory=list)

    def __post_init__(self):
        self.out = Path(self.out)
        self.attacks = list(self.attacks or self.config.attacks.names)
        self.purifiers = list(self.purifiers or self.config.purifiers.names)

    @property
    def dataset_dir(self) -> Path:
        return self.out / self.config.paths.dataset

    @property
    def classifier_dir(self) -> Path:
        return self.out / self.config.paths.classifier

    @property
    def estimator_dir(self) -> Path:
        return self.out / self.config.paths.estimator

    def attacked_dir(self, attack: str) -> Path:
        return self.out / self.config.paths.attacked / attack

    @property
    def report_dir(self) -> Path:
        return self.out / self.config.paths.report

    def map(self, fn, items):
        """Order-preserving map over a thread pool of ``workers`` threads."""
        items = list(items)
        if self.workers <= 1 or len(items) <= 1:
            return list(map(fn, items))
        with ThreadPoolExecutor(self.workers) as pool:
            return list(pool.map(fn, items))


def require(*paths: Path) -> None:
    """Fail before any compute if an upstream artifact is missing."""
    for p in paths:
        if not Path(p).exists():
            raise MissingArtifactError(f"missing artifact: {p}")


def _sha256(path: Path) -> str:
    """Digest of a file, or of every file (name and bytes) under a directory."""
    path = Path(path)
    h = hashlib.sha256()
    files = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for f in files:
        h.update(f.relative_to(path).as_posix().encode() if path.is_dir() else b"")
        h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------


def stage_gen_data(plan: ExperimentPlan) -> Dataset:
    cfg = plan.config
    ds = generate_dataset(cfg.gen_config())
    ds = normalize(split(ds, cfg.data.split_fractions, cfg.seeds.resolve("split")))
    save_dataset(ds, plan.dataset_dir, extra={"config_hash": cfg.hash()})
    return ds


def load_plan_dataset(plan: ExperimentPlan) -> Dataset:
    require(plan.dataset_dir / "manifest.json")
    ds = load_dataset(plan.dataset_dir)
    if ds.stats is None or ds.splits is None:
        raise ConfigurationError(f"{plan.dataset_dir}: dataset is not split and normalized")
    return ds


def _stats_tag(ds: Dataset) -> dict:
    return ds.stats.to_dict()


def stage_train_classifier(plan: ExperimentPlan) -> nn.Network:
    ds = load_plan_dataset(plan)
    net, history = train_classifier(ds, plan.config.classifier_config())
    nn.save_checkpoint(net, plan.classifier_dir, extra={"role": "classifier",
                                                        "normalization": _stats_tag(ds)})
    write_history(history, plan.classifier_dir / "history.csv")
    return net


def load_classifier(plan: ExperimentPlan, ds: Dataset) -> nn.Network:
    require(plan.classifier_dir / "manifest.json")
    net, extra = nn.load_checkpoint(plan.classifier_dir)
    _check_stats(plan.classifier_dir, extra, ds)
    return net


def _check_stats(where, extra: dict, ds: Dataset) -> None:
    if extra.get("normalization") != _stats_tag(ds):
        raise ConfigurationError(f"{where}: checkpoint was trained with different normalization stats")


def stage_train_diffusion(plan: ExperimentPlan) -> nn.Network:
    ds = load_plan_dataset(plan)
    sched = plan.config.schedule()
    net, history = train_diffusion(ds, sched, plan.config.estimator_config())
    save_estimator(net, sched, plan.estimator_dir, extra={"normalization": _stats_tag(ds)})
    write_history(history, plan.estimator_dir / "history.csv")
    return net


def load_plan_estimator(plan: ExperimentPlan, ds: Dataset) -> tuple[nn.Network, NoiseSchedule]:
    require(plan.estimator_dir / "manifest.json")
    net, sched, extra = load_estimator(plan.estimator_dir, plan.config.schedule())
    _check_stats(plan.estimator_dir, extra, ds)
    return net, sched


def stage_attack(plan: ExperimentPlan, attacks=None) -> dict:
    ds = load_plan_dataset(plan)
    net = load_classifier(plan, ds)
    ids = ds.indices("test")
    X, y = ds.X("test"), ds.y("test")
    summaries = {}
    for name in attacks or plan.attacks:
        acfg = plan.config.attack_config(name)
        result, summary = attack_dataset(net, X, y, acfg, plan.config.attacks.chunk_size,
                                         sample_ids=ids, map_fn=plan.map)
        save_attacked(result, y, plan.attacked_dir(name), acfg, summary, sample_ids=ids,
                      sample_rate_hz=ds.sample_rate_hz)
        summaries[name] = summary
        log.info("attack %s: success rate %.3f", name, summary["success_rate"])
    return summaries


def load_attacked(plan: ExperimentPlan, attack: str, ds: Dataset) -> np.ndarray:
    """Attacked test windows (normalized, float32-rounded as stored)."""
    path = plan.attacked_dir(attack)
    require(path / "manifest.json", path / "attack_meta.json")
    adv = load_dataset(path)
    meta = json.loads((path / "attack_meta.json").read_text())
    if meta["sample_ids"] != ds.indices("test").tolist():
        raise ConfigurationError(f"{path}: attacked set does not match the dataset's test split")
    return adv.windows.astype(np.float64)


def attack_meta(plan: ExperimentPlan, attack: str) -> dict:
    return json.loads((plan.attacked_dir(attack) / "attack_meta.json").read_text())


# ---------------------------------------------------------------------------
# purifiers
# ---------------------------------------------------------------------------


def build_purifiers(plan: ExperimentPlan, ds: Dataset, estimator=None, sched=None) -> dict:
    """Fitted purifier transformers keyed by name, in plan order."""
    p = plan.config.purifiers
    out = {}
    for name in plan.purifiers:
        if name == "none":
            out[name] = IdentityPurifier().fit(None)
        elif name == "feature-squeeze":
            out[name] = FeatureSqueezer(p.squeeze_bits, p.squeeze_window).fit(ds.X("train"))
        elif name == "lowpass":
            out[name] = LowPassPurifier(p.lowpass_order, p.lowpass_cutoff_hz, ds.sample_rate_hz).fit()
        elif name == "svd":
            out[name] = SvdPurifier(p.svd_rank).fit()
        elif name == "event-participation":
            out[name] = EventParticipationPurifier().fit()
        elif name == "diffusion":
            if estimator is None:
                estimator, sched = load_plan_estimator(plan, ds)
            d = plan.config.diffusion
            out[name] = DiffusionPurifier.from_network(
                estimator, sched, t_star=d.t_star, steps=d.steps,
                random_state=plan.config.seeds.resolve("purify"))
        else:
            raise ConfigurationError(f"unknown purifier {name!r}; expected one of {PURIFIERS}")
    return out


def apply_purifier(purifier, X, sample_ids, plan: ExperimentPlan) -> np.ndarray:
    """Purify in fixed chunks; the diffusion purifier keys its noise by sample id."""
    chunk = plan.config.attacks.chunk_size
    starts = range(0, len(X), chunk)

    def work(s):
        sl = slice(s, s + chunk)
        if isinstance(purifier, DiffusionPurifier):
            return purifier.transform(X[sl], sample_ids=sample_ids[sl])
        return purifier.transform(X[sl])

    return np.concatenate(plan.map(work, starts)) if len(X) else X.copy()


# ---------------------------------------------------------------------------
# F1 grid
# ---------------------------------------------------------------------------


def run_f1_grid(plan: ExperimentPlan) -> dict:
    """Macro-F1 of the classifier for every purifier x {original, attacks} cell."""
    ds = load_plan_dataset(plan)
    for a in plan.attacks:
        require(plan.attacked_dir(a) / "manifest.json")
    net = load_classifier(plan, ds)
    purifiers = build_purifiers(plan, ds)
    ids = ds.indices("test")
    y = ds.y("test")
    inputs = {"original": ds.X("test")}
    for a in plan.attacks:
        inputs[a] = load_attacked(plan, a, ds)
    grid, flags = {}, {}
    for pname, purifier in purifiers.items():
        grid[pname] = {}
        for col, X in inputs.items():
            pred = logits(net, apply_purifier(purifier, X, ids, plan)).argmax(axis=1)
            f1, absent = macro_f1(pred, y, return_flags=True)
            grid[pname][col] = f1
            if absent:
                flags[f"{pname}/{col}"] = absent
    if not grid:
        raise ConfigurationError("empty F1 grid")
    return {"columns": list(inputs), "rows": list(purifiers), "f1": grid, "absent_classes": flags}


# ---------------------------------------------------------------------------
# L2 trace
# ---------------------------------------------------------------------------


def l2_trace(X, X_adv, estimator, sched: NoiseSchedule, pcfg, sample_ids) -> dict:
    """Distances ``||x_t - x'_t||`` along purification with shared noise.

    States: the inputs, the forward arrival at ``t_star``, then every grid
    point of the backward pass. Raises if the forward arrival deviates from
    the exact ``sqrt(abar_{t_star})`` scaling by more than 1e-9 relative.
    """
    eps = forward_noise(X.shape[1:], sample_ids, pcfg.seed)
    _, clean = purify(X, estimator, sched, pcfg, sample_ids, return_trajectory=True, eps=eps)
    _, adv = purify(X_adv, estimator, sched, pcfg, sample_ids, return_trajectory=True, eps=eps)
    d = np.stack([np.linalg.norm((a - c).reshape(len(X), -1), axis=1) for a, c in zip(adv, clean)])
    tau = pcfg.tau
    scale = math.sqrt(sched.alpha_bars[tau[-1]])
    expected = scale * d[0]
    err = np.abs(d[1] - expected)
    if np.any(err > 1e-9 * np.maximum(expected, 1e-300)) and np.any(expected > 0):
        bad = float(np.max(err / np.maximum(expected, 1e-300)))
        raise PurifyError(f"forward distance scaling violated (max relative error {bad:.3e})")
    labels = ["initial", "forward"] + [f"backward-{t}" for t in tau[::-1][1:]]
    t_index = [0, tau[-1]] + list(tau[::-1][1:])
    consts = [(None, None), (None, None)]
    for t_from, t_to in zip(tau[::-1][:-1], tau[::-1][1:]):
        consts.append(step_constants(sched, t_from, t_to))
    # backward-pass violations: per sample, a step that increases the distance
    back = d[1:]
    rel = (back[1:] - back[:-1]) / np.maximum(back[:-1], 1e-300)
    inc = rel > 0
    return {
        "labels": labels,
        "t_index": t_index,
        "mean": d.mean(axis=1),
        "std": d.std(axis=1),
        "constants": consts,
        "per_sample": d,
        "violation_fraction": float(inc.mean()) if inc.size else 0.0,
        "max_violation": float(rel[inc].max()) if inc.any() else 0.0,
        "mean_nonincreasing": bool(np.all(np.diff(d.mean(axis=1)) <= 0)),
    }


def run_l2_trace(plan: ExperimentPlan, attacks=None) -> dict:
    ds = load_plan_dataset(plan)
    est, sched = load_plan_estimator(plan, ds)
    X = ds.X("test")
    ids = ds.indices("test")
    out = {}
    for a in attacks or plan.attacks:
        out[a] = l2_trace(X, load_attacked(plan, a, ds), est, sched, plan.config.purify_config(), ids)
    return out


# ---------------------------------------------------------------------------
# latency benchmark
# ---------------------------------------------------------------------------


def _per_pmu(fn, window, pool):
    # one task per PMU column; each gets its own [W, 1, 4] slice
    cols = [window[:, k : k + 1] for k in range(window.shape[1])]
    return np.concatenate(list(pool.map(fn, cols)), axis=1)


def _per_channel(fn, window, pool):
    chans = [window[..., c : c + 1] for c in range(window.shape[2])]
    return np.concatenate(list(pool.map(fn, chans)), axis=2)


def bench_purifiers(plan: ExperimentPlan, K: int, lo, hi) -> dict:
    """Per-window purification callables for a ``K``-PMU stream."""
    p = plan.config.purifiers
    d = plan.config.diffusion
    W = plan.config.eval.bench_window
    filt = butter_design(p.lowpass_order, p.lowpass_cutoff_hz, plan.config.data.sample_rate_hz)
    est = build_estimator((W, K, 4), plan.config.estimator_config())
    # random weights: inference cost does not depend on the trained values
    rng = np.random.default_rng([plan.config.seeds.resolve("diffusion"), K])
    for layer in est.params:
        for v in layer.values():
            v[...] = rng.normal(0.0, 0.05, v.shape)
    est.bump()
    sched = plan.config.schedule()
    pcfg = plan.config.purify_config()
    rank = min(p.svd_rank, W, K)
    squeeze = lambda w: feature_squeeze(w, lo, hi, p.squeeze_bits, p.squeeze_window)
    fns = {
        "feature-squeeze": lambda w, pool: _per_pmu(squeeze, w, pool),
        "lowpass": lambda w, pool: _per_pmu(lambda c: lowpass_filter(c, filt), w, pool),
        "svd": lambda w, pool: _per_channel(lambda c: svd_purify(c, rank), w, pool),
        "event-participation": lambda w, pool: _per_channel(event_participation_purify, w, pool),
        "diffusion": lambda w, pool: purify(w, est, sched, pcfg),
    }
    return {k: v for k, v in fns.items() if k in plan.purifiers}


def run_latency_bench(plan: ExperimentPlan) -> list[dict]:
    """Mean per-window wall time for each purifier and PMU count.

    Every measurement processes a fresh window after ``bench_warmup``
    untimed windows; per-PMU and per-channel work is spread over a pool of
    ``workers`` threads, diffusion runs one batched inference per window.
    """
    e = plan.config.eval
    W = e.bench_window
    rows = []
    with ThreadPoolExecutor(max(1, plan.workers)) as pool:
        for K in e.pmu_counts:
            rng = np.random.default_rng([plan.config.seeds.resolve("data"), K])
            windows = rng.standard_normal((e.bench_warmup + e.bench_reps, W, K, 4))
            lo, hi = np.full(4, -4.0), np.full(4, 4.0)
            for name, fn in bench_purifiers(plan, K, lo, hi).items():
                times = []
                for i, w in enumerate(windows):
                    t0 = time.perf_counter()
                    fn(w, pool)
                    dt = time.perf_counter() - t0
                    if i >= e.bench_warmup:
                        times.append(dt * 1e3)
                rows.append({"purifier": name, "pmu_count": K, "mean_ms": float(np.mean(times)),
                             "std_ms": float(np.std(times)), "reps": len(times),
                             "workers": max(1, plan.workers)})
    return rows


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _write_csv(path: Path, header: list, rows: list) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue())


def write_f1_grid(grid: dict, path: Path) -> None:
    rows = [(p, c, float(grid["f1"][p][c])) for p in grid["rows"] for c in grid["columns"]]
    if not rows:
        raise ConfigurationError("empty F1 grid")
    _write_csv(path, ["purifier", "attack", "f1"], rows)


def write_l2_trace(traces: dict, path: Path) -> None:
    rows = []
    for attack, tr in traces.items():
        for i, label in enumerate(tr["labels"]):
            c_eps, c_t = tr["constants"][i]
            rows.append((attack, label, tr["t_index"][i], float(tr["mean"][i]), float(tr["std"][i]),
                         c_eps, c_t))
    _write_csv(path, ["attack", "step_label", "t_index", "mean_l2", "std_l2", "c_eps_t", "c_t"], rows)


def write_latency(rows: list[dict], path: Path) -> None:
    _write_csv(path, ["purifier", "pmu_count", "mean_ms", "std_ms", "reps", "workers"],
               [(r["purifier"], r["pmu_count"], r["mean_ms"], r["std_ms"], r["reps"], r["workers"])
                for r in rows])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def environment_info() -> dict:
    return {
        "package": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "machine": platform.machine(),
        "system": platform.system(),
        "cpu_count": os.cpu_count(),
    }


def emit_report(plan: ExperimentPlan, grid: dict | None, traces: dict | None,
                latency: list | None, attack_summaries: dict | None = None) -> dict:
    """Write the CSVs that were computed plus ``summary.json``.

    ``summary.json`` embeds the full configuration, so passing it back as
    ``--config`` re-derives every deterministic output byte for byte.
    Wall-clock latencies live only in ``latency.csv``.
    """
    out = plan.report_dir
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise PurifyError(f"cannot create report directory {out}: {exc}") from exc
    cfg = plan.config
    previous = {}
    if (out / "summary.json").exists():
        try:
            previous = json.loads((out / "summary.json").read_text())
        except ValueError:
            previous = {}
        if previous.get("config_hash") != cfg.hash():
            previous = {}
    summary = {k: v for k, v in previous.items()
               if k in ("attack_summaries", "f1_grid", "absent_classes", "l2_trace")}
    summary.update({
        "format": SUMMARY_FORMAT,
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "seeds": {s: cfg.seeds.resolve(s) for s in
                  ("data", "split", "classifier", "diffusion", "attack", "purify")},
        "environment": environment_info(),
        "attacks": plan.attacks,
        "purifiers": plan.purifiers,
        "inputs": {},
    })
    for name, path in (("dataset", plan.dataset_dir), ("classifier", plan.classifier_dir),
                       ("estimator", plan.estimator_dir)):
        if path.exists():
            summary["inputs"][name] = _sha256(path)
    if attack_summaries:
        summary["attack_summaries"] = attack_summaries
    if grid is not None:
        write_f1_grid(grid, out / "f1_grid.csv")
        summary["f1_grid"] = grid["f1"]
        summary["absent_classes"] = grid["absent_classes"]
    if traces is not None:
        write_l2_trace(traces, out / "l2_trace.csv")
        summary["l2_trace"] = {
            a: {"violation_fraction": t["violation_fraction"], "max_violation": t["max_violation"],
                "mean_nonincreasing": t["mean_nonincreasing"]}
            for a, t in traces.items()
        }
    if latency is not None:
        write_latency(latency, out / "latency.csv")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


def run_pipeline(plan: ExperimentPlan, latency: bool | None = None) -> dict:
    """gen-data -> train-classifier -> train-diffusion -> attack -> eval -> report."""
    plan.out.mkdir(parents=True, exist_ok=True)
    (plan.out / "config.json").write_text(
        json.dumps(plan.config.to_dict(), indent=2, sort_keys=True) + "\n")
    stage_gen_data(plan)
    stage_train_classifier(plan)
    if "diffusion" in plan.purifiers:
        stage_train_diffusion(plan)
    summaries = stage_attack(plan)
    grid = run_f1_grid(plan)
    traces = run_l2_trace(plan) if "diffusion" in plan.purifiers else None
    do_bench = plan.config.eval.latency if latency is None else latency
    bench = run_latency_bench(plan) if do_bench else None
    return emit_report(plan, grid, traces, bench, summaries)
