"""``pmu-purify`` command line.

Each subcommand is one node of the artifact dependency graph; all paths are
relative to ``--out``. Failures print one line ``error <Class>: <message>``
to stderr and exit nonzero (2 for configuration errors, 3 for missing
upstream artifacts, 1 otherwise).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .attacks import ATTACKS
from .config import PURIFIERS, load_config
from .data import Dataset, save_dataset
from .exceptions import ConfigurationError, MissingArtifactError, PurifyError
from . import evaluation as ev

EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING = 1, 2, 3


def _plan(args) -> ev.ExperimentPlan:
    cfg = load_config(args.config, seed=args.seed)
    attacks = [args.attack] if getattr(args, "attack", None) else None
    purifiers = [args.purifier] if getattr(args, "purifier", None) else None
    return ev.ExperimentPlan(cfg, Path(args.out), workers=args.workers, attacks=attacks,
                             purifiers=purifiers)


def _save_config(plan: ev.ExperimentPlan) -> None:
    plan.out.mkdir(parents=True, exist_ok=True)
    (plan.out / "config.json").write_text(
        json.dumps(plan.config.to_dict(), indent=2, sort_keys=True) + "\n")


def cmd_gen_data(plan, args):
    _save_config(plan)
    ds = ev.stage_gen_data(plan)
    print(f"dataset: {len(ds)} windows -> {plan.dataset_dir}")


def cmd_train_classifier(plan, args):
    ev.stage_train_classifier(plan)
    print(f"classifier -> {plan.classifier_dir}")


def cmd_train_diffusion(plan, args):
    ev.stage_train_diffusion(plan)
    print(f"estimator -> {plan.estimator_dir}")


def cmd_attack(plan, args):
    for name, s in ev.stage_attack(plan).items():
        print(f"{name}: success rate {s['success_rate']:.3f}, mean L2 {s['mean_l2']:.4f}")


def cmd_purify(plan, args):
    """Write purified test windows to ``purified/<purifier>/<attack|original>``."""
    ds = ev.load_plan_dataset(plan)
    sources = [args.attack] if args.attack else ["original"]
    X_by = {s: ds.X("test") if s == "original" else ev.load_attacked(plan, s, ds) for s in sources}
    purifiers = ev.build_purifiers(plan, ds)
    ids = ds.indices("test")
    for pname, purifier in purifiers.items():
        for src, X in X_by.items():
            out = ev.apply_purifier(purifier, X, ids, plan)
            path = plan.out / "purified" / pname / src
            save_dataset(Dataset(out.astype(np.float32), ds.y("test"), ds.sample_rate_hz), path,
                         extra={"space": "normalized", "sample_ids": ids.tolist()})
            print(f"{pname}/{src} -> {path}")


def cmd_eval_grid(plan, args):
    grid = ev.run_f1_grid(plan)
    ev.emit_report(plan, grid, None, None)
    for p in grid["rows"]:
        print(p, " ".join(f"{c}={grid['f1'][p][c]:.3f}" for c in grid["columns"]))


def cmd_l2_trace(plan, args):
    traces = ev.run_l2_trace(plan)
    ev.emit_report(plan, None, traces, None)
    for a, t in traces.items():
        print(a, " ".join(f"{lab}={m:.4f}" for lab, m in zip(t["labels"], t["mean"])))


def cmd_bench(plan, args):
    rows = ev.run_latency_bench(plan)
    ev.emit_report(plan, None, None, rows)
    for r in rows:
        print(f"{r['purifier']} K={r['pmu_count']}: {r['mean_ms']:.3f} ms")


def cmd_verify(plan, args):
    from .verify import run_invariant_suite

    results = run_invariant_suite()
    for c in results:
        print(c.line())
    if not all(c.passed for c in results):
        failed = ",".join(c.name for c in results if not c.passed)
        raise PurifyError(f"invariant checks failed: {failed}")


def cmd_pipeline(plan, args):
    summary = ev.run_pipeline(plan, latency=False if args.no_bench else None)
    print(f"report -> {plan.report_dir} (config {summary['config_hash']})")


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate, split and normalize the synthetic dataset"),
    "train-classifier": (cmd_train_classifier, "train the event classifier"),
    "train-diffusion": (cmd_train_diffusion, "train the diffusion noise estimator"),
    "attack": (cmd_attack, "craft adversarial test sets"),
    "purify": (cmd_purify, "write purified test sets"),
    "eval-grid": (cmd_eval_grid, "purifier x attack macro-F1 grid"),
    "l2-trace": (cmd_l2_trace, "L2 distance along purification"),
    "bench": (cmd_bench, "per-window latency across PMU counts"),
    "verify": (cmd_verify, "run the micro-scale invariant suite"),
    "pipeline": (cmd_pipeline, "run every stage and write the report"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pmu-purify", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, default=None, help="run config or summary.json")
        p.add_argument("--seed", type=int, default=None, help="global seed override")
        p.add_argument("--out", type=Path, default=Path("runs/default"), help="output directory")
        p.add_argument("--workers", type=int, default=os.cpu_count() or 1)
        p.add_argument("--attack", choices=ATTACKS, default=None)
        p.add_argument("--purifier", choices=PURIFIERS, default=None)
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "pipeline":
            p.add_argument("--no-bench", action="store_true", help="skip the latency benchmark")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn, _ = COMMANDS[args.command]
    try:
        if args.workers < 1:
            raise ConfigurationError("--workers must be >= 1")
        if args.config is not None and not args.config.exists():
            raise ConfigurationError(f"config file not found: {args.config}")
        fn(_plan(args), args)
    except ConfigurationError as exc:
        return _fail(exc, EXIT_CONFIG)
    except MissingArtifactError as exc:
        return _fail(exc, EXIT_MISSING)
    except (PurifyError, OSError) as exc:
        return _fail(exc, EXIT_ERROR)
    return 0


def _fail(exc: Exception, code: int) -> int:
    msg = " ".join(str(exc).split())
    print(f"error {type(exc).__name__}: {msg}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
