"""Micro-scale invariant suite behind ``pmu-purify verify``.

Builds everything it needs from scratch (no network access, no stored
artifacts) and finishes in well under five minutes on one core.
"""

from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .baselines import butter_design, compact_svd
from .classifier import classifier_layers
from .config import RunConfig
from .diffusion import (PurifyConfig, build_estimator, forward_diffuse, forward_noise,
                        linear_schedule, make_tau_grid, purify)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}: {self.detail} ({self.seconds:.1f}s)"


def layer_networks() -> list[nn.Network]:
    """One tiny network per layer kind plus both full architectures."""
    small = [
        nn.Network([{"kind": "dense", "in_features": 6, "out_features": 4}], (6,), seed=1),
        nn.Network([{"kind": "conv1d-time", "in_channels": 3, "out_channels": 4, "width": 3}],
                   (9, 3), seed=2),
        nn.Network([{"kind": "dense", "in_features": 5, "out_features": 5}, {"kind": "relu"}],
                   (5,), seed=3),
        nn.Network([{"kind": "global-average-pool-time"}], (7, 3), seed=4),
        nn.Network([{"kind": "time-embedding-add", "emb_dim": 8, "channels": 3}], (6, 3), seed=5),
        nn.Network([{"kind": "reshape", "shape": [48]},
                    {"kind": "dense", "in_features": 48, "out_features": 2}], (6, 2, 4), seed=6),
    ]
    clf = nn.Network(classifier_layers((12, 2, 4), (6, 5), 3), (12, 2, 4), seed=7)
    est = build_estimator((12, 2, 4))
    rng = np.random.default_rng(8)
    for p in est.params[6].values():  # the output layer starts at zero; perturb it
        p[...] = rng.normal(0, 0.1, p.shape)
    est.bump()
    return small + [clf, est]


def check_gradients(n_cases: int = 24, tol: float = 1e-4) -> Check:
    nets = layer_networks()
    worst, cases = 0.0, 0
    for case in range(n_cases):
        net = nets[case % len(nets)]
        worst = max(worst, nn.grad_check(net, seed=100 + case, h=1e-5, max_entries=25))
        cases += 1
    return Check("gradients", worst < tol, f"{cases} cases, max relative error {worst:.2e}")


def check_forward_scaling(n_pairs: int = 100, t_star: int = 4) -> Check:
    sched = linear_schedule()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n_pairs, 10, 3, 4))
    xp = x + rng.normal(0, 0.1, x.shape)
    eps = rng.standard_normal(x.shape)
    d0 = np.linalg.norm((x - xp).reshape(n_pairs, -1), axis=1)
    dt = np.linalg.norm((forward_diffuse(x, t_star, eps, sched)
                         - forward_diffuse(xp, t_star, eps, sched)).reshape(n_pairs, -1), axis=1)
    scale = math.sqrt(sched.alpha_bars[t_star])
    rel = float(np.max(np.abs(dt - scale * d0) / (scale * d0)))
    return Check("forward-scaling", rel < 1e-9, f"sqrt(abar_{t_star})={scale:.5f}, max rel {rel:.1e}")


def check_oracle_identity(n: int = 100) -> Check:
    sched = linear_schedule()
    rng = np.random.default_rng(1)
    x = rng.standard_normal((n, 10, 3, 4))
    worst = 0.0
    for steps in (1, 2, 3, 4):
        pcfg = PurifyConfig(t_star=4, steps=steps, seed=5)
        ids = np.arange(n)
        eps = forward_noise(x.shape[1:], ids, pcfg.seed)
        oracle = lambda xt, t: eps  # the true noise is consistent along the deterministic path
        out = purify(x, oracle, sched, pcfg, ids, eps=eps)
        worst = max(worst, float(np.max(np.abs(out - x))))
    return Check("oracle-identity", worst < 1e-8, f"grids {[make_tau_grid(4, s) for s in (1, 2, 3, 4)]}, "
                 f"max abs error {worst:.1e}")


def check_butterworth() -> Check:
    f = butter_design(10, 10.0, 30.0)
    g0, gc, g14 = f.gain([0.0, 10.0, 14.0])
    ok = abs(g0 - 1) < 1e-9 and abs(gc - 1 / math.sqrt(2)) < 1e-6 and g14 < 0.01
    return Check("butterworth", ok, f"gain(0)={g0:.12f}, gain(10)={gc:.9f}, gain(14)={g14:.2e}")


def check_svd(n: int = 50) -> Check:
    rng = np.random.default_rng(2)
    worst_rec, worst_ey = 0.0, 0.0
    for i in range(n):
        m, k = rng.integers(2, 30, size=2)
        M = rng.standard_normal((m, k))
        f = compact_svd(M)
        worst_rec = max(worst_rec, float(np.max(np.abs(f.reconstruct() - M))))
        r = int(rng.integers(1, min(m, k) + 1))
        err = np.linalg.norm(M - f.reconstruct(r), "fro") ** 2
        worst_ey = max(worst_ey, abs(err - float(np.sum(f.s[r:] ** 2))) / max(1.0, float(np.sum(M**2))))
    ok = worst_rec < 1e-10 and worst_ey < 1e-8
    return Check("svd", ok, f"reconstruction {worst_rec:.1e}, Eckart-Young {worst_ey:.1e}")


def micro_config(seed: int = 0) -> RunConfig:
    """Seconds-scale pipeline: 4 PMUs x 16 steps, a handful of epochs."""
    return RunConfig.from_dict({
        "data": {"W": 16, "K": 4, "samples_per_class": 12},
        "classifier": {"conv_channels": [8, 8], "epochs": 3},
        "diffusion": {"emb_dim": 8, "hidden_channels": 8, "epochs": 2},
        "attacks": {"iterations": 3, "deepfool_max_iter": 3, "cw_iterations": 3, "cw_c": [1.0]},
        "purifiers": {"svd_rank": 3},
        "eval": {"pmu_counts": [2, 4], "bench_window": 16, "latency": False},
        "seeds": {"global_seed": seed},
    })


def check_micro_pipeline(seed: int = 0) -> Check:
    from .evaluation import ExperimentPlan, run_pipeline

    outs = []
    with tempfile.TemporaryDirectory() as tmp:
        for rep in range(2):
            plan = ExperimentPlan(micro_config(seed), Path(tmp) / f"run{rep}")
            run_pipeline(plan)
            outs.append({n: (plan.report_dir / n).read_bytes() for n in ("f1_grid.csv", "l2_trace.csv")})
    same = outs[0] == outs[1]
    rows = outs[0]["f1_grid.csv"].decode().count("\n") - 1
    return Check("micro-pipeline", same and rows == 36, f"{rows} grid cells, rerun identical={same}")


CHECKS = (check_gradients, check_forward_scaling, check_oracle_identity, check_butterworth,
          check_svd, check_micro_pipeline)


def run_invariant_suite() -> list[Check]:
    results = []
    for fn in CHECKS:
        t0 = time.perf_counter()
        try:
            c = fn()
        except Exception as exc:  # report, keep going
            c = Check(fn.__name__.removeprefix("check_").replace("_", "-"), False,
                      f"{type(exc).__name__}: {exc}")
        c.seconds = time.perf_counter() - t0
        results.append(c)
    return results
