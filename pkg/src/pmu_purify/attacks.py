"""Gradient-based evasion attacks on the event classifier.

All attacks work on batches of normalized windows ``[N, W, K, 4]`` and are
per-sample independent: sample ``i`` of a batch gets the same result as a
batch of one (PGD draws its start from a stream seeded by ``(seed, i)``,
where ``i`` is the sample's position in the original dataset).

FGSM, BIM and PGD enforce an element-wise budget ``|eta| <= xi``; DeepFool and
C&W are minimum-L2 attacks. Both norms are always reported.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .classifier import input_gradient, logit_jacobian, logits, margin_grad
from .data import Dataset, save_dataset
from .exceptions import ConfigurationError

log = logging.getLogger(__name__)

ATTACKS = ("fgsm", "pgd", "bim", "deepfool", "cw")


@dataclass
class AttackConfig:
    kind: str = "fgsm"
    xi: float = 0.05
    alpha: float = 0.005
    iterations: int = 100
    pgd_init_std: float = 0.5  # fraction of xi
    deepfool_max_iter: int = 50
    deepfool_overshoot: float = 0.02
    cw_iterations: int = 50
    cw_lr: float = 0.01
    cw_c: float | tuple = 1.0  # a tuple runs a sweep, keeping the lowest-norm success
    cw_kappa: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ConfigurationError(f"unknown attack {self.kind!r}; expected one of {ATTACKS}")
        if self.xi < 0 or self.alpha <= 0:
            raise ConfigurationError("attack budget xi must be >= 0 and step alpha > 0")
        if self.iterations < 1 or self.cw_iterations < 1 or self.deepfool_max_iter < 1:
            raise ConfigurationError("iteration counts must be >= 1")
        if isinstance(self.cw_c, (list, tuple)):
            self.cw_c = tuple(float(v) for v in self.cw_c)
            if not self.cw_c:
                raise ConfigurationError("cw_c sweep must not be empty")
        if min(np.atleast_1d(self.cw_c)) < 0:
            raise ConfigurationError("cw_c must be non-negative")


@dataclass
class AttackResult:
    """Batch of compromised windows ``x_adv = x + eta``."""

    x_adv: np.ndarray
    eta: np.ndarray
    success: np.ndarray  # bool [N]: argmax(f(x_adv)) != y
    l2: np.ndarray  # [N]
    linf: np.ndarray  # [N]
    iterations: np.ndarray | None = None
    errors: list = field(default_factory=list)

    def __len__(self):
        return len(self.success)

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success)) if len(self) else 0.0


def _result(net, x, y, eta, iterations=None) -> AttackResult:
    x_adv = x + eta
    flat = eta.reshape(len(eta), -1)
    pred = logits(net, x_adv).argmax(axis=1) if len(x) else np.zeros(0, dtype=np.int64)
    return AttackResult(
        x_adv=x_adv,
        eta=eta,
        success=pred != y,
        l2=np.linalg.norm(flat, axis=1),
        linf=np.abs(flat).max(axis=1, initial=0.0),
        iterations=iterations,
        errors=[None] * len(x),
    )


def _prep(x, y):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    y = np.asarray(y)
    if y.ndim == 2 or (single and y.ndim == 1 and y.size > 1):
        y = np.atleast_2d(y).argmax(axis=1)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if len(y) != len(x):
        raise ConfigurationError(f"{len(y)} labels for {len(x)} windows")
    return x, y


def fgsm(net: nn.Network, x, y, xi: float = 0.05) -> AttackResult:
    """One signed-gradient step of size ``xi`` on the cross-entropy."""
    x, y = _prep(x, y)
    g, _ = input_gradient(net, x, y, "cross-entropy")
    return _result(net, x, y, xi * np.sign(g))


def _iterative(net, x, y, eta, xi, alpha, iterations):
    for _ in range(iterations):
        g, _ = input_gradient(net, x + eta, y, "cross-entropy")
        eta = np.clip(eta + alpha * np.sign(g), -xi, xi)
    return eta


def bim(net: nn.Network, x, y, xi: float = 0.05, alpha: float = 0.005, iterations: int = 100):
    """Basic iterative method: clipped signed steps starting from zero."""
    x, y = _prep(x, y)
    eta = _iterative(net, x, y, np.zeros_like(x), xi, alpha, iterations)
    return _result(net, x, y, eta)


def pgd(net: nn.Network, x, y, xi: float = 0.05, alpha: float = 0.005, iterations: int = 100,
        seed: int = 0, init_std: float = 0.5, sample_ids=None) -> AttackResult:
    """BIM from a Gaussian start ``N(0, (init_std * xi)^2)`` clipped to the budget.

    ``sample_ids`` name the per-sample RNG streams (default ``0..N-1``).
    """
    x, y = _prep(x, y)
    ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids)
    eta0 = np.empty_like(x)
    for row, sid in enumerate(ids):
        rng = np.random.default_rng([seed, int(sid)])
        eta0[row] = rng.normal(0.0, init_std * xi, x.shape[1:]) if xi > 0 else 0.0
    eta0 = np.clip(eta0, -xi, xi)
    eta = _iterative(net, x, y, eta0, xi, alpha, iterations)
    return _result(net, x, y, eta)


def deepfool(net: nn.Network, x, y=None, max_iter: int = 50, overshoot: float = 0.02,
             epsilon: float = 1e-8) -> AttackResult:
    """Iterated linearized projection onto the nearest decision boundary.

    The reference class is the true label when given, else the clean
    prediction. Samples already on the wrong side get ``eta = 0`` after zero
    iterations; samples that never cross report ``success=False``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if y is None:
        y = logits(net, x).argmax(axis=1)
    x, y = _prep(x, y)
    n = len(x)
    r_tot = np.zeros_like(x)
    iters = np.zeros(n, dtype=np.int64)
    active = logits(net, x).argmax(axis=1) == y
    rows = np.arange(n)
    for it in range(max_iter):
        idx = rows[active]
        if idx.size == 0:
            break
        x_i = x[idx] + (1 + overshoot) * r_tot[idx]
        jac, z = logit_jacobian(net, x_i)
        yt = y[idx]
        m = len(idx)
        w = jac - jac[np.arange(m), yt][:, None]
        f = z - z[np.arange(m), yt][:, None]
        wnorm = np.linalg.norm(w.reshape(m, z.shape[1], -1), axis=2)
        with np.errstate(divide="ignore", invalid="ignore"):
            dist = np.abs(f) / wnorm
        dist[np.arange(m), yt] = np.inf
        dist[~np.isfinite(dist)] = np.inf
        best = dist.argmin(axis=1)
        stuck = ~np.isfinite(dist[np.arange(m), best])
        wl = w[np.arange(m), best]
        scale = (np.abs(f[np.arange(m), best]) + epsilon) / np.maximum(wnorm[np.arange(m), best], 1e-300) ** 2
        scale[stuck] = 0.0
        r_tot[idx] += scale.reshape((m,) + (1,) * (x.ndim - 1)) * wl
        iters[idx] += 1
        pred = logits(net, x[idx] + (1 + overshoot) * r_tot[idx]).argmax(axis=1)
        still = (pred == yt) & ~stuck
        active[idx] = still
    return _result(net, x, y, (1 + overshoot) * r_tot, iters)


def cw_l2(net: nn.Network, x, y, iterations: int = 50, lr: float = 0.01, c=1.0,
          kappa: float = 0.0) -> AttackResult:
    """Carlini-Wagner L2 with a fixed trade-off constant (or a sweep of them).

    Minimizes ``||eta||^2 + c * max(z_true - max_{j != true} z_j, -kappa)``
    with Adam over an unconstrained ``eta`` (normalized PMU data has no box).
    Returns, per sample, the lowest-norm iterate that succeeded; samples that
    never succeed return the final iterate.

    ``c`` may be a sequence: each constant is run from scratch and the
    lowest-norm success over all runs is kept (final iterate of the last
    constant for samples that never succeed).
    """
    x, y = _prep(x, y)
    constants = [float(v) for v in np.atleast_1d(np.asarray(c, dtype=np.float64))]
    if not constants or any(v < 0 for v in constants):
        raise ConfigurationError(f"C&W constant(s) must be non-negative, got {c!r}")
    bshape = (len(x),) + (1,) * (x.ndim - 1)
    best = best_norm = None
    for const in constants:
        eta, norm = _cw_run(net, x, y, iterations, lr, const, kappa)
        if best is None:
            best, best_norm = eta, norm
        else:
            better = norm < best_norm
            # unsuccessful samples follow the most recent run
            better |= ~np.isfinite(best_norm) & ~np.isfinite(norm)
            best = np.where(better.reshape(bshape), eta, best)
            best_norm = np.where(better, norm, best_norm)
    return _result(net, x, y, best)


def _cw_run(net, x, y, iterations, lr, c, kappa):
    """One fixed-``c`` run; returns ``(eta, squared_norm)`` with ``inf`` norm when unsuccessful."""
    n = len(x)
    eta = np.zeros_like(x)
    best = np.zeros_like(x)
    best_norm = np.full(n, np.inf)
    opt = nn.OptimizerState("adam", learning_rate=lr)
    params = [{"eta": eta}]
    bshape = (n,) + (1,) * (x.ndim - 1)

    def track(z):
        other = z.copy()
        other[np.arange(n), y] = -np.inf
        margin = z[np.arange(n), y] - other.max(axis=1)
        ok = (z.argmax(axis=1) != y) & (margin <= -kappa)
        norm = np.sum(params[0]["eta"].reshape(n, -1) ** 2, axis=1)
        better = ok & (norm < best_norm)
        best[better] = params[0]["eta"][better]
        best_norm[better] = norm[better]
        return margin

    for _ in range(iterations):
        z, cache = nn.forward(net, x + params[0]["eta"])
        margin = track(z)
        dz = margin_grad(z, y) * (c * (margin > -kappa))[:, None]
        _, dx = nn.backward(net, cache, dz)
        grad = 2 * params[0]["eta"] + dx
        nn.optimizer_step(opt, params, [{"eta": grad}])
    track(logits(net, x + params[0]["eta"]))
    found = np.isfinite(best_norm)
    return np.where(found.reshape(bshape), best, params[0]["eta"]), best_norm


def run_attack(net: nn.Network, x, y, cfg: AttackConfig, sample_ids=None) -> AttackResult:
    """Dispatch a batch to the attack named by ``cfg.kind``."""
    if cfg.kind == "fgsm":
        return fgsm(net, x, y, cfg.xi)
    if cfg.kind == "bim":
        return bim(net, x, y, cfg.xi, cfg.alpha, cfg.iterations)
    if cfg.kind == "pgd":
        return pgd(net, x, y, cfg.xi, cfg.alpha, cfg.iterations, cfg.seed, cfg.pgd_init_std,
                   sample_ids=sample_ids)
    if cfg.kind == "deepfool":
        return deepfool(net, x, y, cfg.deepfool_max_iter, cfg.deepfool_overshoot)
    return cw_l2(net, x, y, cfg.cw_iterations, cfg.cw_lr, cfg.cw_c, cfg.cw_kappa)


def _concat(parts: list[AttackResult]) -> AttackResult:
    return AttackResult(
        x_adv=np.concatenate([p.x_adv for p in parts]),
        eta=np.concatenate([p.eta for p in parts]),
        success=np.concatenate([p.success for p in parts]),
        l2=np.concatenate([p.l2 for p in parts]),
        linf=np.concatenate([p.linf for p in parts]),
        iterations=(np.concatenate([p.iterations for p in parts])
                    if all(p.iterations is not None for p in parts) else None),
        errors=[e for p in parts for e in p.errors],
    )


def _failed(x, y, exc) -> AttackResult:
    n = len(x)
    return AttackResult(x.copy(), np.zeros_like(x), np.zeros(n, bool), np.zeros(n), np.zeros(n),
                        errors=[f"{type(exc).__name__}: {exc}"] * n)


def attack_dataset(net: nn.Network, x, y, cfg: AttackConfig, chunk_size: int = 64,
                   sample_ids=None, map_fn=map) -> tuple[AttackResult, dict]:
    """Attack a whole split in fixed-size chunks.

    Chunk boundaries do not depend on ``map_fn`` (which may be a worker
    pool's ``map``), so results are identical for any degree of parallelism.
    A failing sample is flagged in ``errors`` and passed through unmodified.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids)
    if len(x) == 0:
        empty = AttackResult(x.copy(), np.zeros_like(x), np.zeros(0, bool), np.zeros(0), np.zeros(0))
        return empty, summarize(empty)
    starts = range(0, len(x), chunk_size)

    def work(s):
        sl = slice(s, s + chunk_size)
        try:
            return run_attack(net, x[sl], y[sl], cfg, sample_ids=ids[sl])
        except Exception:  # retry one by one so only the offending rows are flagged
            rows = []
            for i in range(s, min(s + chunk_size, len(x))):
                try:
                    rows.append(run_attack(net, x[i : i + 1], y[i : i + 1], cfg, sample_ids=ids[i : i + 1]))
                except Exception as exc:
                    log.warning("attack %s failed on sample %d: %s", cfg.kind, ids[i], exc)
                    rows.append(_failed(x[i : i + 1], y[i : i + 1], exc))
            return _concat(rows)

    result = _concat(list(map_fn(work, starts)))
    return result, summarize(result)


def summarize(result: AttackResult) -> dict:
    n = len(result)
    return {
        "n_samples": n,
        "success_rate": result.success_rate,
        "n_success": int(np.sum(result.success)),
        "n_errors": sum(e is not None for e in result.errors),
        "mean_l2": float(np.mean(result.l2)) if n else 0.0,
        "mean_linf": float(np.mean(result.linf)) if n else 0.0,
        "max_linf": float(np.max(result.linf)) if n else 0.0,
    }


def save_attacked(result: AttackResult, labels, path, cfg: AttackConfig, summary: dict,
                  sample_ids=None, sample_rate_hz: float = 30.0) -> None:
    """Attacked split in dataset layout (normalized values) + ``attack_meta.json``."""
    path = Path(path)
    ds = Dataset(result.x_adv.astype(np.float32), np.asarray(labels, dtype=np.uint8), sample_rate_hz)
    save_dataset(ds, path, extra={"space": "normalized"})
    meta = {
        "config": asdict(cfg),
        "summary": summary,
        "sample_ids": (np.arange(len(result)) if sample_ids is None else np.asarray(sample_ids)).tolist(),
        "success": result.success.astype(bool).tolist(),
        "l2": result.l2.tolist(),
        "linf": result.linf.tolist(),
        "errors": result.errors,
    }
    (path / "attack_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
