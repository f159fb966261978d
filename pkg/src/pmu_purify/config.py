"""Run configuration: a strict JSON document with every field defaulted.

Sections: ``data``, ``classifier``, ``diffusion``, ``attacks``,
``purifiers``, ``eval``, ``seeds``, ``paths``. Unknown keys anywhere are
rejected, and the canonical form is hashed so every output can name the
exact configuration that produced it. A ``summary.json`` emitted by a
previous run is also accepted; its embedded configuration is used.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import get_type_hints

from .attacks import ATTACKS, AttackConfig
from .classifier import ClassifierConfig
from .data import GenConfig
from .diffusion import EstimatorConfig, PurifyConfig, linear_schedule
from .exceptions import ConfigurationError

SEED_ENV = "PMU_PURIFY_SEED"
PURIFIERS = ("none", "feature-squeeze", "lowpass", "svd", "event-participation", "diffusion")
SUMMARY_FORMAT = "pmu-purify-summary/1"


@dataclass
class DataSection:
    W: int = 60
    K: int = 8
    samples_per_class: int = 200
    sample_rate_hz: float = 30.0
    voltage_amplitude: list = field(default_factory=lambda: [0.01, 0.04])
    frequency_amplitude: list = field(default_factory=lambda: [0.02, 0.06])
    oscillation_amplitude: list = field(default_factory=lambda: [0.1, 0.25])
    oscillation_hz: list = field(default_factory=lambda: [0.2, 2.0])
    noise_std: float = 0.001
    baseline_jitter: float = 0.02
    frequency_offset_hz: float = 0.05
    split_fractions: list = field(default_factory=lambda: [0.6, 0.2, 0.2])


@dataclass
class ClassifierSection:
    conv_channels: list = field(default_factory=lambda: [32, 64])
    kernel_width: int = 5
    epochs: int = 80
    batch_size: int = 32
    learning_rate: float = 1e-3


@dataclass
class DiffusionSection:
    T: int = 20
    beta_start: float = 1e-4
    beta_end: float = 0.02
    t_star: int = 4
    steps: int = 3
    emb_dim: int = 32
    hidden_channels: int = 64
    kernel_width: int = 5
    epochs: int = 300
    batch_size: int = 8
    learning_rate: float = 1e-3
    cosine_decay: bool = True


@dataclass
class AttacksSection:
    names: list = field(default_factory=lambda: list(ATTACKS))
    xi: float = 0.05
    alpha: float = 0.005
    iterations: int = 100
    pgd_init_std: float = 0.5
    deepfool_max_iter: int = 50
    deepfool_overshoot: float = 0.02
    cw_iterations: int = 50
    cw_lr: float = 0.01
    cw_c: list = field(default_factory=lambda: [1.0, 10.0, 100.0])
    cw_kappa: float = 0.0
    chunk_size: int = 64


@dataclass
class PurifiersSection:
    names: list = field(default_factory=lambda: list(PURIFIERS))
    squeeze_bits: int = 8
    squeeze_window: int = 3
    lowpass_order: int = 10
    lowpass_cutoff_hz: float = 10.0
    svd_rank: int = 5


@dataclass
class EvalSection:
    pmu_counts: list = field(default_factory=lambda: [8, 16, 32, 64])
    bench_window: int = 60
    bench_warmup: int = 10
    bench_reps: int = 30
    latency: bool = True


@dataclass
class SeedsSection:
    """``global`` seeds every stage unless a stage seed is set explicitly."""

    global_seed: int = 0
    data: int | None = None
    split: int | None = None
    classifier: int | None = None
    diffusion: int | None = None
    attack: int | None = None
    purify: int | None = None

    def resolve(self, stage: str) -> int:
        value = getattr(self, stage)
        return self.global_seed if value is None else value


@dataclass
class PathsSection:
    dataset: str = "data"
    classifier: str = "classifier"
    estimator: str = "estimator"
    attacked: str = "attacked"
    report: str = "report"


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    attacks: AttacksSection = field(default_factory=AttacksSection)
    purifiers: PurifiersSection = field(default_factory=PurifiersSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seeds: SeedsSection = field(default_factory=SeedsSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def __post_init__(self):
        self.validate()

    # -- component configs -------------------------------------------------

    def gen_config(self) -> GenConfig:
        d = self.data
        return GenConfig(
            W=d.W, K=d.K, samples_per_class=d.samples_per_class, sample_rate_hz=d.sample_rate_hz,
            voltage_amplitude=tuple(d.voltage_amplitude),
            frequency_amplitude=tuple(d.frequency_amplitude),
            oscillation_amplitude=tuple(d.oscillation_amplitude),
            oscillation_hz=tuple(d.oscillation_hz), noise_std=d.noise_std,
            baseline_jitter=d.baseline_jitter, frequency_offset_hz=d.frequency_offset_hz,
            seed=self.seeds.resolve("data"),
        )

    def classifier_config(self) -> ClassifierConfig:
        c = self.classifier
        return ClassifierConfig(tuple(c.conv_channels), c.kernel_width, c.epochs, c.batch_size,
                                c.learning_rate, self.seeds.resolve("classifier"))

    def schedule(self):
        d = self.diffusion
        return linear_schedule(d.T, d.beta_start, d.beta_end)

    def estimator_config(self) -> EstimatorConfig:
        d = self.diffusion
        return EstimatorConfig(emb_dim=d.emb_dim, hidden_channels=d.hidden_channels,
                               kernel_width=d.kernel_width, epochs=d.epochs,
                               batch_size=d.batch_size, learning_rate=d.learning_rate,
                               cosine_decay=d.cosine_decay, seed=self.seeds.resolve("diffusion"))

    def purify_config(self) -> PurifyConfig:
        return PurifyConfig(self.diffusion.t_star, self.diffusion.steps, self.seeds.resolve("purify"))

    def attack_config(self, kind: str) -> AttackConfig:
        a = self.attacks
        return AttackConfig(kind=kind, xi=a.xi, alpha=a.alpha, iterations=a.iterations,
                            pgd_init_std=a.pgd_init_std, deepfool_max_iter=a.deepfool_max_iter,
                            deepfool_overshoot=a.deepfool_overshoot,
                            cw_iterations=a.cw_iterations, cw_lr=a.cw_lr,
                            cw_c=tuple(a.cw_c), cw_kappa=a.cw_kappa,
                            seed=self.seeds.resolve("attack"))

    # -- validation / serialization ---------------------------------------

    def validate(self) -> None:
        """Build every component config once so bad values fail before any work."""
        try:
            self.gen_config()
            self.classifier_config()
            sched = self.schedule()
            self.estimator_config()
            self.purify_config()
            if self.diffusion.t_star > sched.T:
                raise ConfigurationError(
                    f"diffusion.t_star={self.diffusion.t_star} exceeds T={sched.T}")
            for name in self.attacks.names:
                if name not in ATTACKS:
                    raise ConfigurationError(f"attacks.names: unknown attack {name!r}")
                self.attack_config(name)
            for name in self.purifiers.names:
                if name not in PURIFIERS:
                    raise ConfigurationError(f"purifiers.names: unknown purifier {name!r}")
            if not 1 <= self.purifiers.svd_rank <= min(self.data.W, self.data.K):
                raise ConfigurationError(
                    f"purifiers.svd_rank must be in [1, min(W, K)], got {self.purifiers.svd_rank}")
            fr = self.data.split_fractions
            if len(fr) != 3 or abs(sum(fr) - 1.0) > 1e-9 or min(fr) < 0:
                raise ConfigurationError(f"data.split_fractions must be 3 values summing to 1, got {fr}")
            if not self.eval.pmu_counts or min(self.eval.pmu_counts) < 1:
                raise ConfigurationError("eval.pmu_counts must be a non-empty list of positive ints")
            if self.eval.bench_reps < 30 or self.eval.bench_warmup < 10:
                raise ConfigurationError("eval.bench_reps must be >= 30 and bench_warmup >= 10")
            if self.attacks.chunk_size < 1:
                raise ConfigurationError("attacks.chunk_size must be >= 1")
        except ConfigurationError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(str(exc)) from exc

    def to_dict(self) -> dict:
        return asdict(self)

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")


_SCALARS = {int: (int,), float: (int, float), bool: (bool,), str: (str,), list: (list,)}


def _check_value(name: str, hint, value):
    if hint == "int | None" or hint == (int | None):
        if value is None:
            return None
        hint = int
    if hint is float and isinstance(value, bool) or hint is int and isinstance(value, bool):
        raise ConfigurationError(f"{name}: expected {hint.__name__}, got bool")
    allowed = _SCALARS.get(hint)
    if allowed is None or not isinstance(value, allowed):
        expected = getattr(hint, "__name__", str(hint))
        raise ConfigurationError(f"{name}: expected {expected}, got {type(value).__name__}")
    return float(value) if hint is float else value


def _build(cls, d, prefix: str):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{prefix or 'config'}: expected an object, got {type(d).__name__}")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        where = f" in section {prefix!r}" if prefix else ""
        raise ConfigurationError(f"unknown config key(s){where}: {', '.join(unknown)}")
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        hint = hints[f.name]
        name = f"{prefix}.{f.name}" if prefix else f.name
        if is_dataclass(hint):
            kwargs[f.name] = _build(hint, d[f.name], name)
        else:
            kwargs[f.name] = _check_value(name, hint, d[f.name])
    return cls(**kwargs)


def load_config(path=None, seed: int | None = None) -> RunConfig:
    """Read a config (or an emitted ``summary.json``); ``None`` gives defaults.

    The global seed is overridden by ``seed`` if given, else by the
    ``PMU_PURIFY_SEED`` environment variable if set.
    """
    doc: dict = {}
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except FileNotFoundError:
            raise
        except (OSError, ValueError) as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
        if isinstance(doc, dict) and doc.get("format") == SUMMARY_FORMAT:
            doc = doc["config"]
    cfg = RunConfig.from_dict(doc)
    override = seed
    if override is None and os.environ.get(SEED_ENV, "") != "":
        try:
            override = int(os.environ[SEED_ENV])
        except ValueError as exc:
            raise ConfigurationError(f"{SEED_ENV} must be an integer") from exc
    if override is not None:
        cfg.seeds.global_seed = int(override)
        cfg.validate()
    return cfg
