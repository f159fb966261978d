"""Synthetic PMU event windows, splits, normalization and persistence.

Each window is a ``[W, K, 4]`` array (time x PMU x channel) with channels in
the fixed order P, Q, |V|, F. Four classes are generated from physically
motivated templates: Normal, Voltage, Frequency and Oscillation.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, LoadError

CHANNELS = ("P", "Q", "V", "F")
CLASSES = ("Normal", "Voltage", "Frequency", "Oscillation")
N_CLASSES = len(CLASSES)
DATASET_FORMAT = "pmu-purify-dataset/1"


@dataclass(frozen=True)
class GenConfig:
    """Generator parameters. Power and voltage are per-unit; frequency in Hz."""

    W: int = 60
    K: int = 8
    samples_per_class: int = 200
    sample_rate_hz: float = 30.0
    voltage_amplitude: tuple[float, float] = (0.01, 0.04)
    frequency_amplitude: tuple[float, float] = (0.02, 0.06)
    oscillation_amplitude: tuple[float, float] = (0.1, 0.25)
    oscillation_hz: tuple[float, float] = (0.2, 2.0)
    noise_std: float = 0.001
    baseline_jitter: float = 0.02  # per-window relative spread of the P/Q/V operating point
    frequency_offset_hz: float = 0.05  # half-width of the per-window nominal frequency jitter
    seed: int = 0

    def __post_init__(self):
        if self.W < 8:
            raise ConfigurationError(f"window length W must be >= 8, got {self.W}")
        if self.K < 1:
            raise ConfigurationError(f"PMU count K must be >= 1, got {self.K}")
        if self.samples_per_class < 1:
            raise ConfigurationError("samples_per_class must be >= 1")
        if self.sample_rate_hz <= 0:
            raise ConfigurationError("sample_rate_hz must be positive")
        if min(self.noise_std, self.frequency_offset_hz, self.baseline_jitter) < 0:
            raise ConfigurationError("noise_std, baseline_jitter and frequency_offset_hz must be >= 0")
        for name in ("voltage_amplitude", "frequency_amplitude", "oscillation_amplitude",
                     "oscillation_hz"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ConfigurationError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.oscillation_hz[1] >= self.sample_rate_hz / 2:
            raise ConfigurationError("oscillation band must lie below Nyquist")

    @classmethod
    def full_scale(cls, **kw) -> "GenConfig":
        """Window shape of the 41-PMU, 12 s, 30 Hz field dataset."""
        return cls(**{"W": 360, "K": 41, **kw})


@dataclass
class NormStats:
    mean: np.ndarray  # [4]
    std: np.ndarray  # [4]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


@dataclass
class Dataset:
    """Labeled windows plus optional split indices and normalization stats.

    ``windows`` always holds raw (physical-unit) float32 values; use
    :meth:`X` for the normalized float64 view once stats are attached.
    """

    windows: np.ndarray  # [N, W, K, 4] float32
    labels: np.ndarray  # [N] uint8
    sample_rate_hz: float = 30.0
    seed: int = 0
    splits: dict[str, np.ndarray] | None = None
    stats: NormStats | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self) -> tuple:
        return tuple(self.windows.shape[1:])

    def indices(self, split: str | None) -> np.ndarray:
        if split is None:
            return np.arange(len(self))
        if self.splits is None:
            raise ConfigurationError("dataset has not been split")
        return self.splits[split]

    def X(self, split: str | None = None) -> np.ndarray:
        """Windows of ``split`` (normalized if stats are attached), float64."""
        w = self.windows[self.indices(split)].astype(np.float64)
        if self.stats is None:
            return w
        return (w - self.stats.mean) / self.stats.std

    def y(self, split: str | None = None) -> np.ndarray:
        return self.labels[self.indices(split)].astype(np.int64)


def one_hot(labels, n_classes: int = N_CLASSES) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((len(labels), n_classes))
    out[np.arange(len(labels)), labels] = 1.0
    return out


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _operating_points(cfg: GenConfig) -> np.ndarray:
    """Nominal (P, Q, |V|) per PMU, shared by every window of a dataset."""
    rng = np.random.default_rng([cfg.seed, 2**32 - 1])
    return np.stack(
        [rng.uniform(0.2, 2.0, cfg.K), rng.uniform(-0.3, 0.5, cfg.K), rng.uniform(0.94, 1.06, cfg.K)],
        axis=1,
    )


def _window(cfg: GenConfig, label: int, rng: np.random.Generator, nominal: np.ndarray) -> np.ndarray:
    W, K = cfg.W, cfg.K
    t = np.arange(W) / cfg.sample_rate_hz
    x = np.empty((W, K, 4))
    j = cfg.baseline_jitter
    p0 = nominal[:, 0] * (1.0 + rng.uniform(-j, j, K))
    q0 = nominal[:, 1] + 0.5 * rng.uniform(-j, j, K)
    v0 = nominal[:, 2] + 0.1 * rng.uniform(-j, j, K)
    f0 = 60.0 + rng.uniform(-cfg.frequency_offset_hz, cfg.frequency_offset_hz)
    # slow ambient load swing (part of the background, scales with noise_std)
    swing_amp = 4.0 * cfg.noise_std * rng.uniform(-1.0, 1.0, K)
    swing = swing_amp * np.sin(2 * np.pi * 0.05 * t[:, None] + rng.uniform(0, 2 * np.pi, K))
    x[..., 0] = p0 + swing
    x[..., 1] = q0 + 0.3 * swing
    x[..., 2] = v0
    x[..., 3] = f0

    u = rng.uniform(0.0, 1.0, K)
    weights = u / u.max() if u.max() > 0 else np.ones(K)
    onset = int(rng.integers(int(0.2 * W), int(0.5 * W) + 1))
    after = np.arange(W) >= onset
    dt = np.where(after, t - t[onset], 0.0)

    if label == 1:
        amp = rng.uniform(*cfg.voltage_amplitude) * rng.choice([-1.0, 1.0])
        tau = rng.uniform(0.3, 1.5)
        floor = rng.uniform(0.0, 0.4)
        shape = after * (floor + (1 - floor) * np.exp(-dt / tau))
        dv = amp * shape[:, None] * weights[None, :]
        x[..., 2] += dv
        x[..., 1] -= rng.uniform(1.0, 3.0) * dv
    elif label == 2:
        depth = rng.uniform(*cfg.frequency_amplitude) * rng.choice([-1.0, 1.0])
        ramp = rng.uniform(0.2, 0.6)
        tau = rng.uniform(0.5, 2.0)
        shape = np.where(dt < ramp, dt / ramp, np.exp(-(dt - ramp) / tau)) * after
        df = depth * shape
        # frequency is system-wide; participation only modulates slightly
        x[..., 3] += df[:, None] * (0.9 + 0.1 * weights[None, :])
        x[..., 0] -= rng.uniform(2.0, 6.0) * df[:, None] * weights[None, :]
    elif label == 3:
        amp = rng.uniform(*cfg.oscillation_amplitude)
        freq = rng.uniform(*cfg.oscillation_hz)
        phase = rng.uniform(0, 2 * np.pi, K)
        arg = 2 * np.pi * freq * dt[:, None] + phase[None, :]
        env = after[:, None] * weights[None, :]
        x[..., 0] += amp * env * np.sin(arg)
        x[..., 1] += 0.5 * amp * env * np.cos(arg)

    if cfg.noise_std > 0:
        x += cfg.noise_std * rng.standard_normal(x.shape)
    return x


def generate_dataset(cfg: GenConfig) -> Dataset:
    """Class-balanced synthetic dataset, a deterministic function of ``cfg``.

    Sample ``i`` has label ``i % 4`` and its own RNG stream seeded by
    ``(cfg.seed, i)``, so any subset can be regenerated independently.
    """
    n = cfg.samples_per_class * N_CLASSES
    windows = np.empty((n, cfg.W, cfg.K, 4), dtype=np.float32)
    labels = (np.arange(n) % N_CLASSES).astype(np.uint8)
    nominal = _operating_points(cfg)
    for i in range(n):
        rng = np.random.default_rng([cfg.seed, i])
        windows[i] = _window(cfg, int(labels[i]), rng, nominal)
    return Dataset(windows, labels, cfg.sample_rate_hz, cfg.seed, meta={"gen_config": _cfg_dict(cfg)})


def _cfg_dict(cfg: GenConfig) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


# ---------------------------------------------------------------------------
# splitting and normalization
# ---------------------------------------------------------------------------


def split(ds: Dataset, fractions=(0.6, 0.2, 0.2), seed: int = 0) -> Dataset:
    """Stratified train/val/test split, deterministic given ``seed``.

    Per class, ``round(f * n_class)`` samples go to train and val and the
    remainder to test.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1) > 1e-9:
        raise ConfigurationError(f"split fractions must be 3 nonnegative values summing to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts = {"train": [], "val": [], "test": []}
    for c in np.unique(ds.labels):
        idx = np.flatnonzero(ds.labels == c)
        idx = idx[rng.permutation(len(idx))]
        n_tr = int(round(fractions[0] * len(idx)))
        n_va = int(round(fractions[1] * len(idx)))
        n_va = min(n_va, len(idx) - n_tr)
        parts["train"].append(idx[:n_tr])
        parts["val"].append(idx[n_tr : n_tr + n_va])
        parts["test"].append(idx[n_tr + n_va :])
    splits = {k: np.sort(np.concatenate(v)).astype(np.int64) for k, v in parts.items()}
    empty = [k for k, v in splits.items() if len(v) == 0]
    if empty:
        raise ConfigurationError(f"split fractions {fractions} leave empty split(s): {empty}")
    return replace(ds, splits=splits)


def compute_stats(windows: np.ndarray) -> NormStats:
    w = np.asarray(windows, dtype=np.float64)
    mean = w.mean(axis=(0, 1, 2))
    std = w.std(axis=(0, 1, 2))
    bad = [CHANNELS[c] for c in range(4) if not std[c] > 0]
    if bad:
        raise ConfigurationError(f"zero-variance channel(s) {bad}; cannot normalize")
    return NormStats(mean, std)


def normalize(ds: Dataset) -> Dataset:
    """Attach per-channel z-score stats computed on the training split only."""
    if ds.splits is None:
        raise ConfigurationError("split the dataset before normalizing")
    stats = compute_stats(ds.windows[ds.splits["train"]])
    return replace(ds, stats=stats)


def denormalize(window, stats: NormStats) -> np.ndarray:
    return np.asarray(window, dtype=np.float64) * stats.std + stats.mean


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def save_dataset(ds: Dataset, path, extra: dict | None = None) -> None:
    """Write ``manifest.json`` + ``windows.f32`` + ``labels.u8`` into ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "format": DATASET_FORMAT,
        "n_samples": len(ds),
        "window_shape": list(ds.shape),
        "channels": list(CHANNELS),
        "classes": list(CLASSES),
        "class_counts": np.bincount(ds.labels, minlength=N_CLASSES).tolist(),
        "sample_rate_hz": ds.sample_rate_hz,
        "generator_seed": ds.seed,
        "normalization": ds.stats.to_dict() if ds.stats is not None else None,
        "splits": {k: v.tolist() for k, v in ds.splits.items()} if ds.splits else None,
        "meta": ds.meta,
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (path / "windows.f32").write_bytes(np.ascontiguousarray(ds.windows, dtype="<f4").tobytes())
    (path / "labels.u8").write_bytes(np.ascontiguousarray(ds.labels, dtype=np.uint8).tobytes())


def _read_blob(fpath: Path, dtype, count: int) -> np.ndarray:
    blob = fpath.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    need = count * itemsize
    if len(blob) < need:
        raise LoadError(f"{fpath}: truncated at byte offset {len(blob)}, expected {need} bytes")
    if len(blob) > need:
        raise LoadError(f"{fpath}: {len(blob) - need} unexpected trailing bytes after offset {need}")
    return np.frombuffer(blob, dtype=dtype).copy()


def load_dataset(path) -> Dataset:
    path = Path(path)
    mpath = path / "manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise LoadError(f"{mpath}: malformed manifest ({exc})") from exc
    try:
        if manifest["format"] != DATASET_FORMAT:
            raise LoadError(f"{mpath}: unsupported format {manifest['format']!r}")
        n = int(manifest["n_samples"])
        shape = tuple(int(d) for d in manifest["window_shape"])
        if len(shape) != 3 or shape[2] != 4:
            raise LoadError(f"{mpath}: window_shape {shape} is not [W, K, 4]")
        windows = _read_blob(path / "windows.f32", "<f4", n * int(np.prod(shape))).reshape((n,) + shape)
        labels = _read_blob(path / "labels.u8", np.uint8, n)
        if labels.size and labels.max() >= N_CLASSES:
            raise LoadError(f"{path / 'labels.u8'}: label value {labels.max()} out of range")
        splits = manifest.get("splits")
        stats = manifest.get("normalization")
        return Dataset(
            windows=windows.astype(np.float32),
            labels=labels,
            sample_rate_hz=float(manifest["sample_rate_hz"]),
            seed=int(manifest["generator_seed"]),
            splits={k: np.asarray(v, dtype=np.int64) for k, v in splits.items()} if splits else None,
            stats=NormStats.from_dict(stats) if stats else None,
            meta=manifest.get("meta", {}),
        )
    except KeyError as exc:
        raise LoadError(f"{mpath}: missing field {exc}") from exc
