"""Diffusion-based purification of PMU windows.

A linear noise schedule defines the closed-form forward process
``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps``. A small convolutional
noise estimator is trained on clean windows to predict ``eps`` from
``(x_t, t)``. Purification diffuses an input forward to a truncation step
``t_star`` with seeded noise and walks back to ``t = 0`` along a coarse grid
with deterministic implicit (DDIM, zero-variance) steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .data import Dataset
from .exceptions import ConfigurationError, LoadError, TrainingError
from .validation import check_windows

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# schedule and forward process
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule; arrays are indexed by timestep, entry 0 is ``t = 0``.

    ``betas[0]`` and ``alphas[0]`` are placeholders (0 and 1) so that
    ``alpha_bars[t]`` is the product of ``alphas[1..t]`` with
    ``alpha_bars[0] = 1``.
    """

    T: int
    beta_start: float
    beta_end: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def to_dict(self) -> dict:
        return {"kind": "linear", "T": self.T, "beta_start": self.beta_start,
                "beta_end": self.beta_end}

    def matches(self, other: dict) -> bool:
        mine = self.to_dict()
        return (other.get("kind") == "linear" and int(other.get("T", -1)) == self.T
                and math.isclose(float(other.get("beta_start", -1)), self.beta_start, rel_tol=0, abs_tol=1e-15)
                and math.isclose(float(other.get("beta_end", -1)), self.beta_end, rel_tol=0, abs_tol=1e-15)
                and set(other) == set(mine))

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        if d.get("kind") != "linear":
            raise ConfigurationError(f"unsupported schedule kind {d.get('kind')!r}")
        return linear_schedule(int(d["T"]), float(d["beta_start"]), float(d["beta_end"]))


def linear_schedule(T: int = 20, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    """``beta_t`` rising linearly from ``beta_start`` (t=1) to ``beta_end`` (t=T)."""
    if int(T) != T or T < 2:
        raise ConfigurationError(f"T must be an integer >= 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigurationError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    T = int(T)
    steps = np.arange(T, dtype=np.float64)
    betas = np.concatenate([[0.0], beta_start + steps * (beta_end - beta_start) / (T - 1)])
    betas[-1] = beta_end  # exact endpoint regardless of rounding
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    for arr in (betas, alphas, alpha_bars):
        arr.setflags(write=False)
    return NoiseSchedule(T, float(beta_start), float(beta_end), betas, alphas, alpha_bars)


def _check_t(t, sched: NoiseSchedule, lo: int = 1) -> np.ndarray:
    t = np.asarray(t)
    if t.dtype.kind not in "iu" and not np.all(np.asarray(t) == np.round(t)):
        raise ConfigurationError(f"timesteps must be integers, got {t}")
    t = t.astype(np.int64)
    if np.any(t < lo) or np.any(t > sched.T):
        raise ConfigurationError(f"timestep out of range [{lo}, {sched.T}]: {t}")
    return t


def _bcast(coef, x):
    coef = np.asarray(coef, dtype=np.float64)
    return coef.reshape(coef.shape + (1,) * (x.ndim - coef.ndim))


def forward_diffuse(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`` (``t`` scalar or per sample)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != x0.shape:
        raise ConfigurationError(f"noise shape {eps.shape} != input shape {x0.shape}")
    t = _check_t(t, sched)
    ab = sched.alpha_bars[t]
    return _bcast(np.sqrt(ab), x0) * x0 + _bcast(np.sqrt(1.0 - ab), x0) * eps


def ddim_step(x_t, t_from: int, t_to: int, estimator, sched: NoiseSchedule) -> np.ndarray:
    """One deterministic implicit step from ``t_from`` down to ``t_to``.

    ``estimator(x, t)`` returns the predicted noise for a batch at integer
    timestep ``t``. The clean estimate
    ``x0_hat = (x_t - sqrt(1 - abar_from) eps_hat) / sqrt(abar_from)`` is
    re-noised to ``t_to`` with the same ``eps_hat``.
    """
    t_from, t_to = int(t_from), int(t_to)
    if not 0 <= t_to < t_from <= sched.T:
        raise ConfigurationError(f"need 0 <= t_to < t_from <= {sched.T}, got {t_from} -> {t_to}")
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(estimator(x_t, t_from), dtype=np.float64)
    ab_from, ab_to = sched.alpha_bars[t_from], sched.alpha_bars[t_to]
    x0_hat = (x_t - math.sqrt(1.0 - ab_from) * eps_hat) / math.sqrt(ab_from)
    return math.sqrt(ab_to) * x0_hat + math.sqrt(1.0 - ab_to) * eps_hat


def make_tau_grid(t_star: int, steps: int) -> list[int]:
    """Integer grid ``0 = tau_0 < ... < tau_S = t_star``.

    ``i * t_star / steps`` is rounded half-up; duplicates are dropped (with
    a warning, which shortens the effective step count).
    """
    t_star, steps = int(t_star), int(steps)
    if t_star < 1 or not 1 <= steps <= t_star:
        raise ConfigurationError(f"need 1 <= steps <= t_star, got steps={steps}, t_star={t_star}")
    ideal = [i * t_star / steps for i in range(steps + 1)]
    grid = []
    for v in ideal:
        r = int(math.floor(v + 0.5))
        if not grid or r > grid[-1]:
            grid.append(r)
    grid[0], grid[-1] = 0, t_star
    if len(grid) != steps + 1:
        log.warning("tau grid deduplicated: effective steps %d instead of %d", len(grid) - 1, steps)
    if len(grid) < 2:
        raise ConfigurationError("tau grid collapsed")
    return grid


def step_constants(sched: NoiseSchedule, t_from: int, t_to: int) -> tuple[float, float]:
    """Contraction constants ``(C_eps, C_t)`` of one implicit step.

    Writing the step as ``x_to = C_eps * x_from - ...`` after substituting the
    noise prediction, ``C_eps = 1/sqrt(abar_from) - sqrt(1-abar_to)/sqrt(1-abar_from)``
    and ``C_t = (1 - sqrt(1-abar_to)/sqrt(1-abar_from)) / C_eps``.
    Diagnostic only.
    """
    ab_from, ab_to = sched.alpha_bars[int(t_from)], sched.alpha_bars[int(t_to)]
    ratio = math.sqrt(1.0 - ab_to) / math.sqrt(1.0 - ab_from)
    c_eps = 1.0 / math.sqrt(ab_from) - ratio
    return c_eps, (1.0 - ratio) / c_eps


# ---------------------------------------------------------------------------
# noise estimator
# ---------------------------------------------------------------------------


@dataclass
class EstimatorConfig:
    emb_dim: int = 32
    hidden_channels: int = 64
    kernel_width: int = 5
    epochs: int = 300
    batch_size: int = 8
    learning_rate: float = 1e-3
    cosine_decay: bool = True  # anneal the step size to 0 over the run
    seed: int = 0

    def __post_init__(self):
        if min(self.emb_dim, self.hidden_channels, self.kernel_width, self.epochs,
               self.batch_size) < 1:
            raise ConfigurationError("estimator sizes and epochs must be >= 1")
        if self.kernel_width % 2 == 0:
            raise ConfigurationError("kernel_width must be odd")
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be positive")


def estimator_layers(window_shape, emb_dim=32, hidden_channels=64, kernel_width=5) -> list[dict]:
    """Conv stack over time with the timestep embedding added after the first block."""
    W, K, C = window_shape
    kc = K * C
    conv = lambda cin, cout: {"kind": "conv1d-time", "in_channels": cin, "out_channels": cout,
                              "width": kernel_width}
    return [
        {"kind": "reshape", "shape": [W, kc]},
        conv(kc, hidden_channels),
        {"kind": "relu"},
        {"kind": "time-embedding-add", "emb_dim": emb_dim, "channels": hidden_channels},
        conv(hidden_channels, hidden_channels),
        {"kind": "relu"},
        conv(hidden_channels, kc),
        {"kind": "reshape", "shape": [W, K, C]},
    ]


def build_estimator(window_shape, cfg: EstimatorConfig | None = None) -> nn.Network:
    """Fresh estimator; the output conv starts at zero so it predicts ``eps_hat = 0``."""
    cfg = cfg or EstimatorConfig()
    net = nn.Network(estimator_layers(window_shape, cfg.emb_dim, cfg.hidden_channels,
                                      cfg.kernel_width), window_shape, seed=cfg.seed)
    for p in net.params[6].values():
        p[...] = 0.0
    return net


def zero_predictor_loss() -> float:
    """Expected per-element MSE of predicting ``eps_hat = 0``: ``E[eps^2] = 1``."""
    return 1.0


def _draws(rng: np.random.Generator, n: int, shape: tuple, T: int):
    t = rng.integers(1, T + 1, size=n)
    eps = rng.standard_normal((n,) + shape)
    return t, eps


def predict_noise(net: nn.Network, x_t, t, sched: NoiseSchedule) -> np.ndarray:
    """``eps_hat(x_t, t)``: the network output divided by ``sqrt(1 - abar_t)``.

    The network itself estimates the noise component in data units, whose
    scale barely depends on ``t``; the fixed division supplies the
    timestep-dependent gain that an additive time embedding cannot.
    """
    t = np.broadcast_to(_check_t(t, sched), (len(x_t),))
    return net(x_t, t) / _bcast(np.sqrt(1.0 - sched.alpha_bars[t]), np.asarray(x_t))


def estimator_loss(net: nn.Network, x0, t, eps, sched: NoiseSchedule) -> float:
    """Mean squared noise-prediction error per element."""
    pred = predict_noise(net, forward_diffuse(x0, t, eps, sched), t, sched)
    return float(np.mean((pred - eps) ** 2))


def train_noise_estimator(X_train, sched: NoiseSchedule, cfg: EstimatorConfig | None = None,
                          X_val=None, n_val_draws: int = 2):
    """Fit ``eps_theta(x_t, t)`` on clean (unlabelled) normalized windows.

    Each minibatch draws ``t ~ U{1..T}`` and ``eps ~ N(0, I)`` per window and
    takes an Adam step on the per-element MSE. The validation loss uses
    fixed draws; the returned network is the epoch with the lowest one,
    rounded to float32. Returns ``(net, history)``.
    """
    cfg = cfg or EstimatorConfig()
    X = check_windows(X_train)
    X_val = X if X_val is None else check_windows(X_val)
    shape = X.shape[1:]
    net = build_estimator(shape, cfg)
    opt = nn.OptimizerState("adam", learning_rate=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, 2])
    vrng = np.random.default_rng([cfg.seed, 3])
    val_x = np.concatenate([X_val] * n_val_draws)
    val_t, val_eps = _draws(vrng, len(val_x), shape, sched.T)
    best_loss, best_params = estimator_loss(net, val_x, val_t, val_eps, sched), None
    history = []
    for epoch in range(1, cfg.epochs + 1):
        if cfg.cosine_decay:
            opt.learning_rate = 0.5 * cfg.learning_rate * (1 + math.cos(math.pi * (epoch - 1) / cfg.epochs))
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), cfg.batch_size):
            b = order[start : start + cfg.batch_size]
            t, eps = _draws(rng, len(b), shape, sched.T)
            xt = forward_diffuse(X[b], t, eps, sched)
            out, cache = nn.forward(net, xt, t)
            inv_sigma = _bcast(1.0 / np.sqrt(1.0 - sched.alpha_bars[t]), xt)
            diff = out * inv_sigma - eps
            loss = float(np.mean(diff**2))
            if not math.isfinite(loss):
                raise TrainingError(f"noise estimator loss became non-finite at epoch {epoch}")
            grads, _ = nn.backward(net, cache, 2.0 * diff * inv_sigma / diff.size)
            nn.optimizer_step(opt, net.params, grads)
            net.bump()
            total += loss * len(b)
        val_loss = estimator_loss(net, val_x, val_t, val_eps, sched)
        if not math.isfinite(val_loss):
            raise TrainingError(f"noise estimator validation loss non-finite at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": total / len(X), "val_loss": val_loss})
        if val_loss < best_loss:
            best_loss = val_loss
            best_params = [{k: v.copy() for k, v in p.items()} for p in net.params]
    if best_params is not None:
        net.params = best_params
        net.bump()
    return net.round_to_float32(), history


def save_estimator(net: nn.Network, sched: NoiseSchedule, path, extra: dict | None = None) -> None:
    """Network checkpoint with the schedule recorded in its manifest."""
    nn.save_checkpoint(net, path, extra={**(extra or {}), "role": "noise-estimator",
                                         "schedule": sched.to_dict()})


def load_estimator(path, sched: NoiseSchedule | None = None):
    """Load an estimator checkpoint; returns ``(net, schedule, extra)``.

    When ``sched`` is given, a checkpoint trained under a different schedule
    is rejected.
    """
    net, extra = nn.load_checkpoint(path)
    if extra.get("role") != "noise-estimator" or "schedule" not in extra:
        raise LoadError(f"{path}: not a noise-estimator checkpoint")
    stored = NoiseSchedule.from_dict(extra["schedule"])
    if sched is not None and not sched.matches(extra["schedule"]):
        raise LoadError(
            f"{path}: estimator was trained with schedule {extra['schedule']}, "
            f"not {sched.to_dict()}"
        )
    return net, stored, extra


# ---------------------------------------------------------------------------
# purification
# ---------------------------------------------------------------------------


@dataclass
class PurifyConfig:
    t_star: int = 4
    steps: int = 3
    seed: int = 0
    chunk_size: int = 64

    def __post_init__(self):
        make_tau_grid(self.t_star, self.steps)
        if self.chunk_size < 1:
            raise ConfigurationError("chunk_size must be >= 1")

    @property
    def tau(self) -> list[int]:
        return make_tau_grid(self.t_star, self.steps)


def net_estimator(net: nn.Network, sched: NoiseSchedule):
    """Adapt a trained network to the ``estimator(x, t)`` callable interface."""

    def estimate(x, t):
        return predict_noise(net, x, np.full(len(x), int(t)), sched)

    return estimate


def forward_noise(shape, sample_ids, seed: int) -> np.ndarray:
    """Per-sample standard normal noise from streams seeded by ``(seed, id)``."""
    eps = np.empty((len(sample_ids),) + tuple(shape))
    for row, sid in enumerate(sample_ids):
        eps[row] = np.random.default_rng([int(seed), int(sid)]).standard_normal(shape)
    return eps


def purify(x, estimator, sched: NoiseSchedule, pcfg: PurifyConfig | None = None,
           sample_ids=None, return_trajectory: bool = False, eps=None):
    """Diffuse to ``t_star`` then take implicit steps down the tau grid to 0.

    ``estimator`` is a network or an ``estimator(x, t)`` callable. The
    forward noise of sample ``i`` comes from the stream ``(seed, sample_ids[i])``
    (default ids ``0..N-1``) unless ``eps`` is given explicitly, so a clean
    window and its attacked version purified under the same id share noise.

    With ``return_trajectory`` the result is ``(x0, states)`` where
    ``states`` lists the input, ``x_{t_star}`` and every grid point down to 0.
    """
    pcfg = pcfg or PurifyConfig()
    if pcfg.t_star > sched.T:
        raise ConfigurationError(f"t_star={pcfg.t_star} exceeds schedule length T={sched.T}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    est = net_estimator(estimator, sched) if isinstance(estimator, nn.Network) else estimator
    ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids).reshape(-1)
    if len(ids) != len(x):
        raise ConfigurationError(f"{len(ids)} sample ids for {len(x)} windows")
    if eps is None:
        eps = forward_noise(x.shape[1:], ids, pcfg.seed)
    tau = pcfg.tau
    states = [x]
    h = forward_diffuse(x, tau[-1], eps, sched)
    states.append(h)
    for t_from, t_to in zip(tau[::-1][:-1], tau[::-1][1:]):
        h = ddim_step(h, t_from, t_to, est, sched)
        states.append(h)
    if single:
        h = h[0]
        states = [s[0] for s in states]
    return (h, states) if return_trajectory else h


def purify_batched(x, estimator, sched, pcfg: PurifyConfig | None = None, sample_ids=None,
                   map_fn=map) -> np.ndarray:
    """:func:`purify` over fixed-size chunks (independent of the mapper used)."""
    pcfg = pcfg or PurifyConfig()
    x = np.asarray(x, dtype=np.float64)
    ids = np.arange(len(x)) if sample_ids is None else np.asarray(sample_ids).reshape(-1)
    if len(x) == 0:
        return x.copy()
    starts = range(0, len(x), pcfg.chunk_size)

    def work(s):
        sl = slice(s, s + pcfg.chunk_size)
        return purify(x[sl], estimator, sched, pcfg, sample_ids=ids[sl])

    return np.concatenate(list(map_fn(work, starts)))


class DiffusionPurifier(TransformerMixin, BaseEstimator):
    """Truncated-diffusion purifier with a learned noise estimator.

    Parameters
    ----------
    T : int, default=20
        Length of the noise schedule.
    beta_start, beta_end : float, default=1e-4, 0.02
        Linear schedule endpoints.
    t_star : int, default=4
        Truncation step of the forward process.
    steps : int, default=3
        Number of implicit backward steps.
    emb_dim, hidden_channels, kernel_width, epochs, batch_size, learning_rate
        Estimator architecture and training, see :class:`EstimatorConfig`.
    random_state : int, default=0
        Seeds estimator training and the purification noise.

    Attributes
    ----------
    estimator_ : nn.Network
    schedule_ : NoiseSchedule
    history_ : list of dict
    """

    def __init__(self, T=20, beta_start=1e-4, beta_end=0.02, t_star=4, steps=3, emb_dim=32,
                 hidden_channels=64, kernel_width=5, epochs=300, batch_size=8,
                 learning_rate=1e-3, random_state=0):
        self.T = T
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.t_star = t_star
        self.steps = steps
        self.emb_dim = emb_dim
        self.hidden_channels = hidden_channels
        self.kernel_width = kernel_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def _estimator_config(self) -> EstimatorConfig:
        return EstimatorConfig(emb_dim=self.emb_dim, hidden_channels=self.hidden_channels,
                               kernel_width=self.kernel_width, epochs=self.epochs,
                               batch_size=self.batch_size, learning_rate=self.learning_rate,
                               seed=self.random_state)

    def _purify_config(self) -> PurifyConfig:
        return PurifyConfig(self.t_star, self.steps, self.random_state)

    def fit(self, X, y=None, X_val=None):
        """Train the noise estimator on clean windows ``X`` (``y`` is ignored)."""
        self.schedule_ = linear_schedule(self.T, self.beta_start, self.beta_end)
        self._purify_config()
        self.estimator_, self.history_ = train_noise_estimator(
            X, self.schedule_, self._estimator_config(), X_val)
        return self

    @classmethod
    def from_network(cls, net: nn.Network, sched: NoiseSchedule, **params):
        est = cls(T=sched.T, beta_start=sched.beta_start, beta_end=sched.beta_end, **params)
        est.schedule_ = sched
        est.estimator_ = net
        est.history_ = []
        return est

    def transform(self, X, sample_ids=None):
        check_is_fitted(self, "estimator_")
        X = check_windows(X)
        return purify_batched(X, self.estimator_, self.schedule_, self._purify_config(),
                              sample_ids=sample_ids)


def train_diffusion(ds: Dataset, sched: NoiseSchedule | None = None,
                    cfg: EstimatorConfig | None = None):
    """Train on the normalized train split, select on val; ``(net, history)``."""
    if ds.stats is None:
        raise ConfigurationError("train_diffusion expects a normalized dataset")
    sched = sched or linear_schedule()
    return train_noise_estimator(ds.X("train"), sched, cfg, ds.X("val"))


__all__ = [
    "NoiseSchedule", "linear_schedule", "forward_diffuse", "ddim_step", "make_tau_grid",
    "step_constants", "EstimatorConfig", "estimator_layers", "build_estimator",
    "zero_predictor_loss", "predict_noise", "estimator_loss", "train_noise_estimator", "save_estimator",
    "load_estimator", "PurifyConfig", "net_estimator", "forward_noise", "purify",
    "purify_batched", "DiffusionPurifier", "train_diffusion",
]
