"""Minimal differentiable network engine.

Networks are ordered stacks drawn from a fixed layer vocabulary:

    dense, conv1d-time, relu, global-average-pool-time,
    time-embedding-add, reshape

Every layer maps a batch ``[N, ...]`` to a batch, keeps what it needs for the
backward pass in a cache, and returns exact gradients for its parameters and
its input. Inputs to attacks and to the noise estimator are differentiated
through the same code path as training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import count
from pathlib import Path
from typing import Callable

import numpy as np

from .exceptions import ConfigurationError, LoadError, UsageError

LAYER_KINDS = (
    "dense",
    "conv1d-time",
    "relu",
    "global-average-pool-time",
    "time-embedding-add",
    "reshape",
)

_net_ids = count()


def sinusoidal_embedding(t, dim: int) -> np.ndarray:
    """Standard transformer-style timestep embedding, shape ``[N, dim]``."""
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=1)
    return emb


# ---------------------------------------------------------------------------
# layer kernels
# ---------------------------------------------------------------------------


def _check_spec(spec: dict) -> None:
    kind = spec.get("kind")
    if kind not in LAYER_KINDS:
        raise ConfigurationError(f"unknown layer kind {kind!r}")
    if kind == "conv1d-time":
        w = spec["width"]
        if w < 1 or w % 2 == 0:
            raise ConfigurationError(f"conv1d-time width must be odd and >= 1, got {w}")
        if spec["in_channels"] < 1 or spec["out_channels"] < 1:
            raise ConfigurationError("conv1d-time channel counts must be >= 1")
    elif kind == "dense":
        if spec["in_features"] < 1 or spec["out_features"] < 1:
            raise ConfigurationError("dense feature counts must be >= 1")
    elif kind == "time-embedding-add":
        if spec["emb_dim"] < 1 or spec["channels"] < 1:
            raise ConfigurationError("time-embedding-add sizes must be >= 1")


def _output_shape(spec: dict, in_shape: tuple) -> tuple:
    """Per-sample output shape; raises on composition errors."""
    kind = spec["kind"]
    if kind == "dense":
        if in_shape != (spec["in_features"],):
            raise ConfigurationError(f"dense expects ({spec['in_features']},), got {in_shape}")
        return (spec["out_features"],)
    if kind == "conv1d-time":
        if len(in_shape) != 2 or in_shape[1] != spec["in_channels"]:
            raise ConfigurationError(
                f"conv1d-time expects (W, {spec['in_channels']}), got {in_shape}"
            )
        return (in_shape[0], spec["out_channels"])
    if kind == "relu":
        return in_shape
    if kind == "global-average-pool-time":
        if len(in_shape) != 2:
            raise ConfigurationError(f"global-average-pool-time expects (W, C), got {in_shape}")
        return (in_shape[1],)
    if kind == "time-embedding-add":
        if len(in_shape) != 2 or in_shape[1] != spec["channels"]:
            raise ConfigurationError(
                f"time-embedding-add expects (W, {spec['channels']}), got {in_shape}"
            )
        return in_shape
    if kind == "reshape":
        target = tuple(spec["shape"])
        if int(np.prod(target)) != int(np.prod(in_shape)):
            raise ConfigurationError(f"cannot reshape {in_shape} to {target}")
        return target
    raise ConfigurationError(f"unknown layer kind {kind!r}")


def _init_params(spec: dict, rng: np.random.Generator) -> dict[str, np.ndarray]:
    kind = spec["kind"]
    if kind == "dense":
        fan_in = spec["in_features"]
        bound = np.sqrt(6.0 / fan_in)
        return {
            "W": rng.uniform(-bound, bound, (fan_in, spec["out_features"])),
            "b": np.zeros(spec["out_features"]),
        }
    if kind == "conv1d-time":
        k, cin, cout = spec["width"], spec["in_channels"], spec["out_channels"]
        bound = np.sqrt(6.0 / (k * cin))
        return {"W": rng.uniform(-bound, bound, (k, cin, cout)), "b": np.zeros(cout)}
    if kind == "time-embedding-add":
        d, c = spec["emb_dim"], spec["channels"]
        bound = np.sqrt(6.0 / d)
        return {"W": rng.uniform(-bound, bound, (d, c)), "b": np.zeros(c)}
    return {}


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    # [N, W, C] -> [N, W, k, C], zero "same" padding along time
    n, w, c = x.shape
    p = k // 2
    xp = np.zeros((n, w + 2 * p, c), dtype=x.dtype)
    xp[:, p : p + w] = x
    return np.stack([xp[:, j : j + w] for j in range(k)], axis=2)


def _layer_forward(spec, params, x, temb):
    kind = spec["kind"]
    if kind == "dense":
        return x @ params["W"] + params["b"], x
    if kind == "conv1d-time":
        k = spec["width"]
        cols = _im2col(x, k)
        n, w = x.shape[:2]
        flat = cols.reshape(n * w, -1)
        wmat = params["W"].reshape(-1, spec["out_channels"])
        y = (flat @ wmat).reshape(n, w, -1) + params["b"]
        return y, flat
    if kind == "relu":
        return np.maximum(x, 0.0), x > 0
    if kind == "global-average-pool-time":
        return x.mean(axis=1), x.shape[1]
    if kind == "time-embedding-add":
        if temb is None:
            raise ConfigurationError("time-embedding-add layer needs timesteps t")
        e = temb[:, : spec["emb_dim"]]
        shift = e @ params["W"] + params["b"]
        return x + shift[:, None, :], e
    if kind == "reshape":
        return x.reshape((x.shape[0],) + tuple(spec["shape"])), x.shape
    raise ConfigurationError(f"unknown layer kind {kind!r}")


def _layer_backward(spec, params, cache, dy):
    kind = spec["kind"]
    if kind == "dense":
        x = cache
        return {"W": x.T @ dy, "b": dy.sum(axis=0)}, dy @ params["W"].T
    if kind == "conv1d-time":
        flat = cache
        k, cin, cout = spec["width"], spec["in_channels"], spec["out_channels"]
        n, w = dy.shape[:2]
        dflat = dy.reshape(n * w, cout)
        grads = {
            "W": (flat.T @ dflat).reshape(k, cin, cout),
            "b": dflat.sum(axis=0),
        }
        dcols = (dflat @ params["W"].reshape(-1, cout).T).reshape(n, w, k, cin)
        p = k // 2
        dxp = np.zeros((n, w + 2 * p, cin), dtype=dy.dtype)
        for j in range(k):
            dxp[:, j : j + w] += dcols[:, :, j]
        return grads, dxp[:, p : p + w]
    if kind == "relu":
        return {}, dy * cache
    if kind == "global-average-pool-time":
        w = cache
        return {}, np.repeat(dy[:, None, :] / w, w, axis=1)
    if kind == "time-embedding-add":
        e = cache
        ds = dy.sum(axis=1)
        return {"W": e.T @ ds, "b": ds.sum(axis=0)}, dy
    if kind == "reshape":
        return {}, dy.reshape(cache)
    raise ConfigurationError(f"unknown layer kind {kind!r}")


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


@dataclass
class Cache:
    """Activation record produced by :func:`forward`."""

    net_id: int
    version: int
    layer_caches: list
    input_shape: tuple


class Network:
    """A layered differentiable model.

    Parameters
    ----------
    layers : list of dict
        Layer specs, each with a ``kind`` key plus kind-specific sizes.
    input_shape : tuple of int
        Per-sample input shape (batch axis excluded).
    seed : int
        Seed for Kaiming-uniform parameter initialization.
    """

    def __init__(self, layers: list[dict], input_shape, seed: int = 0):
        self.layers = [dict(s) for s in layers]
        self.input_shape = tuple(int(d) for d in input_shape)
        self.seed = int(seed)
        shape = self.input_shape
        for spec in self.layers:
            _check_spec(spec)
            shape = _output_shape(spec, shape)
        self.output_shape = shape
        rng = np.random.default_rng(self.seed)
        self.params = [_init_params(spec, rng) for spec in self.layers]
        self.emb_dim = max(
            (s["emb_dim"] for s in self.layers if s["kind"] == "time-embedding-add"),
            default=0,
        )
        self._id = next(_net_ids)
        self.version = 0

    def __repr__(self):
        kinds = ", ".join(s["kind"] for s in self.layers)
        return f"Network(input_shape={self.input_shape}, layers=[{kinds}])"

    @property
    def n_params(self) -> int:
        return sum(p.size for layer in self.params for p in layer.values())

    def bump(self) -> None:
        """Mark parameters as modified; invalidates outstanding caches."""
        self.version += 1

    def copy(self) -> "Network":
        other = Network(self.layers, self.input_shape, self.seed)
        other.params = [{k: v.copy() for k, v in layer.items()} for layer in self.params]
        return other

    def split(self, at: int) -> tuple["Network", "Network"]:
        """Two networks whose composition equals this one (params copied)."""
        shape = self.input_shape
        for spec in self.layers[:at]:
            shape = _output_shape(spec, shape)
        head = Network(self.layers[:at], self.input_shape, self.seed)
        tail = Network(self.layers[at:], shape, self.seed)
        head.params = [{k: v.copy() for k, v in p.items()} for p in self.params[:at]]
        tail.params = [{k: v.copy() for k, v in p.items()} for p in self.params[at:]]
        return head, tail

    def round_to_float32(self) -> "Network":
        """Round parameters to float32-representable values in place."""
        for layer in self.params:
            for k in layer:
                layer[k] = layer[k].astype(np.float32).astype(np.float64)
        self.bump()
        return self

    def forward(self, x, t=None):
        return forward(self, x, t)

    def backward(self, cache, output_grad):
        return backward(self, cache, output_grad)

    def __call__(self, x, t=None) -> np.ndarray:
        return forward(self, x, t)[0]


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{what} contains NaN or Inf")


def forward(net: Network, x, t=None) -> tuple[np.ndarray, Cache]:
    """Run ``net`` on a batch ``x`` of shape ``[N, *input_shape]``.

    ``t`` holds one integer timestep per sample and is required only by
    networks containing a time-embedding-add layer.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != net.input_shape:
        raise ConfigurationError(
            f"input shape {x.shape[1:]} does not match network input {net.input_shape}"
        )
    _check_finite(x, "network input")
    temb = None
    if net.emb_dim:
        if t is None:
            raise ConfigurationError("network has a time embedding; pass timesteps t")
        t = np.broadcast_to(np.asarray(t), (x.shape[0],))
        temb = sinusoidal_embedding(t, net.emb_dim)
    caches = []
    h = x
    for spec, params in zip(net.layers, net.params):
        h, c = _layer_forward(spec, params, h, temb)
        caches.append(c)
    _check_finite(h, "network output")
    return h, Cache(net._id, net.version, caches, x.shape)


def backward(net: Network, cache: Cache, output_grad) -> tuple[list[dict], np.ndarray]:
    """Gradients of ``sum(output * output_grad)`` w.r.t. params and input."""
    if not isinstance(cache, Cache) or cache.net_id != net._id:
        raise UsageError("cache was produced by a different network")
    if cache.version != net.version:
        raise UsageError("stale cache: parameters changed since the forward pass")
    dy = np.asarray(output_grad, dtype=np.float64)
    grads: list[dict] = [None] * len(net.layers)
    for i in range(len(net.layers) - 1, -1, -1):
        grads[i], dy = _layer_backward(net.layers[i], net.params[i], cache.layer_caches[i], dy)
    _check_finite(dy, "input gradient")
    return grads, dy


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels) -> tuple[float, np.ndarray]:
    """Summed cross-entropy over the batch and its gradient w.r.t. logits.

    ``labels`` may be one-hot rows or integer class indices.
    """
    z = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.asarray(labels)
    if y.ndim == 1 and y.shape[0] == z.shape[0] and np.issubdtype(y.dtype, np.integer):
        onehot = np.zeros_like(z)
        onehot[np.arange(len(y)), y] = 1.0
    else:
        onehot = np.atleast_2d(y).astype(np.float64)
    if onehot.shape != z.shape:
        raise ConfigurationError(f"label shape {onehot.shape} != logits shape {z.shape}")
    shifted = z - z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.sum(logsumexp - (onehot * shifted).sum(axis=1)))
    grad = softmax(z) - onehot
    return loss, grad.reshape(np.shape(logits)) if np.ndim(logits) == 1 else grad


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    algorithm: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if self.algorithm not in ("sgd", "adam"):
            raise ConfigurationError(f"unknown optimizer {self.algorithm!r}")


def optimizer_step(state: OptimizerState, params: list[dict], grads: list[dict]):
    """Update ``params`` in place; returns ``(params, state)``."""
    state.step += 1
    lr = state.learning_rate
    if state.algorithm == "sgd":
        for p, g in zip(params, grads):
            for k in p:
                p[k] -= lr * g[k]
        return params, state
    if not state.m:
        state.m = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
        state.v = [{k: np.zeros_like(v) for k, v in p.items()} for p in params]
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        for k in p:
            if m[k].shape != g[k].shape:
                raise ConfigurationError(f"moment shape mismatch for {k}")
            m[k] = b1 * m[k] + (1 - b1) * g[k]
            v[k] = b2 * v[k] + (1 - b2) * g[k] ** 2
            p[k] -= lr * (m[k] / c1) / (np.sqrt(v[k] / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def _relu_pattern(net: Network, x, t) -> list:
    _, cache = forward(net, x, t)
    return [c for s, c in zip(net.layers, cache.layer_caches) if s["kind"] == "relu"]


def _same_pattern(a, b) -> bool:
    return all(np.array_equal(p, q) for p, q in zip(a, b))


def grad_check(
    net: Network,
    seed: int = 0,
    *,
    x=None,
    t=None,
    h: float = 1e-5,
    max_entries: int | None = None,
    corrupt: Callable[[list, np.ndarray], None] | None = None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    The scalar probed is ``sum(forward(x) * R)`` with a seeded random ``R``.
    Relative error is ``|analytic - numeric| / max(1e-8, |numeric|)``.
    Entries whose finite-difference stencil changes any ReLU activation
    pattern are skipped: the function is not differentiable across the kink.
    ``max_entries`` caps the number of probed entries per tensor (random
    subset). ``corrupt`` may mutate the analytic gradients in place before the
    comparison; it exists to self-test the checker.
    """
    rng = np.random.default_rng(seed)
    if x is None:
        x = rng.standard_normal((2,) + net.input_shape)
    x = np.asarray(x, dtype=np.float64)
    if net.emb_dim and t is None:
        t = rng.integers(1, 21, size=x.shape[0])
    out, cache = forward(net, x, t)
    r = rng.standard_normal(out.shape)
    grads, dx = backward(net, cache, r)
    if corrupt is not None:
        corrupt(grads, dx)
    base = _relu_pattern(net, x, t)

    def loss() -> float:
        return float(np.sum(forward(net, x, t)[0] * r))

    def probe(arr: np.ndarray, analytic: np.ndarray) -> float:
        worst = 0.0
        idx = np.arange(arr.size)
        if max_entries is not None and arr.size > max_entries:
            idx = rng.choice(arr.size, max_entries, replace=False)
        flat = arr.reshape(-1)
        aflat = analytic.reshape(-1)
        for i in idx:
            old = flat[i]
            flat[i] = old + h
            net.bump()
            lp = loss()
            pat_p = _relu_pattern(net, x, t)
            flat[i] = old - h
            net.bump()
            lm = loss()
            pat_m = _relu_pattern(net, x, t)
            flat[i] = old
            net.bump()
            if not (_same_pattern(base, pat_p) and _same_pattern(base, pat_m)):
                continue
            num = (lp - lm) / (2 * h)
            err = abs(aflat[i] - num) / max(1e-8, abs(num))
            worst = max(worst, err)
        return worst

    worst = 0.0
    for layer, g in zip(net.params, grads):
        for k in layer:
            worst = max(worst, probe(layer[k], g[k]))
    worst = max(worst, probe(x, dx))
    return worst


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_FORMAT = "pmu-purify-network/1"


def save_checkpoint(net: Network, path, extra: dict | None = None) -> None:
    """Write ``manifest.json`` and ``params.f32`` (little-endian float32)."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    shapes = []
    blobs = []
    for i, layer in enumerate(net.params):
        for k in sorted(layer):
            shapes.append({"layer": i, "name": k, "shape": list(layer[k].shape)})
            blobs.append(np.ascontiguousarray(layer[k], dtype="<f4").tobytes())
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "dtype": "float32",
        "seed": net.seed,
        "input_shape": list(net.input_shape),
        "layers": net.layers,
        "params": shapes,
        "extra": extra or {},
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    (path / "params.f32").write_bytes(b"".join(blobs))


def load_checkpoint(path) -> tuple[Network, dict]:
    """Inverse of :func:`save_checkpoint`; returns ``(net, extra)``."""
    path = Path(path)
    mpath, bpath = path / "manifest.json", path / "params.f32"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError:
        raise
    except (OSError, ValueError) as exc:
        raise LoadError(f"{mpath}: malformed manifest ({exc})") from exc
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise LoadError(f"{mpath}: unsupported format {manifest.get('format')!r}")
    try:
        net = Network(manifest["layers"], manifest["input_shape"], manifest["seed"])
    except (KeyError, TypeError) as exc:
        raise LoadError(f"{mpath}: missing field {exc}") from exc
    blob = bpath.read_bytes()
    offset = 0
    for entry in manifest["params"]:
        i, k, shape = entry["layer"], entry["name"], tuple(entry["shape"])
        if i >= len(net.params) or k not in net.params[i]:
            raise LoadError(f"{mpath}: unexpected parameter {k!r} for layer {i}")
        if net.params[i][k].shape != shape:
            raise LoadError(
                f"{mpath}: layer {i} {k} shape {shape} != expected {net.params[i][k].shape}"
            )
        nbytes = 4 * int(np.prod(shape))
        if offset + nbytes > len(blob):
            raise LoadError(
                f"{bpath}: truncated at byte offset {len(blob)} "
                f"(need {offset + nbytes} bytes for layer {i} {k})"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=offset)
        net.params[i][k] = arr.reshape(shape).astype(np.float64)
        offset += nbytes
    if offset != len(blob):
        raise LoadError(f"{bpath}: {len(blob) - offset} trailing bytes after offset {offset}")
    return net, manifest.get("extra", {})
