"""Convolutional PMU event classifier, input gradients and macro-F1."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .data import N_CLASSES, Dataset
from .exceptions import ConfigurationError, TrainingError
from .validation import check_labels, check_windows

LOSS_MODES = ("cross-entropy", "logit-margin")


def classifier_layers(window_shape, conv_channels=(32, 64), kernel_width=5, n_classes=N_CLASSES):
    """Layer specs: conv stack over time, global average pool, dense head."""
    W, K, C = window_shape
    layers = [{"kind": "reshape", "shape": [W, K * C]}]
    cin = K * C
    for cout in conv_channels:
        layers.append({"kind": "conv1d-time", "in_channels": cin, "out_channels": cout,
                       "width": kernel_width})
        layers.append({"kind": "relu"})
        cin = cout
    layers.append({"kind": "global-average-pool-time"})
    layers.append({"kind": "dense", "in_features": cin, "out_features": n_classes})
    return layers


def macro_f1(predictions, labels, n_classes: int = N_CLASSES, return_flags: bool = False,
             classes=None):
    """Unweighted mean of per-class F1.

    Averages over ``range(n_classes)`` unless ``classes`` lists the classes
    to score. A class absent from both predictions and labels contributes
    F1 = 0; pass ``return_flags=True`` to get the list of such classes too.
    """
    pred = np.asarray(predictions, dtype=np.int64).reshape(-1)
    true = np.asarray(labels, dtype=np.int64).reshape(-1)
    if pred.size == 0:
        raise ConfigurationError("macro_f1 of an empty set is undefined")
    if pred.shape != true.shape:
        raise ConfigurationError(f"length mismatch: {pred.size} predictions, {true.size} labels")
    scores, absent = [], []
    for c in (range(n_classes) if classes is None else classes):
        tp = np.sum((pred == c) & (true == c))
        fp = np.sum((pred == c) & (true != c))
        fn = np.sum((pred != c) & (true == c))
        if tp + fp + fn == 0:
            absent.append(c)
            scores.append(0.0)
        else:
            scores.append(2 * tp / (2 * tp + fp + fn))
    f1 = float(np.mean(scores))
    return (f1, absent) if return_flags else f1


def predict(net: nn.Network, windows) -> np.ndarray:
    """Class probabilities, shape ``[N, 4]`` (or ``[4]`` for a single window)."""
    x = np.asarray(windows, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    probs = nn.softmax(nn.forward(net, x)[0])
    return probs[0] if single else probs


def logits(net: nn.Network, windows) -> np.ndarray:
    return nn.forward(net, np.asarray(windows, dtype=np.float64))[0]


def input_gradient(net: nn.Network, windows, labels, loss_mode: str = "cross-entropy"):
    """Gradient of the per-sample loss w.r.t. each input window.

    ``cross-entropy`` differentiates softmax cross-entropy against ``labels``;
    ``logit-margin`` differentiates ``z_true - max_{j != true} z_j``.
    Returns ``(grad, logits)``.
    """
    if loss_mode not in LOSS_MODES:
        raise ConfigurationError(f"loss_mode must be one of {LOSS_MODES}, got {loss_mode!r}")
    x = np.asarray(windows, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    z, cache = nn.forward(net, x)
    if loss_mode == "cross-entropy":
        _, dz = nn.softmax_cross_entropy(z, y)
    else:
        dz = margin_grad(z, y)
    _, dx = nn.backward(net, cache, dz)
    return dx, z


def margin_grad(z, y) -> np.ndarray:
    """d/dz of ``z_true - max_{j != true} z_j`` (first maximizer on ties)."""
    n = len(y)
    other = z.copy()
    other[np.arange(n), y] = -np.inf
    j = other.argmax(axis=1)
    dz = np.zeros_like(z)
    dz[np.arange(n), y] = 1.0
    dz[np.arange(n), j] -= 1.0
    return dz


def logit_jacobian(net: nn.Network, windows) -> tuple[np.ndarray, np.ndarray]:
    """Input gradient of every logit: ``[N, n_classes, *window_shape]``."""
    x = np.asarray(windows, dtype=np.float64)
    z, cache = nn.forward(net, x)
    jac = np.empty((x.shape[0], z.shape[1]) + x.shape[1:])
    for k in range(z.shape[1]):
        dz = np.zeros_like(z)
        dz[:, k] = 1.0
        jac[:, k] = nn.backward(net, cache, dz)[1]
    return jac, z


@dataclass
class ClassifierConfig:
    conv_channels: tuple = (32, 64)
    kernel_width: int = 5
    epochs: int = 80
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0


class PmuEventClassifier(ClassifierMixin, BaseEstimator):
    """Small 1-D convolutional classifier over ``[W, K, 4]`` windows.

    Parameters
    ----------
    conv_channels : tuple of int, default=(32, 64)
        Output channels of the successive conv1d-time layers.
    kernel_width : int, default=5
    epochs : int, default=80
    batch_size : int, default=32
    learning_rate : float, default=1e-3
        Adam step size.
    random_state : int, default=0
        Seeds both initialization and minibatch shuffling.

    Attributes
    ----------
    net_ : nn.Network
        Parameters of the epoch with the best validation macro-F1, rounded
        to float32 (the checkpoint precision).
    history_ : list of dict
        Per-epoch ``epoch``, ``train_loss``, ``val_f1``.
    classes_ : ndarray
    """

    def __init__(self, conv_channels=(32, 64), kernel_width=5, epochs=80, batch_size=32,
                 learning_rate=1e-3, random_state=0):
        self.conv_channels = conv_channels
        self.kernel_width = kernel_width
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y, X_val=None, y_val=None):
        """Train with Adam on cross-entropy.

        When a validation set is given, the returned parameters are those of
        the epoch with the best validation macro-F1; otherwise training-set
        macro-F1 is used for selection.
        """
        X = check_windows(X)
        y = check_labels(y, len(X))
        if X_val is None:
            X_val, y_val = X, y
        else:
            X_val = check_windows(X_val)
            y_val = check_labels(y_val, len(X_val))
        self.classes_ = np.arange(N_CLASSES)
        net = nn.Network(
            classifier_layers(X.shape[1:], tuple(self.conv_channels), self.kernel_width),
            X.shape[1:],
            seed=self.random_state,
        )
        opt = nn.OptimizerState("adam", learning_rate=self.learning_rate)
        rng = np.random.default_rng([self.random_state, 1])
        best_f1, best_params = -1.0, None
        self.history_ = []
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(len(X))
            total = 0.0
            for start in range(0, len(X), self.batch_size):
                b = order[start : start + self.batch_size]
                z, cache = nn.forward(net, X[b])
                loss, dz = nn.softmax_cross_entropy(z, y[b])
                if not math.isfinite(loss):
                    raise TrainingError(f"classifier loss became non-finite at epoch {epoch}")
                grads, _ = nn.backward(net, cache, dz / len(b))
                nn.optimizer_step(opt, net.params, grads)
                net.bump()
                total += loss
            val_f1 = macro_f1(predict(net, X_val).argmax(axis=1), y_val)
            self.history_.append({"epoch": epoch, "train_loss": total / len(X), "val_f1": val_f1})
            if val_f1 > best_f1:
                best_f1 = val_f1
                best_params = [{k: v.copy() for k, v in p.items()} for p in net.params]
        net.params = best_params
        net.bump()
        self.net_ = net.round_to_float32()
        return self

    @classmethod
    def from_network(cls, net: nn.Network) -> "PmuEventClassifier":
        """Wrap an already-trained network (e.g. a loaded checkpoint)."""
        est = cls()
        est.net_ = net
        est.classes_ = np.arange(net.output_shape[0])
        est.history_ = []
        return est

    def decision_function(self, X):
        check_is_fitted(self, "net_")
        return logits(self.net_, check_windows(X))

    def predict_proba(self, X):
        check_is_fitted(self, "net_")
        return predict(self.net_, check_windows(X))

    def predict(self, X):
        return self.predict_proba(X).argmax(axis=1)

    def score(self, X, y, sample_weight=None):
        """Macro-F1 (not accuracy)."""
        return macro_f1(self.predict(X), y)


def train_classifier(ds: Dataset, cfg: ClassifierConfig | None = None):
    """Fit on the train split, select on val macro-F1; returns ``(net, history)``."""
    cfg = cfg or ClassifierConfig()
    if ds.stats is None:
        raise ConfigurationError("train_classifier expects a normalized dataset")
    est = PmuEventClassifier(cfg.conv_channels, cfg.kernel_width, cfg.epochs, cfg.batch_size,
                             cfg.learning_rate, cfg.seed)
    est.fit(ds.X("train"), ds.y("train"), ds.X("val"), ds.y("val"))
    return est.net_, est.history_


def write_history(history: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if not history:
        path.write_text("")
        return
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(history[0]), lineterminator="\n")
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
