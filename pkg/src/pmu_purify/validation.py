"""Input validation helpers shared by estimators and transformers."""

from __future__ import annotations

import numpy as np

from .data import N_CLASSES
from .exceptions import ConfigurationError


def check_windows(X, *, min_length: int = 8, allow_single: bool = False) -> np.ndarray:
    """Validate a batch of ``[W, K, 4]`` windows and return it as float64.

    With ``allow_single`` a lone ``[W, K, 4]`` window is promoted to a
    batch of one.
    """
    X = np.asarray(X, dtype=np.float64)
    if allow_single and X.ndim == 3:
        X = X[None]
    if X.ndim != 4 or X.shape[-1] != 4:
        raise ConfigurationError(f"expected windows of shape [N, W, K, 4], got {X.shape}")
    if X.shape[1] < min_length:
        raise ConfigurationError(f"window length {X.shape[1]} < {min_length}")
    if X.shape[2] < 1:
        raise ConfigurationError("windows need at least one PMU")
    if not np.all(np.isfinite(X)):
        raise ConfigurationError("windows contain NaN or Inf")
    return X


def check_labels(y, n: int | None = None) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim == 2:
        y = y.argmax(axis=1)
    y = y.astype(np.int64).reshape(-1)
    if n is not None and len(y) != n:
        raise ConfigurationError(f"{len(y)} labels for {n} windows")
    if y.size and (y.min() < 0 or y.max() >= N_CLASSES):
        raise ConfigurationError(f"labels must be in [0, {N_CLASSES})")
    return y
