"""Comparison purifiers: feature squeezing, Butterworth low-pass, SVD
truncation and a simplified event-participation decomposition.

Every purifier maps a batch ``[N, W, K, 4]`` (or one ``[W, K, 4]`` window)
to an array of the same shape and acts on each channel independently.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter1d
from scipy.signal import sosfilt, sosfilt_zi
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import ConfigurationError
from .validation import check_windows


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ConfigurationError(f"expected [N, W, K, C] or [W, K, C], got shape {x.shape}")
    return x, False


def _unbatch(x, single):
    return x[0] if single else x


# ---------------------------------------------------------------------------
# feature squeezing
# ---------------------------------------------------------------------------


def feature_squeeze(x, lo, hi, bits: int = 8, window: int = 3) -> np.ndarray:
    """Bit-depth reduction followed by a centered moving average.

    Each channel is mapped to ``[0, 1]`` with the range ``[lo, hi]`` (values
    outside are clipped), quantized to ``2**bits`` levels, mapped back, and
    then averaged over ``window`` time steps with edge replication.
    """
    if not 1 <= int(bits) <= 16:
        raise ConfigurationError(f"bits must be in [1, 16], got {bits}")
    if window < 1 or window % 2 == 0:
        raise ConfigurationError(f"window must be odd and >= 1, got {window}")
    x, single = _as_batch(x)
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    span = np.where(hi > lo, hi - lo, 1.0)
    levels = 2 ** int(bits) - 1
    u = np.clip((x - lo) / span, 0.0, 1.0)
    q = np.round(u * levels) / levels * span + lo
    if window > 1:
        q = uniform_filter1d(q, size=window, axis=1, mode="nearest")
    return _unbatch(q, single)


# ---------------------------------------------------------------------------
# Butterworth low-pass
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SosFilter:
    """Cascade of second-order sections, rows ``(b0, b1, b2, 1, a1, a2)``."""

    sos: np.ndarray
    order: int
    cutoff_hz: float
    sample_rate_hz: float

    @property
    def n_sections(self) -> int:
        return len(self.sos)

    def poles(self) -> np.ndarray:
        out = []
        for b0, b1, b2, _, a1, a2 in self.sos:
            roots = np.roots([1.0, a1, a2]) if a2 != 0 else np.roots([1.0, a1])
            out.extend(roots)
        return np.asarray(out)

    def response(self, f_hz) -> np.ndarray:
        """Complex frequency response at ``f_hz``, each section evaluated as a
        ratio of polynomials in ``z^-1`` on the unit circle."""
        zinv = np.exp(-2j * np.pi * np.asarray(f_hz, dtype=np.float64) / self.sample_rate_hz)
        h = np.ones_like(zinv)
        for b0, b1, b2, a0, a1, a2 in self.sos:
            h = h * (b0 + b1 * zinv + b2 * zinv**2) / (a0 + a1 * zinv + a2 * zinv**2)
        return h

    def gain(self, f_hz) -> np.ndarray:
        return np.abs(self.response(f_hz))

    def to_dict(self) -> dict:
        return {
            "order": self.order,
            "cutoff_hz": self.cutoff_hz,
            "sample_rate_hz": self.sample_rate_hz,
            "sections": [
                {"b": [float(v) for v in row[:3]], "a": [float(v) for v in row[3:]]}
                for row in self.sos
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def butter_design(order: int = 10, cutoff_hz: float = 10.0, sample_rate_hz: float = 30.0) -> SosFilter:
    """Digital Butterworth low-pass as second-order sections.

    Analog prototype poles on the left unit half-circle are scaled to the
    prewarped cutoff ``2 fs tan(pi fc / fs)`` and mapped through the bilinear
    transform; every zero lands at ``z = -1``. Conjugate pole pairs (plus a
    first-order section for odd orders) are normalized to unity DC gain.
    """
    order = int(order)
    if order < 1:
        raise ConfigurationError(f"filter order must be >= 1, got {order}")
    if sample_rate_hz <= 0 or not 0 < cutoff_hz < sample_rate_hz / 2:
        raise ConfigurationError(
            f"cutoff must satisfy 0 < fc < fs/2, got fc={cutoff_hz}, fs={sample_rate_hz}"
        )
    fs2 = 2.0 * sample_rate_hz
    warped = fs2 * math.tan(math.pi * cutoff_hz / sample_rate_hz)
    k = np.arange(1, order + 1)
    analog = warped * np.exp(1j * np.pi * (2 * k + order - 1) / (2 * order))
    digital = (fs2 + analog) / (fs2 - analog)

    sections = []
    upper = sorted((p for p in digital if p.imag > 1e-12), key=abs)
    for p in upper:
        a1, a2 = -2.0 * p.real, abs(p) ** 2
        g = (1.0 + a1 + a2) / 4.0
        sections.append([g, 2 * g, g, 1.0, a1, a2])
    if order % 2:
        p = float(digital[np.argmin(np.abs(digital.imag))].real)
        g = (1.0 - p) / 2.0
        sections.insert(0, [g, g, 0.0, 1.0, -p, 0.0])
    filt = SosFilter(np.asarray(sections), order, float(cutoff_hz), float(sample_rate_hz))
    radius = np.max(np.abs(filt.poles()))
    if not radius < 1.0:
        raise ConfigurationError(f"designed filter is unstable (pole radius {radius})")
    return filt


def lowpass_filter(x, filt: SosFilter) -> np.ndarray:
    """Causal filtering along time, independently per PMU and channel.

    The state starts at the steady-state response to the first sample, so a
    constant input passes through unchanged.
    """
    x, single = _as_batch(x)
    if x.shape[1] < filt.order:
        raise ConfigurationError(f"window length {x.shape[1]} shorter than filter order {filt.order}")
    zi = sosfilt_zi(filt.sos)  # [sections, 2]
    zi = zi[:, None, :, None, None] * x[None, :, :1]  # [sections, N, 2, K, C]
    y, _ = sosfilt(filt.sos, x, axis=1, zi=zi)
    return _unbatch(y, single)


# ---------------------------------------------------------------------------
# SVD-based purifiers
# ---------------------------------------------------------------------------


@dataclass
class SvdFactors:
    """``M = U diag(s) V^T``; leading axes (if any) index a batch of matrices."""

    U: np.ndarray
    s: np.ndarray
    V: np.ndarray

    def reconstruct(self, rank: int | None = None) -> np.ndarray:
        r = self.s.shape[-1] if rank is None else rank
        return (self.U[..., :r] * self.s[..., None, :r]) @ np.swapaxes(self.V[..., :r], -1, -2)


def compact_svd(M) -> SvdFactors:
    """Thin SVD of a matrix (or stack of matrices) with descending ``s``."""
    M = np.asarray(M, dtype=np.float64)
    if M.ndim < 2:
        raise ConfigurationError(f"compact_svd needs a matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ConfigurationError("compact_svd input contains NaN or Inf")
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    return SvdFactors(U, s, np.swapaxes(Vt, -1, -2))


def _channel_matrices(x):
    # [N, W, K, C] -> [N, C, W, K]
    return np.moveaxis(x, 3, 1)


def svd_purify(x, rank: int = 5) -> np.ndarray:
    """Keep the top ``rank`` singular triples of each channel's ``W x K`` matrix."""
    x, single = _as_batch(x)
    W, K = x.shape[1], x.shape[2]
    if int(rank) != rank or not 1 <= rank <= min(W, K):
        raise ConfigurationError(f"rank must be an integer in [1, {min(W, K)}], got {rank}")
    out = compact_svd(_channel_matrices(x)).reconstruct(int(rank))
    return _unbatch(np.moveaxis(out, 1, 3), single)


def event_participation_purify(x) -> np.ndarray:
    """Simplified event-participation model: per-PMU steady state plus one event.

    For each channel matrix ``M`` (``W x K``), ``b`` is the per-PMU temporal
    mean and the centered matrix ``M - 1 b^T`` is replaced by its leading
    singular triple: the event signature ``u`` times the participation
    loadings ``p = s_1 v``.
    """
    x, single = _as_batch(x)
    if x.shape[1] < 2:
        raise ConfigurationError("event participation needs W >= 2")
    M = _channel_matrices(x)
    base = M.mean(axis=2, keepdims=True)
    f = compact_svd(M - base)
    out = base + f.reconstruct(1)
    return _unbatch(np.moveaxis(out, 1, 3), single)


# ---------------------------------------------------------------------------
# estimator wrappers
# ---------------------------------------------------------------------------


class IdentityPurifier(TransformerMixin, BaseEstimator):
    """No-op purifier (the unpurified reference row)."""

    def fit(self, X, y=None):
        self.fitted_ = True
        return self

    def transform(self, X):
        return check_windows(X).copy()


class FeatureSqueezer(TransformerMixin, BaseEstimator):
    """Bit-depth reduction plus moving-average smoothing.

    Parameters
    ----------
    bits : int, default=8
    window : int, default=3

    Attributes
    ----------
    data_min_, data_max_ : ndarray of shape (4,)
        Per-channel range of the training windows.
    """

    def __init__(self, bits=8, window=3):
        self.bits = bits
        self.window = window

    def fit(self, X, y=None):
        X = check_windows(X)
        self.data_min_ = X.min(axis=(0, 1, 2))
        self.data_max_ = X.max(axis=(0, 1, 2))
        return self

    def transform(self, X):
        check_is_fitted(self, "data_min_")
        return feature_squeeze(check_windows(X), self.data_min_, self.data_max_, self.bits, self.window)


class LowPassPurifier(TransformerMixin, BaseEstimator):
    """Causal Butterworth low-pass filter along time."""

    def __init__(self, order=10, cutoff_hz=10.0, sample_rate_hz=30.0):
        self.order = order
        self.cutoff_hz = cutoff_hz
        self.sample_rate_hz = sample_rate_hz

    def fit(self, X=None, y=None):
        self.filter_ = butter_design(self.order, self.cutoff_hz, self.sample_rate_hz)
        return self

    def transform(self, X):
        check_is_fitted(self, "filter_")
        return lowpass_filter(check_windows(X, min_length=1), self.filter_)


class SvdPurifier(TransformerMixin, BaseEstimator):
    """Per-channel truncated SVD reconstruction."""

    def __init__(self, rank=5):
        self.rank = rank

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def transform(self, X):
        return svd_purify(check_windows(X, min_length=1), self.rank)


class EventParticipationPurifier(TransformerMixin, BaseEstimator):
    """Mean-plus-rank-one event decomposition (simplified stand-in)."""

    def fit(self, X=None, y=None):
        self.fitted_ = True
        return self

    def transform(self, X):
        return event_participation_purify(check_windows(X, min_length=2))
