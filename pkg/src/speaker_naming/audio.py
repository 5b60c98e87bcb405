"""MFCC front end and the 75-D per-utterance statistics vector.

Per frame: pre-emphasis, Hamming window, zero padding to ``fft_size``,
magnitude spectrum, triangular mel filterbank (HTK mel scale, 0 Hz to
Nyquist), natural log with a floor, orthonormal DCT-II. An utterance is
summarized as ``[mean(c), std(c), std(delta(delta(c)))]`` over its frames.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dct
from sklearn.base import BaseEstimator, TransformerMixin

from .exceptions import InputTooShortError, InsufficientFramesError

N_SUMMARY = 75


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        s = np.ascontiguousarray(self.samples, dtype=np.float64).reshape(-1)
        if s.size == 0:
            raise ValueError("waveform has no samples")
        if not np.all(np.isfinite(s)) or np.abs(s).max() > 1.0:
            raise ValueError("samples must be finite and within [-1, 1]")
        if int(self.sample_rate) <= 0 or int(self.sample_rate) != self.sample_rate:
            raise ValueError(f"bad sample rate {self.sample_rate}")
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class MfccConfig:
    window_ms: float = 20.0
    shift_ms: float = 10.0
    n_coeffs: int = 25
    n_mel_filters: int = 40
    fft_size: int = 512
    pre_emphasis: float = 0.97
    log_floor: float = 1e-10
    delta_window: int = 2

    def __post_init__(self):
        if self.n_coeffs > self.n_mel_filters:
            raise ValueError("n_coeffs cannot exceed n_mel_filters")
        if self.fft_size <= 0 or self.fft_size & (self.fft_size - 1):
            raise ValueError("fft_size must be a power of two")
        if self.delta_window < 1:
            raise ValueError("delta_window must be at least 1")
        if not self.log_floor > 0:
            raise ValueError("log_floor must be positive")

    def window_samples(self, rate: int) -> int:
        return int(round(self.window_ms * rate / 1000.0))

    def shift_samples(self, rate: int) -> int:
        return int(round(self.shift_ms * rate / 1000.0))

    def check(self, rate: int) -> None:
        win = self.window_samples(rate)
        if win < 1 or win > self.fft_size:
            raise ValueError(
                f"window of {win} samples does not fit fft_size {self.fft_size}")
        if self.shift_samples(rate) < 1:
            raise ValueError("frame shift rounds to zero samples")


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(n_filters: int, rate: int) -> np.ndarray:
    """``n_filters + 2`` frequencies equally spaced on the mel scale."""
    return mel_to_hz(np.linspace(0.0, hz_to_mel(rate / 2.0), n_filters + 2))


def mel_filter_response(freqs, n_filters: int, rate: int) -> np.ndarray:
    """Triangular filter weights evaluated at arbitrary frequencies.

    Returns ``(n_filters, len(freqs))``; filter ``i`` rises from edge ``i`` to a
    unit peak at edge ``i + 1`` and falls back to zero at edge ``i + 2``.
    """
    freqs = np.asarray(freqs, dtype=np.float64)
    edges = mel_band_edges(n_filters, rate)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs - lo) / (mid - lo)
    fall = (hi - freqs) / (hi - mid)
    return np.maximum(0.0, np.minimum(rise, fall))


def mel_filterbank(cfg: MfccConfig, rate: int) -> np.ndarray:
    """``(n_mel_filters, fft_size // 2 + 1)`` weights on the FFT bin grid."""
    bins = np.arange(cfg.fft_size // 2 + 1) * rate / cfg.fft_size
    return mel_filter_response(bins, cfg.n_mel_filters, rate)


def frame_signal(w: Waveform, cfg: MfccConfig) -> np.ndarray:
    """Slice ``w`` into overlapping frames, shape ``(n_frames, window)``."""
    cfg.check(w.sample_rate)
    win = cfg.window_samples(w.sample_rate)
    shift = cfg.shift_samples(w.sample_rate)
    if len(w) < win:
        raise InputTooShortError(
            f"waveform has {len(w)} samples, one window needs {win}")
    n_frames = (len(w) - win) // shift + 1
    idx = np.arange(win)[None, :] + shift * np.arange(n_frames)[:, None]
    return w.samples[idx]


def mfcc_frames(w: Waveform, cfg: MfccConfig | None = None) -> np.ndarray:
    """Cepstral coefficients per frame, shape ``(n_frames, n_coeffs)``."""
    cfg = cfg or MfccConfig()
    frames = frame_signal(w, cfg)
    emph = frames.copy()
    emph[:, 1:] -= cfg.pre_emphasis * frames[:, :-1]
    emph *= np.hamming(frames.shape[1])
    spectrum = np.abs(np.fft.rfft(emph, n=cfg.fft_size, axis=1))
    energies = spectrum @ mel_filterbank(cfg, w.sample_rate).T
    log_e = np.log(np.maximum(energies, cfg.log_floor))
    return dct(log_e, type=2, norm="ortho", axis=1)[:, :cfg.n_coeffs]


def delta_features(c: np.ndarray, n: int = 2) -> np.ndarray:
    """Regression deltas over ``+-n`` frames with edge frames replicated."""
    if n < 1:
        raise ValueError("delta half-width must be at least 1")
    c = np.asarray(c, dtype=np.float64)
    t = c.shape[0]
    padded = np.concatenate([np.repeat(c[:1], n, axis=0), c,
                             np.repeat(c[-1:], n, axis=0)])
    out = np.zeros_like(c)
    for k in range(1, n + 1):
        out += k * (padded[n + k:n + k + t] - padded[n - k:n - k + t])
    return out / (2.0 * sum(k * k for k in range(1, n + 1)))


def summarize_utterance(c: np.ndarray, cfg: MfccConfig | None = None) -> np.ndarray:
    """Mean and std of the coefficients plus std of their second deltas."""
    cfg = cfg or MfccConfig()
    c = np.asarray(c, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] < 2:
        raise InsufficientFramesError(
            f"need at least 2 frames, got {c.shape[0] if c.ndim else 0}")
    dd = delta_features(delta_features(c, cfg.delta_window), cfg.delta_window)
    return np.concatenate([c.mean(axis=0), c.std(axis=0), dd.std(axis=0)])


def utterance_features(w: Waveform, cfg: MfccConfig | None = None) -> np.ndarray:
    return summarize_utterance(mfcc_frames(w, cfg), cfg)


class MfccSummarizer(TransformerMixin, BaseEstimator):
    """Stateless transformer from a sequence of waveforms to ``(n, 75)``.

    Parameters mirror :class:`MfccConfig`.
    """

    def __init__(self, window_ms=20.0, shift_ms=10.0, n_coeffs=25,
                 n_mel_filters=40, fft_size=512, pre_emphasis=0.97,
                 log_floor=1e-10, delta_window=2):
        self.window_ms = window_ms
        self.shift_ms = shift_ms
        self.n_coeffs = n_coeffs
        self.n_mel_filters = n_mel_filters
        self.fft_size = fft_size
        self.pre_emphasis = pre_emphasis
        self.log_floor = log_floor
        self.delta_window = delta_window

    def config(self) -> MfccConfig:
        return MfccConfig(**self.get_params())

    def fit(self, X, y=None):
        self.config()
        return self

    def transform(self, X):
        cfg = self.config()
        return np.stack([utterance_features(w, cfg) for w in X])

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.requires_fit = False
        return tags
