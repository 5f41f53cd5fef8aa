"""Per-pair PHAT correlation, z-scored peak extraction, and audio framing.

Lag convention: a correlation value at positive lag tau is large when the
second frame is a copy of the first delayed by tau samples. With that
convention the correlation for microphone pair (i, j) peaks at the pairwise
delay ``(dist_i - dist_j) / c`` expressed in samples.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

# Frequency bins whose cross-power magnitude falls below this floor are zeroed
# instead of phase-normalized, so silent bands cannot blow up the spectrum.
PHAT_MAG_FLOOR = 1e-12


def mic_pairs(n_mics: int) -> list[tuple[int, int]]:
    """Canonical microphone pair order: (i, j) with i < j, lexicographic."""
    return [(i, j) for i in range(n_mics) for j in range(i + 1, n_mics)]


@dataclass(frozen=True)
class FrameConfig:
    """Framing parameters plus the bounded lag range searched per pair."""

    sample_rate_hz: float = 16000.0
    frame_len_ms: float = 500.0
    overlap_ms: float = 25.0
    max_delay_samples: int = 400

    def __post_init__(self):
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")
        if self.frame_len_ms <= 0:
            raise ValueError("frame_len_ms must be positive")
        if not 0 <= self.overlap_ms < self.frame_len_ms:
            raise ValueError("overlap_ms must satisfy 0 <= overlap_ms < frame_len_ms")
        if self.max_delay_samples < 1:
            raise ValueError("max_delay_samples must be >= 1")
        if self.frame_len_samples < 2 * self.max_delay_samples:
            raise ValueError("frame length in samples must be >= 2 * max_delay_samples")

    @property
    def frame_len_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.frame_len_ms / 1000.0))

    @property
    def overlap_samples(self) -> int:
        return int(round(self.sample_rate_hz * self.overlap_ms / 1000.0))

    @property
    def hop_samples(self) -> int:
        return self.frame_len_samples - self.overlap_samples

    @property
    def n_lags(self) -> int:
        return 2 * self.max_delay_samples + 1

    @property
    def lags(self) -> np.ndarray:
        m = self.max_delay_samples
        return np.arange(-m, m + 1)


@dataclass(frozen=True)
class ZScoreConfig:
    """Peak extraction: keep local maxima at least C standard deviations up."""

    threshold_c: float = 2.0
    peak_cap: int = 5

    def __post_init__(self):
        if self.threshold_c < 0:
            raise ValueError("threshold_c must be >= 0")
        if self.peak_cap < 1:
            raise ValueError("peak_cap must be >= 1")


@dataclass
class PhatCorrelation:
    """Correlation series for one pair over lags -max_delay..+max_delay."""

    pair: tuple[int, int]
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        i, j = self.pair
        if not i < j:
            raise ValueError(f"pair must satisfy i < j, got {self.pair}")
        if self.values.ndim != 1 or self.values.size < 3 or self.values.size % 2 == 0:
            raise ValueError("values must be a 1-d array of odd length >= 3")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("correlation values must be finite")

    @property
    def max_delay(self) -> int:
        return (self.values.size - 1) // 2

    @property
    def lags(self) -> np.ndarray:
        m = self.max_delay
        return np.arange(-m, m + 1)

    @property
    def silent(self) -> bool:
        """True when the frame pair carried no usable cross-power."""
        return not np.any(self.values)


@dataclass
class PeakSet:
    """Sparse z-scored peaks of one correlation series, sorted by lag."""

    pair: tuple[int, int]
    lags: np.ndarray
    scores: np.ndarray

    def __post_init__(self):
        self.lags = np.asarray(self.lags, dtype=int)
        self.scores = np.asarray(self.scores, dtype=float)
        if self.lags.shape != self.scores.shape or self.lags.ndim != 1:
            raise ValueError("lags and scores must be matching 1-d arrays")
        if self.lags.size and np.any(np.diff(self.lags) <= 0):
            raise ValueError("lags must be strictly increasing")
        if np.any(self.scores <= 0):
            raise ValueError("all peak scores must be positive")

    @property
    def count(self) -> int:
        return self.lags.size

    @classmethod
    def empty(cls, pair: tuple[int, int]) -> "PeakSet":
        return cls(pair=pair, lags=np.empty(0, dtype=int), scores=np.empty(0))


def phat_correlate(frame_a, frame_b, cfg: FrameConfig,
                   pair: tuple[int, int] = (0, 1)) -> PhatCorrelation:
    """PHAT cross-correlation of two equal-length frames over the lag range.

    The cross-power spectrum is normalized to unit magnitude per bin (bins
    under PHAT_MAG_FLOOR are zeroed), inverse-transformed, and restricted to
    lags within +-max_delay_samples. All-zero input yields an all-zero
    correlation flagged silent rather than an error.
    """
    a = np.asarray(frame_a, dtype=float)
    b = np.asarray(frame_b, dtype=float)
    if a.ndim != 1 or b.ndim != 1 or a.size != b.size:
        raise ValueError("frames must be 1-d arrays of equal length")
    if a.size < 2 * cfg.max_delay_samples:
        raise ValueError("frames shorter than 2 * max_delay_samples")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("frames must contain finite samples")

    n = a.size + b.size
    cross = np.fft.rfft(b, n) * np.conj(np.fft.rfft(a, n))
    mag = np.abs(cross)
    keep = mag >= PHAT_MAG_FLOOR
    phase = np.zeros_like(cross)
    phase[keep] = cross[keep] / mag[keep]
    cc = np.fft.irfft(phase, n)

    m = cfg.max_delay_samples
    values = np.concatenate([cc[-m:], cc[: m + 1]])
    return PhatCorrelation(pair=pair, values=values)


def zscore_peaks(corr: PhatCorrelation, cfg: ZScoreConfig) -> PeakSet:
    """Extract strict local maxima of the z-scored correlation above C.

    z(tau) = max((R(tau) - mu) / sigma - C, 0) with mu, sigma taken over the
    full lag range; keeps the peak_cap largest by score. A constant series
    (sigma = 0) carries no localization evidence and yields an empty set.
    """
    v = corr.values
    mu = v.mean()
    sigma = v.std()
    if sigma == 0.0:
        return PeakSet.empty(corr.pair)
    z = np.maximum((v - mu) / sigma - cfg.threshold_c, 0.0)

    # Strict local maxima; boundary lags only compete with their one neighbor.
    left = np.empty_like(z)
    right = np.empty_like(z)
    left[0] = -np.inf
    left[1:] = z[:-1]
    right[-1] = -np.inf
    right[:-1] = z[1:]
    is_peak = (z > 0) & (z > left) & (z > right)

    idx = np.nonzero(is_peak)[0]
    if idx.size == 0:
        return PeakSet.empty(corr.pair)
    lags = corr.lags[idx]
    scores = z[idx]
    if idx.size > cfg.peak_cap:
        # Largest scores win; ties resolved toward smaller lag for determinism.
        order = np.lexsort((lags, -scores))[: cfg.peak_cap]
        lags, scores = lags[order], scores[order]
        by_lag = np.argsort(lags)
        lags, scores = lags[by_lag], scores[by_lag]
    return PeakSet(pair=corr.pair, lags=lags, scores=scores)


def tdoa_argmax(corr: PhatCorrelation) -> int:
    """Lag maximizing the correlation; ties go to smallest |tau|, then negative."""
    if corr.silent:
        raise ValueError("correlation is all zero: no delay estimate available")
    v = corr.values
    candidates = corr.lags[v == v.max()]
    order = np.lexsort((candidates, np.abs(candidates)))
    return int(candidates[order[0]])


def frame_stream(audio, cfg: FrameConfig) -> Iterator[np.ndarray]:
    """Slice (n_samples, n_channels) audio into frames of frame_len.

    Hop is frame_len - overlap; a final partial frame is dropped. Mono input
    may be 1-d and is promoted to a single channel.
    """
    audio = np.asarray(audio, dtype=float)
    if audio.ndim == 1:
        audio = audio[:, None]
    if audio.ndim != 2:
        raise ValueError("audio must have shape (n_samples, n_channels)")
    flen = cfg.frame_len_samples
    hop = cfg.hop_samples
    start = 0
    while start + flen <= audio.shape[0]:
        yield audio[start:start + flen, :]
        start += hop


def frame_correlations(frame: np.ndarray, cfg: FrameConfig) -> list[PhatCorrelation]:
    """One PHAT correlation per canonical channel pair of a (len, ch) frame.

    For pair (i, j) the channel-j frame is correlated against channel i so the
    peak lands at the arrival-time difference t_i - t_j in samples.
    """
    frame = np.asarray(frame, dtype=float)
    if frame.ndim != 2 or frame.shape[1] < 2:
        raise ValueError("frame must have shape (frame_len, n_channels >= 2)")
    return [phat_correlate(frame[:, j], frame[:, i], cfg, pair=(i, j))
            for i, j in mic_pairs(frame.shape[1])]


def load_wav(path) -> tuple[float, np.ndarray]:
    """Read a multi-channel WAV as (sample_rate, float array (n, channels)).

    Integer PCM is rescaled to [-1, 1); float data passes through. Channel
    index is the microphone index.
    """
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    data = np.asarray(data)
    if data.ndim == 1:
        data = data[:, None]
    if np.issubdtype(data.dtype, np.integer):
        scale = float(np.iinfo(data.dtype).max) + 1.0
        data = data.astype(float) / scale
    else:
        data = data.astype(float)
    return float(rate), data
