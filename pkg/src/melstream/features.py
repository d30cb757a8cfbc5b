"""Context stacking of log-Mel spectrograms and the three normalization modes."""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

from .dsp import AudioBuffer, peak_normalize


class NormMode(str, Enum):
    OFFLINE_GAIN = "offline-gain"
    ONLINE_RECURSIVE = "online-recursive"
    ASR = "asr-utterance-frequency"


@dataclass(frozen=True)
class ContextConfig:
    past_frames: int = 15
    future_frames: int = 0
    lower_freqs: int = 5
    upper_freqs: int = 5

    def __post_init__(self):
        for name in ("past_frames", "future_frames", "lower_freqs", "upper_freqs"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")

    @property
    def n_time(self) -> int:
        return self.past_frames + self.future_frames + 1

    @property
    def n_freq(self) -> int:
        return self.lower_freqs + self.upper_freqs + 1


@dataclass(frozen=True)
class FramedInput:
    along_freq: np.ndarray  # T x F x n_time
    along_time: np.ndarray  # T x F x n_freq

    @property
    def num_frames(self) -> int:
        return self.along_freq.shape[-3]

    @property
    def n_mels(self) -> int:
        return self.along_freq.shape[-2]


def frame_context(logmel, cfg: ContextConfig) -> FramedInput:
    """Stack neighbouring frames (per band) and neighbouring bands (per frame).

    ``along_freq[t, f, j] = Y[t - past + j, f]`` and
    ``along_time[t, f, j] = Y[t, f - lower + j]``, zero outside the
    spectrogram. Accepts a ``LogMelSpectrogram`` or a ``(..., T, F)`` array.
    """
    y = np.asarray(getattr(logmel, "values", logmel))
    if y.ndim < 2 or y.shape[-2] < 1:
        raise ValueError(f"expected (..., T, F) with T >= 1, got {y.shape}")
    lead = [(0, 0)] * (y.ndim - 2)

    padded = np.pad(y, lead + [(cfg.past_frames, cfg.future_frames), (0, 0)])
    along_freq = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_time, axis=-2)

    padded = np.pad(y, lead + [(0, 0), (cfg.lower_freqs, cfg.upper_freqs)])
    along_time = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_freq, axis=-1)

    return FramedInput(np.ascontiguousarray(along_freq), np.ascontiguousarray(along_time))


def smoothing_weight(length: float) -> float:
    """alpha = (L - 1) / (L + 1) for an L-frame effective window."""
    if length <= 1:
        raise ValueError("smoothing length must exceed 1 frame")
    return (length - 1.0) / (length + 1.0)


@dataclass(frozen=True)
class NormState:
    alpha: float
    global_mean: float
    mu: float = 0.0
    initialized: bool = False

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")

    @classmethod
    def from_length(cls, length: float = 200, global_mean: float = 0.0) -> "NormState":
        return cls(alpha=smoothing_weight(length), global_mean=float(global_mean))


def _exact_mean(x) -> float:
    # shifting by the first element makes the mean of a constant array exact
    x = np.ravel(x)
    return float(x[0] + np.mean(x - x[0]))


def online_normalize_step(frame: np.ndarray, state: NormState) -> tuple[np.ndarray, NormState]:
    frame = np.asarray(frame)
    if not np.all(np.isfinite(frame)):
        raise ValueError("non-finite values in log-Mel frame")
    m = _exact_mean(frame)
    if state.initialized:
        # same as alpha*mu + (1-alpha)*m, but leaves mu untouched when m == mu
        mu = state.mu + (1.0 - state.alpha) * (m - state.mu)
    else:
        mu = m  # mu(0) := m(1)
    return frame - mu + state.global_mean, replace(state, mu=mu, initialized=True)


def online_normalize(logmel, state: NormState) -> tuple[np.ndarray, np.ndarray, NormState]:
    """Run :func:`online_normalize_step` over every frame.

    Returns the normalized T x F matrix, the per-frame means mu(t) and the
    final state.
    """
    y = np.asarray(getattr(logmel, "values", logmel))
    out = np.empty_like(y)
    mus = np.empty(y.shape[0])
    for t in range(y.shape[0]):
        out[t], state = online_normalize_step(y[t], state)
        mus[t] = state.mu
    return out, mus, state


def normalize_offline_pair(
    noisy: AudioBuffer, clean: AudioBuffer, rng_seed: int | None = None, target_dbfs: float | None = None
) -> tuple[AudioBuffer, AudioBuffer]:
    if len(noisy) != len(clean):
        raise ValueError(f"length mismatch: noisy {len(noisy)} vs clean {len(clean)}")
    scaled, gain = peak_normalize(noisy, rng_seed, target_dbfs=target_dbfs)
    return scaled, AudioBuffer(clean.samples * gain, clean.sample_rate)


def asr_normalize(logmel) -> np.ndarray:
    """Per-utterance, per-frequency mean removal."""
    y = np.asarray(getattr(logmel, "values", logmel))
    if y.shape[0] < 1:
        raise ValueError("need at least one frame")
    return y - y.mean(axis=0, keepdims=True)


def compute_global_mean(corpus) -> float:
    arrays = [np.asarray(getattr(c, "values", c)).ravel() for c in corpus]
    if not arrays:
        raise ValueError("cannot compute a global mean over an empty corpus")
    return _exact_mean(np.concatenate(arrays))
