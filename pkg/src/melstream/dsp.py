"""Waveform-level signal processing: STFT/ISTFT, Mel filterbank, log
compression, peak normalization and Griffin-Lim resynthesis."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-5


@dataclass(frozen=True)
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError(f"AudioBuffer expects mono samples, got shape {x.shape}")
        if x.size == 0:
            raise ValueError("AudioBuffer is empty")
        if not np.all(np.isfinite(x)):
            raise ValueError("AudioBuffer contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        object.__setattr__(self, "samples", x)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def __len__(self):
        return self.samples.size


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 512
    hop: int = 256
    fft_size: int = 512
    window: str = "hann"

    def __post_init__(self):
        if not 0 < self.hop <= self.frame_len <= self.fft_size:
            raise ValueError(
                f"need 0 < hop <= frame_len <= fft_size, got {self.hop}/{self.frame_len}/{self.fft_size}"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    def analysis_window(self) -> np.ndarray:
        # periodic variant; COLA at 50 % and 75 % overlap for hann
        return signal.get_window(self.window, self.frame_len, fftbins=True)

    def is_cola(self) -> bool:
        return bool(signal.check_COLA(self.analysis_window(), self.frame_len, self.frame_len - self.hop))

    def num_frames(self, n_samples: int) -> int:
        if n_samples < self.frame_len:
            return 0
        return 1 + (n_samples - self.frame_len) // self.hop

    def num_samples(self, n_frames: int) -> int:
        return self.frame_len + (n_frames - 1) * self.hop


def se_stft(sample_rate: int = SAMPLE_RATE) -> StftConfig:
    """32 ms frames, 16 ms hop (speech-enhancement front-end)."""
    n = int(round(0.032 * sample_rate))
    return StftConfig(frame_len=n, hop=n // 2, fft_size=n)


def asr_stft(sample_rate: int = SAMPLE_RATE) -> StftConfig:
    """32 ms frames, 8 ms hop (ASR front-end)."""
    n = int(round(0.032 * sample_rate))
    return StftConfig(frame_len=n, hop=n // 4, fft_size=n)


@dataclass(frozen=True)
class ComplexSpectrogram:
    values: np.ndarray
    config: StftConfig

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[1] != self.config.n_bins:
            raise ValueError(f"spectrogram shape {v.shape} inconsistent with {self.config.n_bins} bins")
        if not np.all(np.isfinite(v)):
            raise ValueError("spectrogram contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray
    f_min: float
    f_max: float

    @property
    def n_mels(self) -> int:
        return self.weights.shape[0]

    @property
    def n_bins(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True)
class LogMelSpectrogram:
    values: np.ndarray
    floor: float = LOG_FLOOR

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2:
            raise ValueError(f"log-Mel spectrogram must be T x F, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("log-Mel spectrogram contains non-finite values")
        if not self.floor > 0:
            raise ValueError(f"floor must be positive, got {self.floor}")
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


def frame_signal(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    n_frames = cfg.num_frames(x.size)
    if n_frames == 0:
        raise ValueError(f"audio of {x.size} samples is shorter than one frame ({cfg.frame_len})")
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_len)[:: cfg.hop]
    return view[:n_frames]


def stft(audio: AudioBuffer, cfg: StftConfig) -> ComplexSpectrogram:
    frames = frame_signal(audio.samples, cfg) * cfg.analysis_window()
    return ComplexSpectrogram(np.fft.rfft(frames, n=cfg.fft_size, axis=-1), cfg)


def istft(spec: ComplexSpectrogram, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Weighted overlap-add inverse of :func:`stft`.

    The output has ``frame_len + (T - 1) * hop`` samples. Samples covered by
    frames whose squared-window sum vanishes (the very first sample of a
    periodic Hann) come out as zero.
    """
    cfg = spec.config
    if not cfg.is_cola():
        raise ValueError(f"window {cfg.window!r} is not COLA at frame_len={cfg.frame_len}, hop={cfg.hop}")
    win = cfg.analysis_window()
    frames = np.fft.irfft(spec.values, n=cfg.fft_size, axis=-1)[:, : cfg.frame_len] * win
    n_frames = frames.shape[0]
    length = cfg.num_samples(n_frames)
    out = np.zeros(length)
    norm = np.zeros(length)
    win_sq = win**2
    for t in range(n_frames):
        s = t * cfg.hop
        out[s : s + cfg.frame_len] += frames[t]
        norm[s : s + cfg.frame_len] += win_sq
    nz = norm > 1e-10
    out[nz] /= norm[nz]
    out[~nz] = 0.0
    return AudioBuffer(out, sample_rate)


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    n_mels: int = 80,
    cfg: StftConfig | None = None,
    sample_rate: int = SAMPLE_RATE,
    f_min: float = 0.0,
    f_max: float | None = None,
) -> MelFilterbank:
    """Triangular HTK-mel filterbank with unit peak at each center."""
    cfg = cfg or se_stft(sample_rate)
    f_max = sample_rate / 2 if f_max is None else f_max
    if not 0 <= f_min < f_max <= sample_rate / 2:
        raise ValueError(f"need 0 <= f_min < f_max <= {sample_rate / 2}, got {f_min}, {f_max}")
    if n_mels < 1:
        raise ValueError("n_mels must be positive")
    edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
    bins = np.arange(cfg.n_bins) * sample_rate / cfg.fft_size
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bins - lo) / (center - lo)
    falling = (hi - bins) / (hi - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(~np.any(weights > 0, axis=1))
    if empty.size:
        raise ValueError(
            f"{n_mels} mel bands too many for fft_size={cfg.fft_size}: band(s) {empty.tolist()} cover no bin"
        )
    return MelFilterbank(weights, float(f_min), float(f_max))


def mel_power(spec: ComplexSpectrogram, fb: MelFilterbank) -> np.ndarray:
    if fb.n_bins != spec.values.shape[1]:
        raise ValueError(f"filterbank has {fb.n_bins} bins, spectrogram has {spec.values.shape[1]}")
    power = spec.values.real**2 + spec.values.imag**2
    # einsum keeps each frame's result independent of how many frames are batched
    return np.einsum("tk,mk->tm", power, fb.weights)


def log_mel(spec: ComplexSpectrogram, fb: MelFilterbank, floor: float = LOG_FLOOR) -> LogMelSpectrogram:
    if floor <= 0:
        raise ValueError("floor must be positive")
    return LogMelSpectrogram(np.log(np.maximum(mel_power(spec, fb), floor)), floor)


def audio_to_logmel(audio: AudioBuffer, cfg: StftConfig, fb: MelFilterbank, floor: float = LOG_FLOOR):
    return log_mel(stft(audio, cfg), fb, floor)


def peak_dbfs(x: np.ndarray) -> float:
    return 20.0 * np.log10(np.max(np.abs(x)))


def peak_normalize(
    audio: AudioBuffer,
    rng_seed: int | None = None,
    target_dbfs: float | None = None,
    low_dbfs: float = -6.0,
    high_dbfs: float = -1.0,
) -> tuple[AudioBuffer, float]:
    """Scale ``audio`` so its peak sits at a random level in [low, high] dBFS.

    Returns the scaled buffer and the gain, which can be reused on a paired
    reference signal. ``target_dbfs`` overrides the random draw.
    """
    peak = np.max(np.abs(audio.samples))
    if peak == 0:
        raise ValueError("cannot peak-normalize a silent signal")
    if target_dbfs is None:
        target_dbfs = np.random.default_rng(rng_seed).uniform(low_dbfs, high_dbfs)
    gain = 10.0 ** (target_dbfs / 20.0) / peak
    return AudioBuffer(audio.samples * gain, audio.sample_rate), float(gain)


def mel_to_power(logmel: LogMelSpectrogram, fb: MelFilterbank) -> np.ndarray:
    """Clamped pseudo-inverse of the filterbank applied to exp(log-Mel)."""
    if logmel.values.shape[1] != fb.n_mels:
        raise ValueError(f"log-Mel has {logmel.values.shape[1]} bands, filterbank has {fb.n_mels}")
    mel = np.exp(logmel.values)
    # entries at the floor carry no energy
    mel = np.where(logmel.values <= np.log(logmel.floor), 0.0, mel)
    return np.maximum(mel @ np.linalg.pinv(fb.weights).T, 0.0)


def spectral_convergence(target_mag: np.ndarray, estimate_mag: np.ndarray) -> float:
    denom = np.linalg.norm(target_mag)
    if denom == 0:
        return float(np.linalg.norm(estimate_mag))
    return float(np.linalg.norm(target_mag - estimate_mag) / denom)


def griffin_lim(
    magnitude: np.ndarray,
    cfg: StftConfig,
    iterations: int = 60,
    rng_seed: int = 0,
    sample_rate: int = SAMPLE_RATE,
    return_history: bool = False,
):
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    rng = np.random.default_rng(rng_seed)
    phase = np.exp(2j * np.pi * rng.random(magnitude.shape))
    history = []
    audio = None
    for _ in range(iterations):
        audio = istft(ComplexSpectrogram(magnitude * phase, cfg), sample_rate)
        rebuilt = stft(audio, cfg).values
        if return_history:
            history.append(spectral_convergence(magnitude, np.abs(rebuilt)))
        phase = np.exp(1j * np.angle(rebuilt))
    audio = istft(ComplexSpectrogram(magnitude * phase, cfg), sample_rate)
    if return_history:
        return audio, history
    return audio


def mel_to_waveform(
    logmel: LogMelSpectrogram,
    fb: MelFilterbank,
    cfg: StftConfig,
    iterations: int = 60,
    rng_seed: int = 0,
    sample_rate: int = SAMPLE_RATE,
) -> AudioBuffer:
    magnitude = np.sqrt(mel_to_power(logmel, fb))
    return griffin_lim(magnitude, cfg, iterations, rng_seed, sample_rate)
