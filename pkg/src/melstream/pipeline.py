"""Glue between waveforms and the network: front-end, per-mode normalization,
and a loaded-model wrapper for batch and streaming enhancement."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .dsp import (
    LOG_FLOOR,
    SAMPLE_RATE,
    AudioBuffer,
    LogMelSpectrogram,
    MelFilterbank,
    StftConfig,
    asr_stft,
    log_mel,
    mel_filterbank,
    mel_to_waveform,
    peak_normalize,
    se_stft,
    stft,
)
from .features import (
    NormMode,
    NormState,
    asr_normalize,
    frame_context,
    normalize_offline_pair,
    online_normalize,
    online_normalize_step,
)
from .model import ModelConfig, StreamState, cast_parameters, check_parameters, forward, forward_streaming

INFERENCE_TARGET_DBFS = -3.5


@dataclass(frozen=True)
class FrontEnd:
    stft: StftConfig
    fb: MelFilterbank
    floor: float = LOG_FLOOR

    @classmethod
    def create(cls, n_mels: int = 80, asr: bool = False, sample_rate: int = SAMPLE_RATE) -> "FrontEnd":
        cfg = asr_stft(sample_rate) if asr else se_stft(sample_rate)
        return cls(cfg, mel_filterbank(n_mels, cfg, sample_rate, 0.0, sample_rate / 2))

    def logmel(self, audio: AudioBuffer) -> np.ndarray:
        return log_mel(stft(audio, self.stft), self.fb, self.floor).values

    def frame_logmel(self, frame_samples: np.ndarray) -> np.ndarray:
        """Log-Mel of one analysis frame; equal to the matching row of :meth:`logmel`."""
        windowed = frame_samples[None] * self.stft.analysis_window()
        spec = np.fft.rfft(windowed, n=self.stft.fft_size, axis=-1)
        power = spec.real**2 + spec.imag**2
        return np.log(np.maximum(np.einsum("tk,mk->tm", power, self.fb.weights), self.floor))[0]


class StreamingFrontEnd:
    """Turns arbitrary-size sample chunks into log-Mel frames.

    Keeps at most one frame of samples buffered.
    """

    def __init__(self, frontend: FrontEnd):
        self.frontend = frontend
        self.buffer = np.zeros(0)

    def push(self, samples: np.ndarray):
        cfg = self.frontend.stft
        self.buffer = np.concatenate([self.buffer, np.asarray(samples, dtype=np.float64)])
        while self.buffer.size >= cfg.frame_len:
            yield self.frontend.frame_logmel(self.buffer[: cfg.frame_len])
            self.buffer = self.buffer[cfg.hop :]


def training_pair(
    noisy: AudioBuffer,
    target: AudioBuffer,
    norm_mode: NormMode,
    frontend: FrontEnd,
    rng_seed=None,
    global_mean: float = 0.0,
    smoothing_len: float = 200,
) -> tuple[np.ndarray, np.ndarray]:
    """Network input and target log-Mel matrices for one utterance."""
    norm_mode = NormMode(norm_mode)
    if norm_mode is NormMode.ASR:
        return asr_normalize(frontend.logmel(noisy)), asr_normalize(frontend.logmel(target))
    noisy, target = normalize_offline_pair(noisy, target, rng_seed)
    y, x = frontend.logmel(noisy), frontend.logmel(target)
    if norm_mode is NormMode.OFFLINE_GAIN:
        return y, x
    y_tilde, mus, _ = online_normalize(y, NormState.from_length(smoothing_len, global_mean))
    return y_tilde, x - mus[:, None] + global_mean


@dataclass
class Enhancer:
    """A model plus everything needed to run it on waveforms."""

    cfg: ModelConfig
    params: dict
    frontend: FrontEnd
    global_mean: float = 0.0
    smoothing_len: float = 200

    @classmethod
    def from_container(cls, c: checkpoint.Container) -> "Enhancer":
        meta = c.config
        cfg = ModelConfig.from_dict(meta["model"])
        params = cast_parameters(c.params(), np.float32)
        check_parameters(cfg, params)
        frontend = FrontEnd.create(cfg.f_mel, asr=meta.get("asr_frontend", False))
        return cls(cfg, params, frontend, meta.get("global_mean", 0.0), meta.get("smoothing_len", 200))

    @classmethod
    def load(cls, path) -> "Enhancer":
        return cls.from_container(checkpoint.load(path))

    def network_input(self, audio: AudioBuffer):
        """Normalized network input and the per-frame offset that maps network
        output back to the level of the unnormalized input."""
        mode = self.cfg.norm_mode
        if mode is NormMode.ASR:
            y = self.frontend.logmel(audio)
            return asr_normalize(y), np.zeros(y.shape[0])
        if mode is NormMode.OFFLINE_GAIN:
            scaled, gain = peak_normalize(audio, target_dbfs=INFERENCE_TARGET_DBFS)
            y = self.frontend.logmel(scaled)
            return y, np.full(y.shape[0], -2.0 * np.log(gain))
        y = self.frontend.logmel(audio)
        y_tilde, mus, _ = online_normalize(y, NormState.from_length(self.smoothing_len, self.global_mean))
        return y_tilde, mus - self.global_mean

    def run_network(self, net_in: np.ndarray) -> np.ndarray:
        return forward(self.cfg, self.params, frame_context(net_in, self.cfg.context)).astype(np.float64)

    def enhance_logmel(self, audio: AudioBuffer) -> np.ndarray:
        net_in, offset = self.network_input(audio)
        return self.run_network(net_in) + offset[:, None]

    def stream(self, chunks):
        """Frame-by-frame enhancement of an iterable of sample chunks (online
        models only). Yields enhanced log-Mel frames at input level."""
        if not self.cfg.online:
            raise ValueError("streaming requires an online model checkpoint")
        if self.cfg.norm_mode is not NormMode.ONLINE_RECURSIVE:
            raise ValueError(f"streaming requires online-recursive normalization, got {self.cfg.norm_mode.value}")
        fe = StreamingFrontEnd(self.frontend)
        norm = NormState.from_length(self.smoothing_len, self.global_mean)
        state = StreamState(self.cfg, self.params["output.weight"].dtype)
        for chunk in chunks:
            for frame in fe.push(chunk):
                y_tilde, norm = online_normalize_step(frame, norm)
                out, state = forward_streaming(self.cfg, self.params, y_tilde, state)
                yield np.float64(out) + (norm.mu - self.global_mean)

    def to_waveform(self, logmel: np.ndarray, iterations: int = 60, rng_seed: int = 0) -> AudioBuffer:
        lm = LogMelSpectrogram(np.maximum(logmel, np.log(self.frontend.floor)), self.frontend.floor)
        return mel_to_waveform(lm, self.frontend.fb, self.frontend.stft, iterations, rng_seed)
