"""16-bit PCM mono WAV reading/writing with load-time resampling."""

from __future__ import annotations

from math import gcd
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .dsp import SAMPLE_RATE, AudioBuffer

_PCM_SCALE = 32768.0


def read_wav(path, target_rate: int = SAMPLE_RATE) -> AudioBuffer:
    rate, data = wavfile.read(str(path))
    if data.ndim != 1:
        raise ValueError(f"{path}: expected mono audio, got {data.shape[1]} channels")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / _PCM_SCALE
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2**31
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif np.issubdtype(data.dtype, np.floating):
        x = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported sample format {data.dtype}")
    if rate != target_rate:
        g = gcd(rate, target_rate)
        x = resample_poly(x, target_rate // g, rate // g)
    return AudioBuffer(x, target_rate)


def to_pcm16(x: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(x) * _PCM_SCALE), -32768, 32767).astype("<i2")


def write_wav(path, audio: AudioBuffer) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), audio.sample_rate, to_pcm16(audio.samples))
    return path
