"""Checks that run without external toolchains: log-Mel MSE, causality
probing and real-time factor.

PESQ, DNSMOS and WER need licensed or pretrained components and are not
computed here; log-Mel MSE and waveform SNR are in-repo proxies.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .dsp import SAMPLE_RATE, AudioBuffer
from .features import frame_context
from .model import ModelConfig, forward
from .pipeline import Enhancer, training_pair
from .synthdata import CorpusManifest
from .training import mse_loss
from .wavio import read_wav


@dataclass
class EvalReport:
    utterances: list = field(default_factory=list)  # one dict per utterance
    rtf: float | None = None
    stream_rtf: float | None = None

    def _mean(self, key):
        vals = [u[key] for u in self.utterances if u.get(key) is not None]
        return float(np.mean(vals)) if vals else None

    @property
    def logmel_mse_enhanced(self):
        return self._mean("logmel_mse_enhanced")

    @property
    def logmel_mse_unprocessed(self):
        return self._mean("logmel_mse_unprocessed")

    @property
    def waveform_snr_db(self):
        return self._mean("waveform_snr_db")

    def aggregates(self) -> dict:
        return {
            "n_utterances": len(self.utterances),
            "logmel_mse_enhanced": self.logmel_mse_enhanced,
            "logmel_mse_unprocessed": self.logmel_mse_unprocessed,
            "waveform_snr_db": self.waveform_snr_db,
            "rtf": self.rtf,
            "stream_rtf": self.stream_rtf,
        }

    def render(self) -> str:
        lines = []
        for u in self.utterances:
            lines.append(
                f"utt {u['index']}: enhanced {u['logmel_mse_enhanced']:.4f} "
                f"unprocessed {u['logmel_mse_unprocessed']:.4f} "
                f"input snr {u['waveform_snr_db']:.2f} dB"
            )
        lines.append("[aggregate]")
        for k, v in self.aggregates().items():
            lines.append(f"{k}={'none' if v is None else v}")
        return "\n".join(lines) + "\n"


def waveform_snr_db(reference: np.ndarray, estimate: np.ndarray) -> float:
    n = min(reference.size, estimate.size)
    ref, est = reference[:n], estimate[:n]
    err = np.sum((ref - est) ** 2)
    return float(10.0 * np.log10(np.sum(ref**2) / err)) if err > 0 else float("inf")


def logmel_mse_report(enhancer: Enhancer, manifest: CorpusManifest, target: str = "direct", enhanced=None) -> EvalReport:
    """Per-utterance enhanced-vs-target and noisy-vs-target log-Mel MSE in the
    model's normalized domain.

    ``enhanced`` optionally maps entry index to a precomputed network-domain
    output (used to inject oracle outputs).
    """
    report = EvalReport()
    cfg = enhancer.cfg
    for e in manifest.entries:
        noisy = read_wav(manifest.resolve(e.noisy))
        ref = read_wav(manifest.resolve(e.direct if target == "direct" else e.clean))
        if len(noisy) != len(ref):
            raise ValueError(f"entry {e.index}: noisy and reference lengths differ")
        y, x = training_pair(
            noisy, ref, cfg.norm_mode, enhancer.frontend, [manifest.global_seed, e.index],
            enhancer.global_mean, enhancer.smoothing_len,
        )
        if y.shape[1] != cfg.f_mel:
            raise ValueError(f"corpus features have {y.shape[1]} bands, model expects {cfg.f_mel}")
        if enhanced is not None and e.index in enhanced:
            pred = np.asarray(enhanced[e.index])
        else:
            pred = enhancer.run_network(y)
        report.utterances.append(
            {
                "index": e.index,
                "logmel_mse_enhanced": mse_loss(pred, x),
                "logmel_mse_unprocessed": mse_loss(y, x),
                "waveform_snr_db": waveform_snr_db(ref.samples, noisy.samples),
            }
        )
    return report


def causality_probe(cfg: ModelConfig, params, t_cut: int, trials: int = 20, n_frames: int = 40, seed: int = 0) -> float:
    """Largest change in outputs at frames <= ``t_cut`` (0-based) caused by
    re-drawing every input frame after ``t_cut``."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        y = rng.standard_normal((n_frames, cfg.f_mel))
        base = forward(cfg, params, frame_context(y, cfg.context))
        perturbed = y.copy()
        perturbed[t_cut + 1 :] = rng.standard_normal(perturbed[t_cut + 1 :].shape) * 3.0
        out = forward(cfg, params, frame_context(perturbed, cfg.context))
        worst = max(worst, float(np.max(np.abs(out[: t_cut + 1] - base[: t_cut + 1]))))
    return worst


def measure_rtf(enhancer: Enhancer, audio_seconds: float = 2.0, repetitions: int = 3, streaming: bool | None = None, seed: int = 0) -> float:
    """Median wall-clock time / audio duration.

    ``streaming=None`` picks the streaming path for online models and the
    batch path otherwise.
    """
    if streaming is None:
        streaming = enhancer.cfg.online
    rng = np.random.default_rng(seed)
    sr = SAMPLE_RATE
    audio = AudioBuffer(0.1 * rng.standard_normal(int(audio_seconds * sr)), sr)
    hop = enhancer.frontend.stft.hop
    timings = []
    for _ in range(repetitions):
        start = time.perf_counter()
        if streaming:
            chunks = (audio.samples[i : i + hop] for i in range(0, len(audio), hop))
            for _frame in enhancer.stream(chunks):
                pass
        else:
            enhancer.enhance_logmel(audio)
        timings.append(time.perf_counter() - start)
    return float(np.median(timings) / audio.duration)
