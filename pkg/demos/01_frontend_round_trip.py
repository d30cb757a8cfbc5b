"""Walk a synthetic utterance through the front-end and back.

Shows the STFT/ISTFT round trip, the log-Mel front-end, and Griffin-Lim
resynthesis from log-Mel alone.
"""

import numpy as np

from melstream.dsp import AudioBuffer, griffin_lim, istft, log_mel, mel_filterbank, mel_to_power, se_stft, stft
from melstream.synthdata import gen_speech_proxy

cfg = se_stft()
fb = mel_filterbank(80, cfg)
speech = gen_speech_proxy(seed=1, duration_s=2.0)
print(f"speech proxy: {len(speech)} samples, peak {np.max(np.abs(speech.samples)):.2f}")

spec = stft(speech, cfg)
back = istft(spec).samples
edge = cfg.frame_len - cfg.hop
err = np.linalg.norm(back[edge:-edge] - speech.samples[edge : back.size - edge]) / np.linalg.norm(speech.samples)
print(f"stft: {spec.values.shape[0]} frames x {spec.values.shape[1]} bins, round-trip error {err:.1e}")

lm = log_mel(spec, fb)
print(f"log-Mel: {lm.shape}, range [{lm.values.min():.1f}, {lm.values.max():.1f}]")

magnitude = np.sqrt(mel_to_power(lm, fb))
audio, history = griffin_lim(magnitude, cfg, iterations=30, rng_seed=0, return_history=True)
print(f"griffin-lim spectral convergence: {history[0]:.3f} -> {history[-1]:.3f} over {len(history)} iterations")
