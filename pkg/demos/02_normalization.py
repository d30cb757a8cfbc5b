"""Recursive mean normalization on a level change.

A speech proxy drops 20 dB halfway through. The recursive mean tracks the
new level within a few hundred frames while the ASR-style utterance mean
cannot.
"""

import numpy as np

from melstream.dsp import AudioBuffer, se_stft
from melstream.features import NormState, asr_normalize, online_normalize, smoothing_weight
from melstream.pipeline import FrontEnd
from melstream.synthdata import gen_speech_proxy

fe = FrontEnd.create()
x = gen_speech_proxy(4, 6.0).samples
x[x.size // 2 :] *= 0.1
y = fe.logmel(AudioBuffer(x))

for length in (50, 200):
    out, mus, _ = online_normalize(y, NormState.from_length(length, global_mean=0.0))
    half = y.shape[0] // 2
    print(f"L={length:3d} alpha={smoothing_weight(length):.4f}: mu before drop {mus[half - 1]:.2f}, "
          f"+50 frames {mus[half + 50]:.2f}, end {mus[-1]:.2f}")

asr = asr_normalize(y)
print(f"ASR normalization: first-half mean {asr[: y.shape[0] // 2].mean():+.2f}, second-half {asr[y.shape[0] // 2 :].mean():+.2f}")
