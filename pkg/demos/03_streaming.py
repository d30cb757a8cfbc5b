"""Stream a waveform through an (untrained) online model in hop-sized chunks
and confirm the frames match batch inference bit for bit."""

import time

import numpy as np

from melstream.model import ModelConfig, init_parameters
from melstream.pipeline import Enhancer, FrontEnd
from melstream.synthdata import synth_mixture

cfg = ModelConfig.small(hidden_d=16, n_blocks=2)
params = {k: v.astype(np.float32) for k, v in init_parameters(cfg, seed=0).items()}
enhancer = Enhancer(cfg, params, FrontEnd.create(), global_mean=-4.0)

noisy = synth_mixture(seed=7, duration_s=2.0).noisy
hop = enhancer.frontend.stft.hop
chunks = [noisy.samples[i : i + hop] for i in range(0, len(noisy), hop)]

start = time.perf_counter()
frames = list(enhancer.stream(chunks))
elapsed = time.perf_counter() - start
batch = enhancer.enhance_logmel(noisy)

print(f"{len(frames)} frames streamed in {elapsed:.2f}s (RTF {elapsed / noisy.duration:.2f})")
print(f"identical to batch: {np.array_equal(np.stack(frames), batch)}")
