"""Deterministic synthetic corpus: harmonic speech proxies, colored noise,
exponential-tail room responses, SNR-controlled mixing."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import signal

from .dsp import SAMPLE_RATE, AudioBuffer
from .wavio import write_wav

SNR_RANGE_DB = (-5.0, 20.0)
REVERB_PROBABILITY = 0.75
DECAY_RANGE_S = (0.2, 0.8)
MAX_DIRECT_DELAY_S = 0.010
TAIL_ONSET_S = 0.001
TAIL_GAIN = 0.05
HEADROOM_PEAK = 0.99
SPLITS = ("train", "val", "test")


@dataclass(frozen=True)
class MixSpec:
    snr_db: float
    reverberant: bool
    rir_decay_s: float
    seed: int

    def __post_init__(self):
        lo, hi = SNR_RANGE_DB
        if not lo <= self.snr_db <= hi:
            raise ValueError(f"snr_db {self.snr_db} outside [{lo}, {hi}]")
        if self.reverberant and self.rir_decay_s <= 0:
            raise ValueError("reverberant mixtures need a positive decay time")


def gen_speech_proxy(seed, duration_s: float, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Harmonic, pitch- and amplitude-modulated 'syllables' separated by silence.

    The first gap always starts within the first half of the signal and is
    at least 100 ms long. Peak is 0.5.
    """
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n) / sample_rate

    f0 = rng.uniform(100.0, 300.0)
    n_harm = int(rng.integers(3, 9))
    vibrato = 1.0 + 0.04 * np.sin(2 * np.pi * rng.uniform(2.0, 5.0) * t + rng.uniform(0, 2 * np.pi))
    drift = 1.0 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.2, 0.6) * t + rng.uniform(0, 2 * np.pi))
    phase = 2 * np.pi * np.cumsum(f0 * vibrato * drift) / sample_rate
    amps = rng.uniform(0.3, 1.0, n_harm) / np.arange(1, n_harm + 1)
    x = np.zeros(n)
    for k in range(n_harm):
        x += amps[k] * np.sin((k + 1) * phase + rng.uniform(0, 2 * np.pi))

    env = np.zeros(n)
    pos = int(rng.uniform(0.0, 0.15) * sample_rate)
    first = True
    while pos < n:
        seg = int(rng.uniform(0.15, 0.45) * sample_rate)
        end = min(pos + seg, n)
        if end - pos > 8:
            env[pos:end] = signal.windows.tukey(end - pos, 0.3) * rng.uniform(0.4, 1.0)
        gap = int(rng.uniform(0.12 if first else 0.05, 0.3) * sample_rate)
        pos = end + gap
        first = False
    env *= 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(3.0, 6.0) * t)
    x *= env
    peak = np.max(np.abs(x))
    if peak == 0:
        raise ValueError("duration too short to hold a voiced segment")
    return AudioBuffer(0.5 * x / peak, sample_rate)


def gen_noise(seed, duration_s: float, sample_rate: int = SAMPLE_RATE) -> AudioBuffer:
    """Colored Gaussian noise (random spectral tilt), optionally with a hum
    component and slow level fluctuation."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    tilt = rng.uniform(-1.0, 0.5)  # 0 = white, -1 = pink-ish power slope
    shape = np.ones_like(freqs)
    shape[1:] = (freqs[1:] / 1000.0) ** (tilt / 2.0)
    shape[0] = 0.0
    x = np.fft.irfft(spec * shape, n)
    t = np.arange(n) / sample_rate
    if rng.random() < 0.5:
        hum = rng.uniform(50.0, 400.0)
        x += rng.uniform(0.2, 1.0) * np.std(x) * np.sin(2 * np.pi * hum * t)
    x *= 1.0 + rng.uniform(0.0, 0.5) * np.sin(2 * np.pi * rng.uniform(0.1, 1.0) * t)
    return AudioBuffer(x / np.max(np.abs(x)) * 0.5, sample_rate)


def gen_rir(seed, decay_s: float, sample_rate: int = SAMPLE_RATE, return_delay: bool = False):
    """Unit direct impulse at a random delay <= 10 ms, then an exponentially
    decaying noise tail that falls 60 dB over ``decay_s`` seconds."""
    if decay_s <= 0:
        raise ValueError("decay_s must be positive")
    rng = np.random.default_rng(seed)
    delay = int(rng.integers(0, int(MAX_DIRECT_DELAY_S * sample_rate) + 1))
    onset = max(1, int(round(TAIL_ONSET_S * sample_rate)))
    tail_len = max(1, int(np.ceil(1.2 * decay_s * sample_rate)))
    tau = decay_s / (3.0 * np.log(10.0))  # amplitude time constant: -60 dB at decay_s
    t = (onset + np.arange(tail_len)) / sample_rate
    tail = TAIL_GAIN * rng.standard_normal(tail_len) * np.exp(-t / tau)
    h = np.zeros(delay + onset + tail_len)
    h[delay] = 1.0
    h[delay + onset :] = tail
    rir = AudioBuffer(h, sample_rate)
    return (rir, delay) if return_delay else rir


def signal_power(x) -> float:
    return float(np.mean(np.square(np.asarray(getattr(x, "samples", x)))))


def mix_at_snr(clean: AudioBuffer, noise: AudioBuffer, snr_db: float) -> tuple[AudioBuffer, AudioBuffer]:
    if len(clean) != len(noise):
        raise ValueError(f"length mismatch: clean {len(clean)} vs noise {len(noise)}")
    p_clean, p_noise = signal_power(clean), signal_power(noise)
    if p_clean == 0 or p_noise == 0:
        raise ValueError("cannot mix at a given SNR with a zero-power signal")
    scale = np.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    scaled = noise.samples * scale
    return AudioBuffer(clean.samples + scaled, clean.sample_rate), AudioBuffer(scaled, noise.sample_rate)


def measured_snr_db(clean, noise) -> float:
    return 10.0 * np.log10(signal_power(clean) / signal_power(noise))


@dataclass
class Mixture:
    noisy: AudioBuffer
    clean: AudioBuffer  # reverberant when spec.reverberant, else dry
    direct: AudioBuffer
    noise: AudioBuffer  # scaled noise actually added
    spec: MixSpec


def entry_seed(global_seed: int, split: str, index: int) -> int:
    ss = np.random.SeedSequence([global_seed, SPLITS.index(split), index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def synth_mixture(seed: int, duration_s: float = 3.0, sample_rate: int = SAMPLE_RATE) -> Mixture:
    rng = np.random.default_rng(seed)
    snr = float(rng.uniform(*SNR_RANGE_DB))
    reverberant = bool(rng.random() < REVERB_PROBABILITY)
    decay = float(rng.uniform(*DECAY_RANGE_S))
    speech_seed, noise_seed, rir_seed = (int(s) for s in rng.integers(0, 2**31, size=3))
    dry = gen_speech_proxy(speech_seed, duration_s, sample_rate).samples
    n = dry.size
    if reverberant:
        rir, delay = gen_rir(rir_seed, decay, sample_rate, return_delay=True)
        clean = signal.fftconvolve(dry, rir.samples)[:n]
        direct = np.zeros(n)
        direct[delay:] = dry[: n - delay]
    else:
        clean = dry.copy()
        direct = dry.copy()
    noise = gen_noise(noise_seed, duration_s, sample_rate)
    noisy, scaled = mix_at_snr(AudioBuffer(clean, sample_rate), noise, snr)
    peak = max(np.max(np.abs(noisy.samples)), np.max(np.abs(clean)), np.max(np.abs(direct)))
    g = HEADROOM_PEAK / peak if peak > HEADROOM_PEAK else 1.0
    spec = MixSpec(snr, reverberant, decay if reverberant else 0.0, seed)
    return Mixture(
        AudioBuffer(noisy.samples * g, sample_rate),
        AudioBuffer(clean * g, sample_rate),
        AudioBuffer(direct * g, sample_rate),
        AudioBuffer(scaled.samples * g, sample_rate),
        spec,
    )


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ManifestEntry:
    index: int
    noisy: str
    clean: str
    direct: str
    snr_db: float
    reverberant: bool
    seed: int

    def to_line(self) -> str:
        return "\t".join(
            [str(self.index), self.noisy, self.clean, self.direct, f"{self.snr_db:.10f}", str(int(self.reverberant)), str(self.seed)]
        )

    @classmethod
    def from_line(cls, line: str) -> "ManifestEntry":
        idx, noisy, clean, direct, snr, rev, seed = line.rstrip("\n").split("\t")
        return cls(int(idx), noisy, clean, direct, float(snr), rev == "1", int(seed))


@dataclass
class CorpusManifest:
    path: Path
    entries: list = field(default_factory=list)
    global_seed: int = 0
    split: str = "train"

    def resolve(self, rel: str) -> Path:
        return self.path.parent / rel

    def write(self):
        lines = [f"# global_seed={self.global_seed}", f"# split={self.split} count={len(self.entries)}"]
        lines += [e.to_line() for e in self.entries]
        self.path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> CorpusManifest:
    path = Path(path)
    m = CorpusManifest(path)
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            for kv in line[1:].split():
                key, _, value = kv.partition("=")
                if key == "global_seed":
                    m.global_seed = int(value)
                elif key == "split":
                    m.split = value
        elif line.strip():
            m.entries.append(ManifestEntry.from_line(line))
    return m


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def build_corpus(n_train: int, n_val: int, n_test: int, seed: int, out_dir, duration_s: float = 3.0) -> dict:
    """Write WAV triplets and one manifest per split under ``out_dir``.

    Also writes ``SHA256SUMS`` (``sha256sum -c`` compatible). Returns
    ``{split: CorpusManifest}``.
    """
    counts = {"train": n_train, "val": n_val, "test": n_test}
    if any(c < 0 for c in counts.values()) or n_train == 0:
        raise ValueError(f"split counts must be >= 0 with a non-empty train split, got {counts}")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"cannot write corpus to {out}: {exc}") from exc

    manifests = {}
    sums = []
    for split, count in counts.items():
        m = CorpusManifest(out / f"{split}.tsv", global_seed=seed, split=split)
        if count == 0:
            continue
        for i in range(count):
            es = entry_seed(seed, split, i)
            mix = synth_mixture(es, duration_s)
            names = {kind: f"{split}/{i:05d}_{kind}.wav" for kind in ("noisy", "clean", "direct")}
            for kind, audio in (("noisy", mix.noisy), ("clean", mix.clean), ("direct", mix.direct)):
                write_wav(out / names[kind], audio)
                sums.append(f"{sha256_file(out / names[kind])}  {names[kind]}")
            m.entries.append(
                ManifestEntry(i, names["noisy"], names["clean"], names["direct"], mix.spec.snr_db, mix.spec.reverberant, es)
            )
        m.write()
        manifests[split] = m
    (out / "SHA256SUMS").write_text("\n".join(sums) + "\n", encoding="utf-8")
    return manifests


def verify_corpus(out_dir) -> list:
    """Re-hash every file listed in SHA256SUMS; returns the mismatching paths."""
    out = Path(out_dir)
    bad = []
    for line in (out / "SHA256SUMS").read_text(encoding="utf-8").splitlines():
        digest, rel = line.split("  ", 1)
        p = out / rel
        if not p.exists() or sha256_file(p) != digest:
            bad.append(rel)
    return bad
