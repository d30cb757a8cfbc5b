"""Command-line entry point.

Exit codes: 0 success, 1 usage, 2 validation, 3 runtime (including failed
verification probes). ``MELSTREAM_THREADS`` caps BLAS worker threads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from contextlib import nullcontext
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("melstream")


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _thread_limit():
    n = os.environ.get("MELSTREAM_THREADS")
    if not n:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=int(n))


# ---------------------------------------------------------------------------
# synth-data
# ---------------------------------------------------------------------------


def cmd_synth_data(args) -> int:
    from .synthdata import build_corpus

    manifests = build_corpus(args.n_train, args.n_val, args.n_test, args.seed, args.out, args.duration)
    for split, m in manifests.items():
        print(f"{split}: {len(m.entries)} entries -> {m.path}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _model_config(args):
    from .features import ContextConfig
    from .model import ModelConfig

    future = args.future_frames
    if future is None:
        future = 0 if args.mode == "online" else 15
    if args.mode == "online" and future > 0:
        raise ValidationError("--mode online forbids --future-frames > 0")
    ctx = ContextConfig(args.past_frames, future, args.lower_freqs, args.upper_freqs)
    norm = args.norm_mode or ("online-recursive" if args.mode == "online" else "offline-gain")
    try:
        return ModelConfig(
            f_mel=args.f_mel,
            hidden_d=args.hidden_d,
            n_blocks=args.n_blocks,
            context=ctx,
            mode=args.mode,
            fullband_hidden_per_dir=args.hidden_d // 2,
            subband_hidden=args.subband_hidden or args.hidden_d,
            norm_mode=norm,
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc


def cmd_train(args) -> int:
    from .training import TrainConfig, train

    mc = _model_config(args)
    try:
        tc = TrainConfig(
            epochs=args.epochs,
            batch_size=args.batch_size,
            segment_seconds=args.segment_seconds,
            lr_init=args.lr_init,
            lr_peak=args.lr_peak,
            warmup_epochs=args.warmup_epochs,
            lr_final=args.lr_final,
            seed=args.seed,
            average_last_k=args.average_last,
            grad_clip=args.grad_clip,
            smoothing_len=args.smoothing_len,
            target=args.target,
            asr_frontend=args.asr_frontend,
        )
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    corpus = Path(args.corpus)
    if not (corpus / "train.tsv").exists():
        raise ValidationError(f"{corpus} has no train.tsv manifest")

    result = train(tc, mc, corpus, args.out)
    for epoch, lr, tr, va in result.history:
        print(f"epoch {epoch:4d}  lr {lr:.3e}  train {tr:.5f}  val {va:.5f}")
    if result.unprocessed_val_mse is not None:
        print(f"unprocessed val mse {result.unprocessed_val_mse:.5f}")
    print(f"loss log: {result.log_path}")
    if result.averaged:
        print(f"averaged checkpoint: {result.averaged}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# enhance / stream
# ---------------------------------------------------------------------------


def _mel_meta(enhancer, source: str) -> dict:
    fe = enhancer.frontend
    return {
        "kind": "logmel",
        "source": source,
        "n_mels": fe.fb.n_mels,
        "frame_len": fe.stft.frame_len,
        "hop": fe.stft.hop,
        "log": "natural",
        "norm_mode": enhancer.cfg.norm_mode.value,
    }


def _load_inputs(args):
    from .pipeline import Enhancer
    from .wavio import read_wav

    ckpt, wav = Path(args.checkpoint), Path(args.input)
    for p in (ckpt, wav):
        if not p.exists():
            raise ValidationError(f"{p} does not exist")
    try:
        enhancer = Enhancer.load(ckpt)
        audio = read_wav(wav)
    except ValueError as exc:
        raise ValidationError(str(exc)) from exc
    if len(audio) < enhancer.frontend.stft.frame_len:
        raise ValidationError(f"{wav} is shorter than one analysis frame")
    return enhancer, audio


def cmd_enhance(args) -> int:
    from . import checkpoint
    from .features import asr_normalize
    from .wavio import write_wav

    emits = [e for chunk in args.emit for e in chunk.split(",")]
    bad = sorted(set(emits) - {"mel", "wav", "asr-mel"})
    if bad:
        raise ValidationError(f"unknown --emit value(s): {bad}")
    enhancer, audio = _load_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.input).stem

    enhanced = enhancer.enhance_logmel(audio)
    meta = _mel_meta(enhancer, Path(args.input).name)
    if "mel" in emits:
        path = checkpoint.save(out / f"{stem}.mel.mfsn", meta, {"logmel": enhanced})
        print(f"mel: {path} ({enhanced.shape[0]} x {enhanced.shape[1]})")
    if "asr-mel" in emits:
        path = checkpoint.save(out / f"{stem}.asr-mel.mfsn", {**meta, "kind": "asr-logmel"}, {"logmel": asr_normalize(enhanced)})
        print(f"asr-mel: {path}")
    if "wav" in emits:
        wave = enhancer.to_waveform(enhanced, args.gl_iterations, args.seed)
        path = write_wav(out / f"{stem}.enhanced.wav", wave)
        print(f"wav: {path} ({len(wave)} samples)")
    return EXIT_OK


def cmd_stream(args) -> int:
    from . import checkpoint

    enhancer, audio = _load_inputs(args)
    if not enhancer.cfg.online:
        raise ValidationError("stream requires an online checkpoint; this one is offline")
    chunk = args.chunk or enhancer.frontend.stft.hop
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    frames, latencies = [], []
    chunks = [audio.samples[i : i + chunk] for i in range(0, len(audio), chunk)]
    start = time.perf_counter()
    it = enhancer.stream(chunks)
    while True:
        t0 = time.perf_counter()
        try:
            frame = next(it)
        except StopIteration:
            break
        latencies.append(time.perf_counter() - t0)
        frames.append(frame)
    elapsed = time.perf_counter() - start
    enhanced = np.stack(frames)
    stem = Path(args.input).stem
    path = checkpoint.save(out / f"{stem}.mel.mfsn", _mel_meta(enhancer, Path(args.input).name), {"logmel": enhanced})
    lat = np.array(latencies) * 1e3
    print(f"mel: {path} ({enhanced.shape[0]} x {enhanced.shape[1]})")
    print(f"frames: {len(frames)}  latency ms: mean {lat.mean():.3f}  p95 {np.percentile(lat, 95):.3f}  max {lat.max():.3f}")
    print(f"rtf: {elapsed / audio.duration:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# verify
# ---------------------------------------------------------------------------


def _probe_gradcheck(mode, seed, corrupt):
    from .features import ContextConfig, frame_context
    from .model import ModelConfig, init_parameters
    from .training import backward, gradcheck

    ctx = ContextConfig(2, 0 if mode == "online" else 1, 1, 1)
    cfg = ModelConfig.small(hidden_d=6, f_mel=4, n_blocks=1, mode=mode, context=ctx)
    params = init_parameters(cfg, seed)
    rng = np.random.default_rng(seed)
    framed = frame_context(rng.standard_normal((3, 4)), ctx)
    target = rng.standard_normal((3, 4))
    analytic = None
    if corrupt:
        # gradients taken at perturbed weights, as a stale-weight bug would
        bad = {k: v + 0.05 * rng.standard_normal(v.shape) for k, v in params.items()}
        _, analytic = backward(cfg, bad, framed, target)
    errors = gradcheck(cfg, params, framed, target, analytic=analytic)
    worst = max(errors.values())
    return worst < 1e-4, f"gradcheck[{mode}]: max relative error {worst:.3e} (limit 1e-4)"


def _probe_causality(mode, seed):
    from .evaluate import causality_probe
    from .model import ModelConfig, init_parameters

    cfg = ModelConfig.small(hidden_d=8, f_mel=16, n_blocks=2, mode=mode)
    params = init_parameters(cfg, seed)
    influence = max(causality_probe(cfg, params, t_cut, trials=4, n_frames=24, seed=seed + t_cut) for t_cut in (0, 5, 11, 17, 22))
    ok = influence == 0.0 if mode == "online" else influence > 0.0
    expect = "== 0" if mode == "online" else "> 0"
    return ok, f"causality[{mode}]: max future influence = {influence!r} (expect {expect})"


def _probe_dsp(seed):
    from .dsp import AudioBuffer, StftConfig, istft, mel_filterbank, stft

    rng = np.random.default_rng(seed)
    x = rng.standard_normal(16000)
    worst = 0.0
    for hop in (256, 128):
        cfg = StftConfig(512, hop, 512)
        y = istft(stft(AudioBuffer(x), cfg)).samples
        lo, hi = cfg.frame_len - cfg.hop, y.size - (cfg.frame_len - cfg.hop)
        worst = max(worst, np.linalg.norm(y[lo:hi] - x[lo:hi]) / np.linalg.norm(x[lo:hi]))
    fb = mel_filterbank(80, StftConfig(512, 256, 512), 16000, 0, 8000).weights
    tri = all(_triangular(row) for row in fb)
    ok = worst < 1e-6 and tri and bool(np.all(fb >= 0))
    return ok, f"dsp: stft/istft interior rel. error {worst:.2e}; filterbank triangular={tri}"


def _triangular(row) -> bool:
    nz = np.flatnonzero(row)
    peak = int(np.argmax(row))
    seg = row[nz[0] : nz[-1] + 1]
    p = peak - nz[0]
    return bool(np.all(np.diff(seg[: p + 1]) > 0) and np.all(np.diff(seg[p:]) < 0))


def _probe_stream(seed):
    from .features import frame_context
    from .model import ModelConfig, forward, init_parameters, stream_utterance

    cfg = ModelConfig.small(hidden_d=8, f_mel=16, n_blocks=2)
    params = init_parameters(cfg, seed)
    y = np.random.default_rng(seed).standard_normal((50, 16))
    same = np.array_equal(forward(cfg, params, frame_context(y, cfg.context)), stream_utterance(cfg, params, y))
    return same, f"stream/batch bit-identical: {same}"


def cmd_verify(args) -> int:
    probes = ["gradcheck", "causality", "dsp", "stream"] if args.probe == "all" else [args.probe]
    modes = ["online", "offline"] if args.mode == "both" else [args.mode]
    results = []
    for probe in probes:
        if probe == "gradcheck":
            results += [_probe_gradcheck(m, args.seed, args.corrupt_weights) for m in modes]
        elif probe == "causality":
            results += [_probe_causality(m, args.seed) for m in modes]
        elif probe == "dsp":
            results.append(_probe_dsp(args.seed))
        elif probe == "stream":
            results.append(_probe_stream(args.seed))
    for ok, line in results:
        print(f"[{'PASS' if ok else 'FAIL'}] {line}")
    return EXIT_OK if all(ok for ok, _ in results) else EXIT_RUNTIME


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="melstream", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth-data", help="build a synthetic noisy/reverberant corpus")
    s.add_argument("--n-train", type=int, required=True)
    s.add_argument("--n-val", type=int, required=True)
    s.add_argument("--n-test", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, default=3.0, help="seconds per utterance")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth_data)

    t = sub.add_parser("train", help="train a model on a synthetic corpus")
    t.add_argument("--corpus", required=True, help="directory with train.tsv / val.tsv")
    t.add_argument("--out", required=True)
    t.add_argument("--mode", choices=["online", "offline"], default="online")
    t.add_argument("--norm-mode", choices=["offline-gain", "online-recursive", "asr-utterance-frequency"])
    t.add_argument("--f-mel", type=int, default=80)
    t.add_argument("--hidden-d", type=int, default=192)
    t.add_argument("--subband-hidden", type=int)
    t.add_argument("--n-blocks", type=int, default=3)
    t.add_argument("--past-frames", type=int, default=15)
    t.add_argument("--future-frames", type=int)
    t.add_argument("--lower-freqs", type=int, default=5)
    t.add_argument("--upper-freqs", type=int, default=5)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--batch-size", type=int, default=8)
    t.add_argument("--segment-seconds", type=float, default=3.0)
    t.add_argument("--lr-init", type=float, default=1e-4)
    t.add_argument("--lr-peak", type=float, default=1e-3)
    t.add_argument("--lr-final", type=float, default=1e-4)
    t.add_argument("--warmup-epochs", type=int, default=30)
    t.add_argument("--grad-clip", type=float, default=5.0)
    t.add_argument("--smoothing-len", type=float, default=200)
    t.add_argument("--average-last", type=int, default=10)
    t.add_argument("--target", choices=["direct", "clean"], default="direct")
    t.add_argument("--asr-frontend", action="store_true", help="32 ms / 8 ms STFT instead of 32 ms / 16 ms")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("enhance", help="enhance a WAV file in one batch")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--input", required=True)
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--emit", action="append", default=None, help="mel, wav, asr-mel (repeatable or comma-separated)")
    e.add_argument("--gl-iterations", type=int, default=60)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_enhance)

    st = sub.add_parser("stream", help="enhance a WAV file frame by frame (online models)")
    st.add_argument("--checkpoint", required=True)
    st.add_argument("--input", required=True)
    st.add_argument("--out", required=True, help="output directory")
    st.add_argument("--chunk", type=int, help="samples per pushed chunk (default: hop)")
    st.set_defaults(func=cmd_stream)

    v = sub.add_parser("verify", help="run gradient, causality, DSP and streaming probes")
    v.add_argument("--probe", choices=["all", "gradcheck", "causality", "dsp", "stream"], default="all")
    v.add_argument("--mode", choices=["online", "offline", "both"], default="both")
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--corrupt-weights", action="store_true", help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "emit", "") is None:
        args.emit = ["mel"]
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (OSError, FloatingPointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
