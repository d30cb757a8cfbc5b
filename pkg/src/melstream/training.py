"""Reverse-mode gradients, Adam, learning-rate schedule, checkpoint averaging
and the desk-scale training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .features import NormMode, compute_global_mean, frame_context
from .model import ModelConfig, Parameters, forward, init_parameters, lstm_sequence_backward
from .pipeline import FrontEnd, training_pair

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    segment_seconds: float = 3.0
    lr_init: float = 1e-4
    lr_peak: float = 1e-3
    warmup_epochs: int = 30
    lr_final: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    average_last_k: int = 10
    grad_clip: float = 5.0
    smoothing_len: float = 200
    target: str = "direct"  # "direct" or "clean"
    asr_frontend: bool = False

    def __post_init__(self):
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ValueError("need 0 <= warmup_epochs < epochs")
        if self.lr_init > self.lr_peak or self.lr_final > self.lr_peak:
            raise ValueError("lr_init and lr_final must not exceed lr_peak")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.target not in ("direct", "clean"):
            raise ValueError("target must be 'direct' or 'clean'")


def lr_at(epoch: float, tc: TrainConfig) -> float:
    """Linear warmup lr_init -> lr_peak, then cosine decay to lr_final."""
    if not 0 <= epoch <= tc.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {tc.epochs}]")
    if epoch <= tc.warmup_epochs:
        if tc.warmup_epochs == 0:
            return tc.lr_peak
        return tc.lr_init + (tc.lr_peak - tc.lr_init) * epoch / tc.warmup_epochs
    progress = (epoch - tc.warmup_epochs) / (tc.epochs - tc.warmup_epochs)
    return tc.lr_final + (tc.lr_peak - tc.lr_final) * (1.0 + math.cos(math.pi * progress)) / 2.0


def mse_loss(pred, target) -> float:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {target.shape}")
    return float(np.mean((pred - target) ** 2))


def _sum_leading(x, keep=1):
    return x.reshape(-1, *x.shape[x.ndim - keep :]).sum(axis=0)


def _outer_sum(a, b):
    """sum over leading axes of a[..., i] * b[..., j]."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite gradient in {name}")


def backward(cfg: ModelConfig, params: Parameters, framed, target) -> tuple[float, dict]:
    """MSE loss of ``forward`` against ``target`` and its exact gradient with
    respect to every parameter array."""
    pred, cache = forward(cfg, params, framed, return_cache=True)
    target = np.asarray(target, dtype=pred.dtype)
    if cache["squeeze"]:
        pred, target = pred[None], target[None]
    if pred.shape != target.shape:
        raise ValueError(f"target shape {target.shape} does not match output {pred.shape}")

    resid = pred - target
    loss = float(np.mean(resid**2))
    d_out = 2.0 * resid / resid.size
    grads = {}

    s = cache["s_last"]
    grads["output.weight"] = _outer_sum(s, d_out[..., None])
    grads["output.bias"] = np.array([d_out.sum()])
    ds = d_out[..., None] * params["output.weight"][:, 0]

    d_ef = np.zeros_like(ds)
    d_et = np.zeros_like(ds)
    hs = cfg.subband_hidden
    hf = cfg.fullband_hidden_per_dir
    for k in range(cfg.n_blocks - 1, -1, -1):
        c = cache["blocks"][k]
        p = f"blocks.{k}"

        ds_t = np.moveaxis(ds, 1, 0)  # (T, B, F, D)
        if cfg.online:
            dw_t, gw, gb = lstm_sequence_backward(ds_t, c["subband.fwd"], params[f"{p}.subband.fwd.weight"])
            grads[f"{p}.subband.fwd.weight"], grads[f"{p}.subband.fwd.bias"] = gw, gb
        else:
            grads[f"{p}.subband.proj.weight"] = _outer_sum(c["subband.cat"], ds_t)
            grads[f"{p}.subband.proj.bias"] = _sum_leading(ds_t)
            d_cat = ds_t @ params[f"{p}.subband.proj.weight"].T
            dwf, gwf, gbf = lstm_sequence_backward(d_cat[..., :hs], c["subband.fwd"], params[f"{p}.subband.fwd.weight"])
            dwb, gwb, gbb = lstm_sequence_backward(d_cat[..., hs:], c["subband.bwd"], params[f"{p}.subband.bwd.weight"])
            grads[f"{p}.subband.fwd.weight"], grads[f"{p}.subband.fwd.bias"] = gwf, gbf
            grads[f"{p}.subband.bwd.weight"], grads[f"{p}.subband.bwd.bias"] = gwb, gbb
            dw_t = dwf + dwb
        dw = np.moveaxis(dw_t, 0, 1)
        _finite(f"{p}.subband", dw)
        d_et += dw

        h, sg = c["h"], c["sg"]
        da = dw * h * sg * (1.0 - sg)
        grads[f"{p}.gate.weight"] = _outer_sum(h, da)
        grads[f"{p}.gate.bias"] = _sum_leading(da)
        dh = dw * sg + da @ params[f"{p}.gate.weight"].T
        _finite(f"{p}.gate", dh)

        dh_f = np.moveaxis(dh, 2, 0)  # (F, B, T, D)
        dzf, gwf, gbf = lstm_sequence_backward(dh_f[..., :hf], c["fullband.fwd"], params[f"{p}.fullband.fwd.weight"])
        dzb, gwb, gbb = lstm_sequence_backward(dh_f[..., hf:], c["fullband.bwd"], params[f"{p}.fullband.bwd.weight"])
        grads[f"{p}.fullband.fwd.weight"], grads[f"{p}.fullband.fwd.bias"] = gwf, gbf
        grads[f"{p}.fullband.bwd.weight"], grads[f"{p}.fullband.bwd.bias"] = gwb, gbb
        dz = np.moveaxis(dzf + dzb, 0, 2)
        _finite(f"{p}.fullband", dz)
        d_ef += dz
        ds = dz  # flows into the previous block's sub-band output

    grads["embed_freq.weight"] = _outer_sum(cache["af"], d_ef)
    grads["embed_freq.bias"] = _sum_leading(d_ef)
    grads["embed_time.weight"] = _outer_sum(cache["at"], d_et)
    grads["embed_time.bias"] = _sum_leading(d_et)
    return loss, {name: grads[name] for name in params}


def global_norm(grads: dict) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def clip_gradients(grads: dict, max_norm: float) -> dict:
    norm = global_norm(grads)
    if max_norm <= 0 or norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: g * scale for k, g in grads.items()}


@dataclass
class OptimizerState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Parameters) -> "OptimizerState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(
    params: Parameters,
    grads: dict,
    opt: OptimizerState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[Parameters, OptimizerState]:
    step = opt.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        m = beta1 * opt.m[name] + (1.0 - beta1) * g
        v = beta2 * opt.v[name] + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**step)
        v_hat = v / (1.0 - beta2**step)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + eps)
        new_m[name], new_v[name] = m, v
    return new_params, OptimizerState(new_m, new_v, step)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def checkpoint_config(mc: ModelConfig, tc: TrainConfig | None = None, **extra) -> dict:
    cfg = {"kind": "checkpoint", "model": mc.to_dict()}
    if tc is not None:
        cfg["train"] = asdict(tc)
        cfg["asr_frontend"] = tc.asr_frontend
        cfg["smoothing_len"] = tc.smoothing_len
    cfg.update(extra)
    return cfg


def save_checkpoint(path, config: dict, params: Parameters, opt: OptimizerState | None = None):
    arrays = dict(params)
    if opt is not None:
        arrays.update({checkpoint.ADAM_M_PREFIX + k: v for k, v in opt.m.items()})
        arrays.update({checkpoint.ADAM_V_PREFIX + k: v for k, v in opt.v.items()})
        config = {**config, "adam_step": opt.step}
    return checkpoint.save(path, config, arrays)


def average_checkpoints(paths) -> tuple[dict, Parameters]:
    """Arithmetic mean of each parameter array over ``paths``.

    Returns ``(model_config_dict_of_first, averaged_params)``.
    """
    paths = list(paths)
    if not paths:
        raise ValueError("need at least one checkpoint to average")
    first = checkpoint.load(paths[0])
    total = {k: v.astype(np.float64) for k, v in first.params().items()}
    for path in paths[1:]:
        c = checkpoint.load(path)
        if c.config.get("model") != first.config.get("model"):
            raise ValueError(f"{path}: model config differs from {paths[0]}")
        p = c.params()
        if p.keys() != total.keys():
            raise ValueError(f"{path}: parameter names differ from {paths[0]}")
        for k in total:
            total[k] += p[k]
    return first.config, {k: v / len(paths) for k, v in total.items()}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def crop(x: np.ndarray, length: int, offset: int) -> np.ndarray:
    seg = x[offset : offset + length]
    if seg.size < length:
        seg = np.pad(seg, (0, length - seg.size))
    return seg


@dataclass
class Dataset:
    """Loaded (noisy, target) waveform pairs."""

    noisy: list
    target: list


def load_split(manifest, target: str = "direct") -> Dataset:
    from .wavio import read_wav

    noisy, tgt = [], []
    for e in manifest.entries:
        noisy.append(read_wav(manifest.resolve(e.noisy)))
        tgt.append(read_wav(manifest.resolve(e.direct if target == "direct" else e.clean)))
    if not noisy:
        raise ValueError(f"manifest {manifest.path} has no entries")
    return Dataset(noisy, tgt)


def dataset_global_mean(data: Dataset, frontend: FrontEnd, seed: int) -> float:
    """Mean noisy log-Mel over the set, after the same peak normalization
    used in training (gain drawn with a fixed per-utterance seed)."""
    from .dsp import peak_normalize

    mels = [frontend.logmel(peak_normalize(a, rng_seed=[seed, i])[0]) for i, a in enumerate(data.noisy)]
    return compute_global_mean(mels)


def eval_features(data: Dataset, mc: ModelConfig, frontend: FrontEnd, global_mean: float, tc: TrainConfig):
    feats = []
    for i, (n, t) in enumerate(zip(data.noisy, data.target)):
        feats.append(
            training_pair(n, t, mc.norm_mode, frontend, [tc.seed, 7, i], global_mean, tc.smoothing_len)
        )
    return feats


def evaluate_mse(mc: ModelConfig, params: Parameters, feats) -> tuple[float, float]:
    """Mean per-utterance (enhanced, unprocessed) log-Mel MSE."""
    enh, unp = [], []
    for y, x in feats:
        pred = forward(mc, params, frame_context(y, mc.context))
        enh.append(mse_loss(pred, x))
        unp.append(mse_loss(y, x))
    return float(np.mean(enh)), float(np.mean(unp))


def _epoch_batches(data: Dataset, mc, frontend, global_mean, tc: TrainConfig, epoch: int):
    rng = np.random.default_rng([tc.seed, epoch])
    seg_len = int(round(tc.segment_seconds * data.noisy[0].sample_rate))
    order = rng.permutation(len(data.noisy))
    for start in range(0, len(order), tc.batch_size):
        ys, xs = [], []
        for idx in order[start : start + tc.batch_size]:
            noisy, target = data.noisy[idx], data.target[idx]
            span = max(len(noisy) - seg_len, 0)
            offset = int(rng.integers(0, span + 1))
            n = type(noisy)(crop(noisy.samples, seg_len, offset), noisy.sample_rate)
            t = type(target)(crop(target.samples, seg_len, offset), target.sample_rate)
            gain_seed = int(rng.integers(2**31))
            y, x = training_pair(n, t, mc.norm_mode, frontend, gain_seed, global_mean, tc.smoothing_len)
            ys.append(y)
            xs.append(x)
        yield np.stack(ys), np.stack(xs)


def train_step(mc, params, opt, y_batch, x_batch, lr, tc: TrainConfig):
    framed = frame_context(y_batch, mc.context)
    loss, grads = backward(mc, params, framed, x_batch)
    if not math.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss {loss}")
    grads = clip_gradients(grads, tc.grad_clip)
    params, opt = adam_step(params, grads, opt, lr, tc.beta1, tc.beta2, tc.eps)
    return loss, params, opt


def fit_arrays(mc: ModelConfig, inputs: np.ndarray, targets: np.ndarray, steps: int, lr: float, seed: int = 0,
               batch_size: int = 4, grad_clip: float = 5.0):
    """Plain Adam on fixed (B, T, F) arrays; returns (params, per-step losses)."""
    params = init_parameters(mc, seed)
    opt = OptimizerState.zeros_like(params)
    tc = TrainConfig(epochs=1, warmup_epochs=0, grad_clip=grad_clip, lr_peak=max(lr, 1e-4), lr_init=0.0, lr_final=0.0)
    rng = np.random.default_rng(seed)
    losses = []
    for _ in range(steps):
        idx = rng.choice(len(inputs), size=min(batch_size, len(inputs)), replace=False)
        loss, params, opt = train_step(mc, params, opt, inputs[idx], targets[idx], lr, tc)
        losses.append(loss)
    return params, losses


@dataclass
class TrainResult:
    out_dir: Path
    checkpoints: list = field(default_factory=list)
    log_path: Path | None = None
    averaged: Path | None = None
    history: list = field(default_factory=list)  # (epoch, lr, train_mse, val_mse)
    unprocessed_val_mse: float | None = None
    global_mean: float = 0.0


def train(tc: TrainConfig, mc: ModelConfig, corpus_dir, out_dir, params: Parameters | None = None) -> TrainResult:
    """Train on ``corpus_dir/train.tsv``, validating on ``corpus_dir/val.tsv``
    after every epoch. Writes one checkpoint per epoch, an append-only loss
    log and, when ``average_last_k`` > 0, the averaged last-k checkpoint."""
    from .synthdata import read_manifest

    corpus_dir, out_dir = Path(corpus_dir), Path(out_dir)
    train_data = load_split(read_manifest(corpus_dir / "train.tsv"), tc.target)
    val_path = corpus_dir / "val.tsv"
    val_data = load_split(read_manifest(val_path), tc.target) if val_path.exists() else None

    frontend = FrontEnd.create(mc.f_mel, asr=tc.asr_frontend)
    global_mean = dataset_global_mean(train_data, frontend, tc.seed) if mc.norm_mode is NormMode.ONLINE_RECURSIVE else 0.0
    val_feats = eval_features(val_data, mc, frontend, global_mean, tc) if val_data else None

    if params is None:
        params = init_parameters(mc, tc.seed)
        # start the output at the average target level; the LSTM-bounded
        # head would otherwise spend most of a short run moving its bias
        train_feats = eval_features(train_data, mc, frontend, global_mean, tc)
        params["output.bias"][:] = np.mean([x.mean() for _, x in train_feats])
    opt = OptimizerState.zeros_like(params)
    out_dir.mkdir(parents=True, exist_ok=True)
    result = TrainResult(out_dir, log_path=out_dir / "loss.log", global_mean=global_mean)
    result.log_path.write_text("")
    meta = checkpoint_config(mc, tc, global_mean=global_mean)

    for epoch in range(tc.epochs):
        lr = lr_at(epoch, tc)
        losses = []
        for y, x in _epoch_batches(train_data, mc, frontend, global_mean, tc, epoch):
            loss, params, opt = train_step(mc, params, opt, y, x, lr, tc)
            losses.append(loss)
        train_mse = float(np.mean(losses))
        if val_feats:
            val_mse, result.unprocessed_val_mse = evaluate_mse(mc, params, val_feats)
        else:
            val_mse = float("nan")
        result.history.append((epoch, lr, train_mse, val_mse))
        with result.log_path.open("a", encoding="utf-8") as fh:
            fh.write(f"{epoch}\t{lr:.9g}\t{train_mse:.9g}\t{val_mse:.9g}\n")
        path = save_checkpoint(out_dir / f"epoch_{epoch:04d}.mfsn", {**meta, "epoch": epoch}, params, opt)
        result.checkpoints.append(path)
        log.info("epoch %d lr %.3g train %.4f val %.4f", epoch, lr, train_mse, val_mse)

    if tc.average_last_k > 0:
        cfg, avg = average_checkpoints(result.checkpoints[-tc.average_last_k :])
        k = min(tc.average_last_k, len(result.checkpoints))
        result.averaged = checkpoint.save(out_dir / f"averaged_last{k}.mfsn", {**meta, "averaged": k}, avg)
    return result


def gradcheck(cfg: ModelConfig, params: Parameters, framed, target, h: float = 1e-5, floor: float = 1e-6,
              analytic: dict | None = None) -> dict:
    """Central finite differences against :func:`backward`, entry by entry.

    Returns ``{name: max relative error}`` with relative error
    ``|a - n| / max(|a|, |n|, floor)``. Params must be float64. ``analytic``
    substitutes precomputed gradients for the reverse-mode ones.
    """
    if analytic is None:
        _, analytic = backward(cfg, params, framed, target)
    target = np.asarray(target, dtype=np.float64)
    work = {k: v.copy() for k, v in params.items()}
    errors = {}
    for name, arr in work.items():
        worst = 0.0
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = mse_loss(forward(cfg, work, framed), target)
            arr[idx] = old - h
            down = mse_loss(forward(cfg, work, framed), target)
            arr[idx] = old
            num = (up - down) / (2 * h)
            a = analytic[name][idx]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
        errors[name] = worst
    return errors
