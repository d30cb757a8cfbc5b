"""Mel-FullSubNet forward computation in plain numpy.

Every affine map in the forward path goes through :func:`dense`, whose
per-row result does not depend on how many rows are batched together. A
plain 2-D BLAS matmul does not have that property (its kernels block rows
and round differently at the edges), and the streaming path relies on it to
be bit-identical to the batched forward.

Layouts: batched tensors are ``(B, T, F, C)``; recurrent sequences are
time-major ``(L, ..., C)`` with arbitrary batch axes in the middle.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .features import ContextConfig, FramedInput, NormMode

Parameters = dict  # name -> np.ndarray, insertion-ordered


def dense(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    # a stack of (1, K) @ (K, N) products: each row gets the same BLAS call
    # whatever the batch size. Contiguity keeps numpy off its non-BLAS loop.
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w)
    return (x[..., None, :] @ w)[..., 0, :]


def sigmoid(x):
    # tanh form: no overflow warnings, exact 0.5 at 0
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass(frozen=True)
class ModelConfig:
    f_mel: int = 80
    hidden_d: int = 192
    n_blocks: int = 3
    context: ContextConfig = field(default_factory=ContextConfig)
    mode: str = "online"
    fullband_hidden_per_dir: int = 96
    subband_hidden: int = 192
    norm_mode: NormMode | None = None  # None: recursive for online, gain for offline

    def __post_init__(self):
        if isinstance(self.context, dict):
            object.__setattr__(self, "context", ContextConfig(**self.context))
        if self.norm_mode is None:
            default = NormMode.ONLINE_RECURSIVE if self.mode == "online" else NormMode.OFFLINE_GAIN
            object.__setattr__(self, "norm_mode", default)
        object.__setattr__(self, "norm_mode", NormMode(self.norm_mode))
        self.validate()

    def validate(self):
        for name in ("f_mel", "hidden_d", "n_blocks", "fullband_hidden_per_dir", "subband_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.mode not in ("online", "offline"):
            raise ValueError(f"mode must be 'online' or 'offline', got {self.mode!r}")
        if 2 * self.fullband_hidden_per_dir != self.hidden_d:
            raise ValueError("full-band hidden size per direction must be hidden_d / 2")
        if self.mode == "online":
            if self.context.future_frames:
                raise ValueError("online mode requires future_frames = 0")
            if self.subband_hidden != self.hidden_d:
                raise ValueError("online sub-band LSTM must have subband_hidden = hidden_d")

    @property
    def online(self) -> bool:
        return self.mode == "online"

    @classmethod
    def full(cls, mode: str = "online", **overrides) -> "ModelConfig":
        """Full-size configuration: 80 mel bands, D=192, three blocks."""
        ctx = ContextConfig(15, 0 if mode == "online" else 15, 5, 5)
        return cls(context=ctx, mode=mode, **overrides)

    @classmethod
    def small(cls, hidden_d: int = 16, n_blocks: int = 1, mode: str = "online", f_mel: int = 80, **kw):
        """Reduced-width model for desk-scale training."""
        ctx = kw.pop("context", ContextConfig(15, 0 if mode == "online" else 15, 5, 5))
        return cls(
            f_mel=f_mel,
            hidden_d=hidden_d,
            n_blocks=n_blocks,
            context=ctx,
            mode=mode,
            fullband_hidden_per_dir=hidden_d // 2,
            subband_hidden=hidden_d,
            **kw,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["norm_mode"] = self.norm_mode.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{**d, "context": ContextConfig(**d["context"])})

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


def _lstm_shapes(prefix, din, hidden):
    return {f"{prefix}.weight": (din + hidden, 4 * hidden), f"{prefix}.bias": (4 * hidden,)}


def parameter_shapes(cfg: ModelConfig) -> dict:
    d, hf, hs = cfg.hidden_d, cfg.fullband_hidden_per_dir, cfg.subband_hidden
    shapes = {
        "embed_freq.weight": (cfg.context.n_time, d),
        "embed_freq.bias": (d,),
        "embed_time.weight": (cfg.context.n_freq, d),
        "embed_time.bias": (d,),
    }
    for k in range(cfg.n_blocks):
        p = f"blocks.{k}"
        shapes.update(_lstm_shapes(f"{p}.fullband.fwd", d, hf))
        shapes.update(_lstm_shapes(f"{p}.fullband.bwd", d, hf))
        shapes[f"{p}.gate.weight"] = (d, d)
        shapes[f"{p}.gate.bias"] = (d,)
        shapes.update(_lstm_shapes(f"{p}.subband.fwd", d, hs))
        if not cfg.online:
            shapes.update(_lstm_shapes(f"{p}.subband.bwd", d, hs))
            shapes[f"{p}.subband.proj.weight"] = (2 * hs, d)
            shapes[f"{p}.subband.proj.bias"] = (d,)
    shapes["output.weight"] = (d, 1)
    shapes["output.bias"] = (1,)
    return shapes


def param_count(cfg: ModelConfig) -> int:
    return int(sum(np.prod(s) for s in parameter_shapes(cfg).values()))


def init_parameters(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> Parameters:
    """Uniform(+-1/sqrt(fan_in)) weights; LSTM forget-gate biases offset by +1."""
    rng = np.random.default_rng(seed)
    shapes = parameter_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        weight_name = name.rsplit(".", 1)[0] + ".weight"
        fan_in = shapes[weight_name][0]
        bound = 1.0 / np.sqrt(fan_in)
        arr = rng.uniform(-bound, bound, size=shape)
        if name.endswith(".bias") and (".fullband." in name or ".subband.fwd" in name or ".subband.bwd" in name):
            h = shape[0] // 4
            arr[h : 2 * h] += 1.0
        params[name] = arr.astype(dtype)
    return params


def cast_parameters(params: Parameters, dtype) -> Parameters:
    return {k: np.asarray(v, dtype=dtype) for k, v in params.items()}


def check_parameters(cfg: ModelConfig, params: Parameters):
    shapes = parameter_shapes(cfg)
    if set(shapes) != set(params):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ValueError(f"parameter names do not match config (missing {missing}, unexpected {extra})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ValueError(f"{name}: expected shape {shape}, got {params[name].shape}")


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------


@dataclass
class LSTMCache:
    x: np.ndarray
    h0: np.ndarray
    c0: np.ndarray
    gates: np.ndarray  # post-activation i, f, g, o stacked on the last axis
    cells: np.ndarray
    tanh_cells: np.ndarray
    hidden: np.ndarray
    reverse: bool


def lstm_sequence(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    h0: np.ndarray | None = None,
    c0: np.ndarray | None = None,
    reverse: bool = False,
    return_cache: bool = False,
):
    """Run an LSTM over axis 0 of ``x`` (shape ``(L, ..., Din)``).

    ``weight`` stacks the input and recurrent matrices, shape
    ``(Din + H, 4H)`` with gate order input, forget, candidate, output.
    With ``reverse=True`` the recurrence runs from the last step to the
    first; outputs stay aligned with the input positions.

    Returns ``(outputs, (h, c))`` or, with ``return_cache``,
    ``(outputs, (h, c), cache)``.
    """
    hidden = bias.shape[0] // 4
    din = weight.shape[0] - hidden
    if x.shape[-1] != din:
        raise ValueError(f"LSTM expects input width {din}, got {x.shape[-1]}")
    wx, wh = weight[:din], weight[din:]
    batch_shape = x.shape[1:-1]
    h = np.zeros(batch_shape + (hidden,), x.dtype) if h0 is None else h0
    c = np.zeros(batch_shape + (hidden,), x.dtype) if c0 is None else c0
    h_init, c_init = h, c

    steps = x.shape[0]
    gx = dense(x, wx) + bias
    out = np.empty(x.shape[:-1] + (hidden,), dtype=gx.dtype)
    if return_cache:
        gates = np.empty(gx.shape, dtype=gx.dtype)
        cells = np.empty_like(out)
        tanh_cells = np.empty_like(out)

    for t in range(steps - 1, -1, -1) if reverse else range(steps):
        a = gx[t] + dense(h, wh)
        i = sigmoid(a[..., :hidden])
        f = sigmoid(a[..., hidden : 2 * hidden])
        g = np.tanh(a[..., 2 * hidden : 3 * hidden])
        o = sigmoid(a[..., 3 * hidden :])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        out[t] = h
        if return_cache:
            gates[t] = np.concatenate([i, f, g, o], axis=-1)
            cells[t] = c
            tanh_cells[t] = tc

    if return_cache:
        cache = LSTMCache(x, h_init, c_init, gates, cells, tanh_cells, out, reverse)
        return out, (h, c), cache
    return out, (h, c)


def bilstm_sequence(x, fwd_weight, fwd_bias, bwd_weight, bwd_bias):
    """Concatenate forward outputs with (position-aligned) backward outputs."""
    fwd, _ = lstm_sequence(x, fwd_weight, fwd_bias)
    bwd, _ = lstm_sequence(x, bwd_weight, bwd_bias, reverse=True)
    return np.concatenate([fwd, bwd], axis=-1)


def _shift_previous(seq: np.ndarray, init: np.ndarray, reverse: bool) -> np.ndarray:
    """Value entering step t: seq[t-1] (or seq[t+1] when reversed), init at the start."""
    prev = np.empty_like(seq)
    if reverse:
        prev[:-1] = seq[1:]
        prev[-1] = init
    else:
        prev[1:] = seq[:-1]
        prev[0] = init
    return prev


def lstm_sequence_backward(d_out: np.ndarray, cache: LSTMCache, weight: np.ndarray):
    """Reverse-mode pass through :func:`lstm_sequence`.

    Returns ``(d_x, d_weight, d_bias)``.
    """
    hidden = cache.hidden.shape[-1]
    din = cache.x.shape[-1]
    wh = weight[din:]
    steps = d_out.shape[0]
    d_gates = np.empty(cache.gates.shape, dtype=d_out.dtype)
    c_prev_seq = _shift_previous(cache.cells, cache.c0, cache.reverse)

    dh_next = np.zeros_like(d_out[0])
    dc_next = np.zeros_like(d_out[0])
    for t in range(steps) if cache.reverse else range(steps - 1, -1, -1):
        gt = cache.gates[t]
        i = gt[..., :hidden]
        f = gt[..., hidden : 2 * hidden]
        g = gt[..., 2 * hidden : 3 * hidden]
        o = gt[..., 3 * hidden :]
        tc = cache.tanh_cells[t]
        dh = d_out[t] + dh_next
        dc = dc_next + dh * o * (1.0 - tc * tc)
        da = d_gates[t]
        da[..., :hidden] = dc * g * i * (1.0 - i)
        da[..., hidden : 2 * hidden] = dc * c_prev_seq[t] * f * (1.0 - f)
        da[..., 2 * hidden : 3 * hidden] = dc * i * (1.0 - g * g)
        da[..., 3 * hidden :] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = da @ wh.T

    h_prev_seq = _shift_previous(cache.hidden, cache.h0, cache.reverse)
    axes = tuple(range(d_out.ndim - 1))
    d_wx = np.tensordot(cache.x, d_gates, axes=(axes, axes))
    d_wh = np.tensordot(h_prev_seq, d_gates, axes=(axes, axes))
    d_bias = d_gates.sum(axis=axes)
    d_x = d_gates @ weight[:din].T
    return d_x, np.concatenate([d_wx, d_wh], axis=0), d_bias


# ---------------------------------------------------------------------------
# Gate
# ---------------------------------------------------------------------------


def gate(h: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Output gating: sigmoid(h W + b) * h, elementwise over the last axis."""
    return sigmoid(dense(h, weight) + bias) * h


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------


def _check_finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite values in {name}")


def _as_batched(framed: FramedInput, cfg: ModelConfig, dtype):
    af = np.asarray(framed.along_freq, dtype=dtype)
    at = np.asarray(framed.along_time, dtype=dtype)
    squeeze = af.ndim == 3
    if squeeze:
        af, at = af[None], at[None]
    if af.ndim != 4 or at.ndim != 4:
        raise ValueError(f"framed input must be (T, F, N) or (B, T, F, N), got {af.shape}")
    expect_f = (cfg.f_mel, cfg.context.n_time)
    expect_t = (cfg.f_mel, cfg.context.n_freq)
    if af.shape[2:] != expect_f or at.shape[2:] != expect_t or af.shape[:2] != at.shape[:2]:
        raise ValueError(
            f"framed input shapes {af.shape} / {at.shape} do not match config "
            f"(F={cfg.f_mel}, n_time={cfg.context.n_time}, n_freq={cfg.context.n_freq})"
        )
    return af, at, squeeze


def _fullband(z, params, prefix, caches):
    """Bidirectional recurrence along frequency, independently per frame."""
    zf = np.ascontiguousarray(np.moveaxis(z, 2, 0))  # (F, B, T, D)
    keep = caches is not None
    fw = lstm_sequence(zf, params[f"{prefix}.fwd.weight"], params[f"{prefix}.fwd.bias"], return_cache=keep)
    bw = lstm_sequence(
        zf, params[f"{prefix}.bwd.weight"], params[f"{prefix}.bwd.bias"], reverse=True, return_cache=keep
    )
    if keep:
        caches["fullband.fwd"], caches["fullband.bwd"] = fw[2], bw[2]
    h = np.concatenate([fw[0], bw[0]], axis=-1)
    return np.ascontiguousarray(np.moveaxis(h, 0, 2))


def _subband(w, params, prefix, online, caches, state=None):
    """Recurrence along time, independently per mel band.

    ``state`` (online only) is the ``(h, c)`` pair carried across calls.
    """
    wt = np.ascontiguousarray(np.moveaxis(w, 1, 0))  # (T, B, F, D)
    keep = caches is not None
    h0, c0 = state if state is not None else (None, None)
    fw = lstm_sequence(
        wt, params[f"{prefix}.fwd.weight"], params[f"{prefix}.fwd.bias"], h0, c0, return_cache=keep
    )
    new_state = fw[1]
    if online:
        s = fw[0]
    else:
        bw = lstm_sequence(
            wt, params[f"{prefix}.bwd.weight"], params[f"{prefix}.bwd.bias"], reverse=True, return_cache=keep
        )
        cat = np.concatenate([fw[0], bw[0]], axis=-1)
        s = dense(cat, params[f"{prefix}.proj.weight"]) + params[f"{prefix}.proj.bias"]
        if keep:
            caches["subband.bwd"] = bw[2]
            caches["subband.cat"] = cat
    if keep:
        caches["subband.fwd"] = fw[2]
    return np.ascontiguousarray(np.moveaxis(s, 0, 1)), new_state


def _block(cfg, params, k, ef, et, s_prev, caches=None, sub_state=None):
    p = f"blocks.{k}"
    z = ef if s_prev is None else ef + s_prev
    h = _fullband(z, params, f"{p}.fullband", caches)
    _check_finite(f"{p}.fullband", h)
    a = dense(h, params[f"{p}.gate.weight"]) + params[f"{p}.gate.bias"]
    sg = sigmoid(a)
    g = sg * h
    w = et + g
    s, new_state = _subband(w, params, f"{p}.subband", cfg.online, caches, sub_state)
    _check_finite(f"{p}.subband", s)
    if caches is not None:
        caches["h"], caches["sg"] = h, sg
    return s, new_state


def _embed(params, af, at):
    ef = dense(af, params["embed_freq.weight"]) + params["embed_freq.bias"]
    et = dense(at, params["embed_time.weight"]) + params["embed_time.bias"]
    return ef, et


def _head(params, s):
    return dense(s, params["output.weight"])[..., 0] + params["output.bias"][0]


def forward(cfg: ModelConfig, params: Parameters, framed: FramedInput, return_cache: bool = False):
    """Enhanced log-Mel spectrogram, shape ``(T, F)`` (or ``(B, T, F)``).

    Computation runs in the parameters' dtype.
    """
    dtype = params["output.weight"].dtype
    af, at, squeeze = _as_batched(framed, cfg, dtype)
    ef, et = _embed(params, af, at)
    block_caches = [] if return_cache else None
    s = None
    for k in range(cfg.n_blocks):
        caches = {} if return_cache else None
        s, _ = _block(cfg, params, k, ef, et, s, caches)
        if return_cache:
            block_caches.append(caches)
    out = _head(params, s)
    _check_finite("output", out)
    if squeeze:
        out = out[0]
    if return_cache:
        return out, {"af": af, "at": at, "blocks": block_caches, "s_last": s, "squeeze": squeeze}
    return out


# ---------------------------------------------------------------------------
# Streaming
# ---------------------------------------------------------------------------


class StreamState:
    """Per-stream buffers: the last ``past_frames`` input frames and the
    sub-band (h, c) pair of every block. Fixed size; nothing grows with the
    stream length."""

    def __init__(self, cfg: ModelConfig, dtype=np.float64):
        self.history = np.zeros((cfg.context.past_frames, cfg.f_mel), dtype=dtype)
        shape = (1, cfg.f_mel, cfg.subband_hidden)
        self.subband = [(np.zeros(shape, dtype), np.zeros(shape, dtype)) for _ in range(cfg.n_blocks)]
        self.frames_seen = 0

    def push_history(self, frame):
        if len(self.history):
            self.history[:-1] = self.history[1:]
            self.history[-1] = frame


def _single_frame_context(cfg: ModelConfig, history: np.ndarray, frame: np.ndarray):
    ctx = cfg.context
    af = np.concatenate([history, frame[None]], axis=0).T  # (F, n_time)
    padded = np.pad(frame, (ctx.lower_freqs, ctx.upper_freqs))
    at = np.lib.stride_tricks.sliding_window_view(padded, ctx.n_freq)  # (F, n_freq)
    return np.ascontiguousarray(af)[None, None], np.ascontiguousarray(at)[None, None]


def forward_streaming(cfg: ModelConfig, params: Parameters, frame: np.ndarray, state: StreamState | None = None):
    """Enhance one (already normalized) frame of an online model.

    Returns ``(enhanced_frame, state)``; ``state`` is updated in place and
    must not be shared between streams.
    """
    if not cfg.online:
        raise ValueError("forward_streaming requires an online (causal) model config")
    dtype = params["output.weight"].dtype
    if state is None:
        state = StreamState(cfg, dtype)
    frame = np.asarray(frame, dtype=dtype)
    if frame.shape != (cfg.f_mel,):
        raise ValueError(f"expected a frame of {cfg.f_mel} mel bands, got shape {frame.shape}")

    af, at = _single_frame_context(cfg, state.history, frame)
    ef, et = _embed(params, af, at)
    s = None
    for k in range(cfg.n_blocks):
        s, new_state = _block(cfg, params, k, ef, et, s, None, state.subband[k])
        state.subband[k] = new_state
    out = _head(params, s)[0, 0]
    state.push_history(frame)
    state.frames_seen += 1
    return out, state


def stream_utterance(cfg: ModelConfig, params: Parameters, frames: np.ndarray) -> np.ndarray:
    state = None
    outs = []
    for frame in frames:
        y, state = forward_streaming(cfg, params, frame, state)
        outs.append(y)
    return np.stack(outs)
