import numpy as np
import pytest

from melstream.features import ContextConfig, frame_context
from melstream.model import (
    ModelConfig,
    StreamState,
    bilstm_sequence,
    forward,
    forward_streaming,
    gate,
    init_parameters,
    lstm_sequence,
    param_count,
    parameter_shapes,
    stream_utterance,
)
from oracles import lstm_cell, tiny_params, tiny_shapes

TINY_ONLINE = ModelConfig.small(hidden_d=8, f_mel=4, context=ContextConfig(2, 0, 1, 1))
TINY_OFFLINE = ModelConfig.small(hidden_d=8, f_mel=4, mode="offline", context=ContextConfig(2, 1, 1, 1))
DESK = ModelConfig.small(hidden_d=8, f_mel=16, n_blocks=2)


class TestConfig:
    def test_zero_width_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig.small(hidden_d=0)

    def test_online_future_rejected(self):
        with pytest.raises(ValueError):
            ModelConfig.small(context=ContextConfig(15, 3, 5, 5))

    def test_dict_round_trip(self):
        cfg = ModelConfig.full("offline")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestParamCount:
    def test_reference_totals(self, frozen):
        assert param_count(ModelConfig.full("online")) == frozen["params_online"]
        assert param_count(ModelConfig.full("offline")) == frozen["params_offline"]

    @pytest.mark.parametrize("mode,published", [("online", 2.2e6), ("offline", 3.3e6)])
    def test_within_band_of_published(self, mode, published):
        n = param_count(ModelConfig.full(mode))
        assert abs(n - published) / published <= 0.40

    def test_blocks_additive(self):
        one = param_count(ModelConfig.full("online", n_blocks=1))
        two = param_count(ModelConfig.full("online", n_blocks=2))
        four = param_count(ModelConfig.full("online", n_blocks=4))
        assert four - two == 2 * (two - one) > 0


class TestInit:
    def test_deterministic(self):
        a, b = init_parameters(DESK, 5), init_parameters(DESK, 5)
        assert all(np.array_equal(a[k], b[k]) for k in a)

    def test_shapes(self):
        p = init_parameters(TINY_OFFLINE, 0)
        assert {k: v.shape for k, v in p.items()} == parameter_shapes(TINY_OFFLINE)


class TestLstm:
    def test_zero_weights_zero_output(self, rng):
        x = rng.standard_normal((5, 3, 4))
        out, _ = lstm_sequence(x, np.zeros((4 + 6, 24)), np.zeros(24))
        assert not np.any(out)

    def test_single_step_matches_cell(self, rng):
        w, b = rng.standard_normal((3 + 2, 8)), rng.standard_normal(8)
        x = rng.standard_normal((1, 3))
        out, (h, c) = lstm_sequence(x, w, b)
        ref_h, ref_c = lstm_cell(x[0].tolist(), [0, 0], [0, 0], w.tolist(), b.tolist())
        np.testing.assert_allclose(out[0], ref_h, atol=1e-12)
        np.testing.assert_allclose(c, ref_c, atol=1e-12)

    def test_bidirectional_palindrome_mirrors(self, rng):
        half = rng.standard_normal((4, 3))
        x = np.concatenate([half, half[::-1]])
        w, b = rng.standard_normal((3 + 5, 20)), rng.standard_normal(20)
        out = bilstm_sequence(x, w, b, w, b)
        np.testing.assert_allclose(out[:, :5], out[::-1, 5:], atol=1e-14)


class TestGate:
    def test_zero_params_halves(self, rng):
        h = rng.standard_normal((3, 6))
        assert np.array_equal(gate(h, np.zeros((6, 6)), np.zeros(6)), 0.5 * h)

    def test_saturated_passes_through(self, rng):
        h = rng.standard_normal((3, 6))
        np.testing.assert_allclose(gate(h, np.zeros((6, 6)), np.full(6, 50.0)), h, atol=1e-10)

    def test_matches_oracle(self, rng):
        h, w, b = rng.standard_normal((5, 4)), rng.standard_normal((4, 4)), rng.standard_normal(4)
        ref = h / (1 + np.exp(-(h @ w + b)))
        np.testing.assert_allclose(gate(h, w, b), ref, atol=1e-12)


class TestForward:
    @pytest.mark.parametrize("cfg,key", [(TINY_ONLINE, "tiny_online"), (TINY_OFFLINE, "tiny_offline")])
    def test_matches_reference(self, frozen, cfg, key):
        ref = frozen[key]
        c = cfg.context
        shapes = tiny_shapes(c.n_time, c.n_freq, 8, 8, cfg.online)
        assert shapes == parameter_shapes(cfg)
        params = tiny_params(shapes, ref["seed"])
        y = np.random.default_rng(ref["input_seed"]).standard_normal((3, 4))
        out = forward(cfg, params, frame_context(y, cfg.context))
        np.testing.assert_allclose(out, ref["output"], rtol=0, atol=1e-10)

    @pytest.mark.parametrize("t", [1, 2, 17])
    def test_shape(self, rng, t):
        y = rng.standard_normal((t, 16))
        assert forward(DESK, init_parameters(DESK, 0), frame_context(y, DESK.context)).shape == (t, 16)

    def test_appending_frames_keeps_prefix(self, rng):
        params = init_parameters(DESK, 1)
        y = rng.standard_normal((12, 16))
        a = forward(DESK, params, frame_context(y[:8], DESK.context))
        b = forward(DESK, params, frame_context(y, DESK.context))
        assert np.array_equal(a, b[:8])

    def test_batch_equals_single(self, rng):
        params = init_parameters(DESK, 1)
        y = rng.standard_normal((3, 10, 16))
        batch = forward(DESK, params, frame_context(y, DESK.context))
        for i in range(3):
            assert np.array_equal(batch[i], forward(DESK, params, frame_context(y[i], DESK.context)))

    def test_wrong_band_count(self, rng):
        with pytest.raises(ValueError):
            forward(DESK, init_parameters(DESK, 0), frame_context(rng.standard_normal((4, 8)), DESK.context))


class TestStreaming:
    @pytest.mark.parametrize("dtype", [np.float64, np.float32])
    def test_bit_identical_to_batch(self, rng, dtype):
        params = {k: v.astype(dtype) for k, v in init_parameters(DESK, 2).items()}
        y = rng.standard_normal((100, 16))
        batch = forward(DESK, params, frame_context(y, DESK.context))
        assert np.array_equal(stream_utterance(DESK, params, y), batch)

    def test_first_frame(self, rng):
        params = init_parameters(DESK, 3)
        y = rng.standard_normal((1, 16))
        out, _ = forward_streaming(DESK, params, y[0])
        assert np.array_equal(out, forward(DESK, params, frame_context(y, DESK.context))[0])

    def test_state_size_constant(self, rng):
        params = init_parameters(DESK, 3)
        state = StreamState(DESK)
        sizes = set()
        for frame in rng.standard_normal((40, 16)):
            _, state = forward_streaming(DESK, params, frame, state)
            sizes.add(state.history.nbytes + sum(h.nbytes + c.nbytes for h, c in state.subband))
        assert len(sizes) == 1 and state.frames_seen == 40

    def test_offline_refused(self):
        p = init_parameters(TINY_OFFLINE, 0)
        with pytest.raises(ValueError):
            forward_streaming(TINY_OFFLINE, p, np.zeros(4))
