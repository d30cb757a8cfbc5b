import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from melstream.dsp import AudioBuffer
from melstream.features import (
    ContextConfig,
    NormState,
    asr_normalize,
    compute_global_mean,
    frame_context,
    normalize_offline_pair,
    online_normalize,
    online_normalize_step,
    smoothing_weight,
)

finite = st.floats(-50, 50, allow_nan=False)


class TestFrameContext:
    def test_first_frame_has_leading_zeros(self, rng):
        y = rng.standard_normal((20, 6))
        fi = frame_context(y, ContextConfig(15, 0, 5, 5))
        assert fi.along_freq.shape == (20, 6, 16)
        assert np.all(fi.along_freq[0, :, :15] == 0)
        np.testing.assert_array_equal(fi.along_freq[0, :, 15], y[0])

    def test_identity_context(self, rng):
        y = rng.standard_normal((7, 5))
        fi = frame_context(y, ContextConfig(0, 0, 0, 0))
        np.testing.assert_array_equal(fi.along_freq, y[..., None])
        np.testing.assert_array_equal(fi.along_time, y[..., None])

    def test_interior_matches_gather(self, rng):
        y = rng.standard_normal((50, 80))
        fi = frame_context(y, ContextConfig(15, 15, 5, 5))
        t, f = 20, 40
        np.testing.assert_array_equal(fi.along_freq[t, f], [y[t + j, f] for j in range(-15, 16)])
        np.testing.assert_array_equal(fi.along_time[t, f], [y[t, f + j] for j in range(-5, 6)])

    def test_band_edges_zero_padded(self, rng):
        y = rng.standard_normal((4, 6))
        fi = frame_context(y, ContextConfig(0, 0, 2, 2))
        np.testing.assert_array_equal(fi.along_time[1, 0], [0, 0, y[1, 0], y[1, 1], y[1, 2]])

    def test_batched_matches_single(self, rng):
        y = rng.standard_normal((3, 9, 6))
        cfg = ContextConfig(2, 1, 1, 2)
        batch = frame_context(y, cfg)
        for b in range(3):
            np.testing.assert_array_equal(batch.along_freq[b], frame_context(y[b], cfg).along_freq)

    def test_negative_context_rejected(self):
        with pytest.raises(ValueError):
            ContextConfig(-1, 0, 0, 0)


class TestOnlineNormalize:
    def test_alpha(self, frozen):
        assert smoothing_weight(199) == frozen["alpha_199"] == 0.99

    @given(finite, finite, st.integers(1, 40))
    def test_constant_input_gives_global_mean(self, c, m, t):
        y = np.full((t, 7), c)
        out, mus, _ = online_normalize(y, NormState.from_length(200, m))
        assert np.all(mus == c)
        assert np.all(out == m)

    def test_unrolled_recursion(self, frozen):
        y = np.array(frozen["mu_input"])
        state = NormState(alpha=0.9, global_mean=0.0)
        _, mus, _ = online_normalize(y, state)
        np.testing.assert_allclose(mus, frozen["mu_unrolled"], rtol=0, atol=1e-12)

    def test_step_matches_batch(self, rng):
        y = rng.standard_normal((30, 8))
        state = NormState.from_length(50, 1.5)
        batch, _, _ = online_normalize(y, state)
        for t in range(30):
            out, state = online_normalize_step(y[t], state)
            assert np.array_equal(out, batch[t])

    def test_causal(self, rng):
        y = rng.standard_normal((20, 4))
        z = y.copy()
        z[10:] += 100
        a, _, _ = online_normalize(y, NormState.from_length())
        b, _, _ = online_normalize(z, NormState.from_length())
        assert np.array_equal(a[:10], b[:10])

    def test_nan_rejected(self):
        with pytest.raises(ValueError):
            online_normalize_step(np.array([0.0, np.nan]), NormState.from_length())

    def test_short_length_rejected(self):
        with pytest.raises(ValueError):
            smoothing_weight(0.5)


class TestOfflinePair:
    def test_pair_gain(self, frozen):
        noisy, clean = np.zeros(50), np.zeros(50)
        noisy[5], clean[9] = 0.25, 0.1
        a, b = normalize_offline_pair(AudioBuffer(noisy), AudioBuffer(clean), target_dbfs=-6.0)
        g = frozen["pair_gain_025_m6"]
        assert a.samples[5] == pytest.approx(0.25 * g, rel=1e-12)
        assert b.samples[9] == pytest.approx(0.1 * g, rel=1e-12)
        assert b.samples[9] == pytest.approx(0.2005, abs=1e-4)

    def test_equal_inputs_stay_equal(self, rng):
        x = AudioBuffer(rng.standard_normal(64))
        a, b = normalize_offline_pair(x, x, 3)
        assert np.array_equal(a.samples, b.samples)

    def test_deterministic(self, rng):
        x, y = AudioBuffer(rng.standard_normal(64)), AudioBuffer(rng.standard_normal(64))
        p, q = normalize_offline_pair(x, y, 5), normalize_offline_pair(x, y, 5)
        assert np.array_equal(p[0].samples, q[0].samples) and np.array_equal(p[1].samples, q[1].samples)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            normalize_offline_pair(AudioBuffer(np.ones(4)), AudioBuffer(np.ones(5)))


class TestAsrNormalize:
    def test_hand_example(self, frozen):
        np.testing.assert_array_equal(asr_normalize(np.array([[1.0, 3.0], [3.0, 5.0]])), frozen["asr_2x2"])

    @settings(max_examples=30)
    @given(arrays(np.float64, st.tuples(st.integers(1, 30), st.integers(1, 10)), elements=finite))
    def test_zero_column_means(self, y):
        assert np.all(np.abs(asr_normalize(y).mean(axis=0)) < 1e-12)

    def test_idempotent(self, rng):
        y = asr_normalize(rng.standard_normal((12, 5)))
        np.testing.assert_allclose(asr_normalize(y), y, atol=1e-15)


class TestGlobalMean:
    def test_single_constant(self):
        assert compute_global_mean([np.full((4, 3), 2.5)]) == 2.5

    def test_two_equal_sized(self):
        assert compute_global_mean([np.full((4, 3), 1.0), np.full((2, 6), 4.0)]) == pytest.approx(2.5)

    def test_matches_flat_mean(self, rng):
        parts = [rng.standard_normal((n, 80)) for n in (5, 9, 2)]
        flat = [v for p in parts for v in p.ravel().tolist()]
        assert compute_global_mean(parts) == pytest.approx(sum(flat) / len(flat), abs=1e-12)

    def test_empty(self):
        with pytest.raises(ValueError):
            compute_global_mean([])
