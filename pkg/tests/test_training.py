import numpy as np
import pytest

from melstream import checkpoint
from melstream.features import ContextConfig, frame_context
from melstream.model import ModelConfig, forward, init_parameters
from melstream.training import (
    OptimizerState,
    TrainConfig,
    adam_step,
    average_checkpoints,
    backward,
    clip_gradients,
    fit_arrays,
    global_norm,
    gradcheck,
    lr_at,
    mse_loss,
    save_checkpoint,
    train,
)

TINY = ModelConfig.small(hidden_d=6, f_mel=4, context=ContextConfig(2, 0, 1, 1))
TINY_OFF = ModelConfig.small(hidden_d=6, f_mel=4, mode="offline", context=ContextConfig(2, 1, 1, 1))


def tiny_problem(cfg, seed=0):
    rng = np.random.default_rng(seed)
    return init_parameters(cfg, seed), frame_context(rng.standard_normal((3, 4)), cfg.context), rng.standard_normal((3, 4))


class TestLoss:
    def test_equal_is_zero(self, rng):
        x = rng.standard_normal((3, 4))
        assert mse_loss(x, x) == 0.0

    def test_constant_offset(self, rng):
        x = rng.standard_normal((3, 4))
        assert mse_loss(x + 2, x) == pytest.approx(4.0, abs=1e-12)

    def test_flat_loop(self, frozen):
        ref = frozen["mse_pair"]
        assert mse_loss(np.array(ref["a"]), np.array(ref["b"])) == pytest.approx(ref["mse"], abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mse_loss(np.zeros((2, 3)), np.zeros((3, 2)))


class TestBackward:
    def test_zero_residual_gives_zero_gradient(self):
        params, framed, _ = tiny_problem(TINY)
        target = forward(TINY, params, framed)
        loss, grads = backward(TINY, params, framed, target)
        assert loss == 0.0
        assert all(not np.any(g) for g in grads.values())

    @pytest.mark.parametrize("cfg", [TINY, TINY_OFF], ids=["online", "offline"])
    def test_finite_differences(self, cfg):
        params, framed, target = tiny_problem(cfg, 3)
        errors = gradcheck(cfg, params, framed, target, h=1e-5)
        assert max(errors.values()) < 1e-4, errors

    def test_two_blocks(self):
        cfg = ModelConfig.small(hidden_d=4, f_mel=3, n_blocks=2, context=ContextConfig(1, 0, 1, 0))
        rng = np.random.default_rng(9)
        params = init_parameters(cfg, 9)
        errors = gradcheck(cfg, params, frame_context(rng.standard_normal((3, 3)), cfg.context), rng.standard_normal((3, 3)))
        assert max(errors.values()) < 1e-4

    def test_head_bias_closed_form(self):
        params, framed, target = tiny_problem(TINY, 4)
        pred = forward(TINY, params, framed)
        _, grads = backward(TINY, params, framed, target)
        assert grads["output.bias"][0] == pytest.approx(2 * np.mean(pred - target), abs=1e-10)

    def test_corrupted_gradient_detected(self):
        params, framed, target = tiny_problem(TINY, 5)
        _, grads = backward(TINY, params, framed, target)
        grads["blocks.0.gate.weight"] = grads["blocks.0.gate.weight"] * 1.01
        assert gradcheck(TINY, params, framed, target, analytic=grads)["blocks.0.gate.weight"] > 1e-4


class TestAdam:
    def test_zero_gradient_is_noop(self):
        p = {"w": np.array([1.0, -2.0])}
        new, _ = adam_step(p, {"w": np.zeros(2)}, OptimizerState.zeros_like(p), 0.1)
        assert np.array_equal(new["w"], p["w"])

    def test_first_step_magnitude_is_lr(self):
        p = {"w": np.array([0.5])}
        new, _ = adam_step(p, {"w": np.array([1.0])}, OptimizerState.zeros_like(p), 1e-3)
        assert p["w"][0] - new["w"][0] == pytest.approx(1e-3, rel=1e-7)

    def test_stateful(self):
        # gradient of w**2 taken at the current point; a constant gradient
        # would make both paths move by exactly 2 * lr
        p = {"w": np.array([0.5, -1.5])}
        once, _ = adam_step(p, {"w": 2 * p["w"]}, OptimizerState.zeros_like(p), 2e-1)
        a, opt = adam_step(p, {"w": 2 * p["w"]}, OptimizerState.zeros_like(p), 1e-1)
        twice, opt = adam_step(a, {"w": 2 * a["w"]}, opt, 1e-1)
        assert opt.step == 2
        assert not np.allclose(twice["w"], once["w"], rtol=0, atol=1e-6)

    def test_clipping(self):
        g = {"a": np.array([3.0]), "b": np.array([4.0])}
        clipped = clip_gradients(g, 1.0)
        assert global_norm(clipped) == pytest.approx(1.0)
        assert clip_gradients(g, 10.0) is g


class TestSchedule:
    @pytest.mark.parametrize("epoch", [0, 15, 30, 115, 200])
    def test_reference(self, frozen, epoch):
        assert lr_at(epoch, TrainConfig()) == pytest.approx(frozen["lr"][str(epoch)], rel=1e-12)

    def test_published_anchors(self):
        tc = TrainConfig()
        assert lr_at(0, tc) == pytest.approx(1e-4)
        assert lr_at(30, tc) == pytest.approx(1e-3)
        assert lr_at(200, tc) == pytest.approx(1e-4)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            lr_at(201, TrainConfig())

    def test_bad_warmup(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=10, warmup_epochs=10)


class TestAveraging:
    def _write(self, tmp_path, name, params, cfg=TINY):
        return save_checkpoint(tmp_path / name, {"model": cfg.to_dict()}, params)

    def test_identical(self, tmp_path):
        p = init_parameters(TINY, 0)
        paths = [self._write(tmp_path, f"{i}.mfsn", p) for i in range(3)]
        _, avg = average_checkpoints(paths)
        stored = checkpoint.load(paths[0]).params()
        assert all(np.array_equal(avg[k], stored[k]) for k in p)

    def test_mean_of_three(self, tmp_path):
        ps = [init_parameters(TINY, s) for s in range(3)]
        paths = [self._write(tmp_path, f"{i}.mfsn", p) for i, p in enumerate(ps)]
        _, avg = average_checkpoints(paths)
        stored = [checkpoint.load(p).params() for p in paths]
        for k in ps[0]:
            cols = [[float(v) for v in s[k].ravel()] for s in stored]
            ref = [(cols[0][i] + cols[1][i] + cols[2][i]) / 3 for i in range(len(cols[0]))]
            np.testing.assert_allclose(avg[k].ravel(), ref, rtol=0, atol=1e-12)

    def test_config_mismatch(self, tmp_path):
        a = self._write(tmp_path, "a.mfsn", init_parameters(TINY, 0))
        b = self._write(tmp_path, "b.mfsn", init_parameters(TINY_OFF, 0), TINY_OFF)
        with pytest.raises(ValueError):
            average_checkpoints([a, b])


class TestFit:
    def test_identity_task(self):
        cfg = ModelConfig.small(hidden_d=8, f_mel=8, context=ContextConfig(3, 0, 1, 1))
        y = np.random.default_rng(0).standard_normal((16, 20, 8))
        _, losses = fit_arrays(cfg, y, y, steps=200, lr=1e-2, seed=0)
        assert losses[-1] < 0.1 * losses[0]


class TestTrainLoop:
    def test_outputs_and_determinism(self, small_corpus, tmp_path):
        mc = ModelConfig.small(hidden_d=4, f_mel=80)
        tc = TrainConfig(epochs=2, warmup_epochs=1, batch_size=4, segment_seconds=0.5, average_last_k=2)
        a = train(tc, mc, small_corpus, tmp_path / "a")
        b = train(tc, mc, small_corpus, tmp_path / "b")
        assert [p.name for p in a.checkpoints] == ["epoch_0000.mfsn", "epoch_0001.mfsn"]
        assert a.averaged.name == "averaged_last2.mfsn"
        assert len(a.log_path.read_text().splitlines()) == 2
        assert a.log_path.read_bytes() == b.log_path.read_bytes()
        for p, q in zip(a.checkpoints + [a.averaged], b.checkpoints + [b.averaged]):
            assert p.read_bytes() == q.read_bytes()

    def test_resume_moments_saved(self, small_corpus, tmp_path):
        mc = ModelConfig.small(hidden_d=4, f_mel=80)
        tc = TrainConfig(epochs=1, warmup_epochs=0, batch_size=8, segment_seconds=0.5, average_last_k=0)
        res = train(tc, mc, small_corpus, tmp_path)
        m, v = checkpoint.load(res.checkpoints[0]).moments()
        assert m.keys() == v.keys() == init_parameters(mc, 0).keys()
        assert res.averaged is None
