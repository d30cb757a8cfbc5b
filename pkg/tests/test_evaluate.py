import math

import numpy as np
import pytest

from melstream.evaluate import causality_probe, logmel_mse_report, measure_rtf
from melstream.model import ModelConfig, init_parameters
from melstream.pipeline import Enhancer, training_pair
from melstream.synthdata import read_manifest
from melstream.wavio import read_wav

ONLINE = ModelConfig.small(hidden_d=8, f_mel=16, n_blocks=2)
OFFLINE = ModelConfig.small(hidden_d=8, f_mel=16, n_blocks=2, mode="offline")


class TestMseReport:
    def test_oracle_injection(self, online_ckpt, small_corpus):
        enh = Enhancer.load(online_ckpt)
        m = read_manifest(small_corpus / "test.tsv")
        oracle = {}
        for e in m.entries:
            _, x = training_pair(read_wav(m.resolve(e.noisy)), read_wav(m.resolve(e.direct)), enh.cfg.norm_mode,
                                 enh.frontend, [m.global_seed, e.index], enh.global_mean, enh.smoothing_len)
            oracle[e.index] = x
        assert logmel_mse_report(enh, m, enhanced=oracle).logmel_mse_enhanced == 0.0

    def test_untrained_sane_and_deterministic(self, online_ckpt, small_corpus):
        enh = Enhancer.load(online_ckpt)
        m = read_manifest(small_corpus / "test.tsv")
        a, b = logmel_mse_report(enh, m), logmel_mse_report(enh, m)
        assert a.utterances == b.utterances
        assert np.isfinite(a.logmel_mse_enhanced)
        assert a.logmel_mse_enhanced < 10 * a.logmel_mse_unprocessed
        assert a.logmel_mse_unprocessed == pytest.approx(np.mean([u["logmel_mse_unprocessed"] for u in a.utterances]))
        assert "logmel_mse_enhanced=" in a.render()

    def test_band_mismatch(self, small_corpus, tmp_path):
        from melstream.training import checkpoint_config, save_checkpoint

        cfg = ModelConfig.small(hidden_d=4, f_mel=40)
        enh = Enhancer.load(save_checkpoint(tmp_path / "m.mfsn", checkpoint_config(cfg), init_parameters(cfg)))
        enh.frontend = type(enh.frontend).create(80)
        with pytest.raises(ValueError):
            logmel_mse_report(enh, read_manifest(small_corpus / "test.tsv"))


class TestCausality:
    @pytest.mark.parametrize("t_cut", [0, 7, 20, 38])
    def test_online_exact_zero(self, t_cut):
        assert causality_probe(ONLINE, init_parameters(ONLINE, 1), t_cut, trials=5) == 0.0

    def test_offline_positive(self):
        assert causality_probe(OFFLINE, init_parameters(OFFLINE, 1), 10, trials=3) > 0.0

    @pytest.mark.parametrize("cfg", [ONLINE, OFFLINE])
    def test_last_frame_zero(self, cfg):
        assert causality_probe(cfg, init_parameters(cfg, 2), 39, trials=3, n_frames=40) == 0.0


class TestRtf:
    @pytest.mark.parametrize("fixture", ["online_ckpt", "offline_ckpt"])
    def test_finite_positive(self, request, fixture):
        rtf = measure_rtf(Enhancer.load(request.getfixturevalue(fixture)), 0.5, 1)
        assert math.isfinite(rtf) and rtf > 0

    def test_stable_with_length(self, offline_ckpt):
        enh = Enhancer.load(offline_ckpt)
        a = measure_rtf(enh, 2.0, 5)
        b = measure_rtf(enh, 4.0, 5)
        assert abs(b - a) / a < 0.20
