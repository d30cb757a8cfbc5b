import numpy as np
import pytest

from melstream.synthdata import build_corpus
from oracles import load_frozen


@pytest.fixture(scope="session")
def frozen():
    return load_frozen()


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("corpus")
    build_corpus(6, 2, 2, seed=11, out_dir=out, duration_s=1.0)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def _write_model(path, mode, seed=0):
    from melstream.model import ModelConfig, init_parameters
    from melstream.training import TrainConfig, checkpoint_config, save_checkpoint

    cfg = ModelConfig.small(hidden_d=8, n_blocks=1, mode=mode)
    return save_checkpoint(path, checkpoint_config(cfg, TrainConfig(), global_mean=-4.0), init_parameters(cfg, seed))


@pytest.fixture(scope="session")
def online_ckpt(tmp_path_factory):
    return _write_model(tmp_path_factory.mktemp("ckpt") / "online.mfsn", "online")


@pytest.fixture(scope="session")
def offline_ckpt(tmp_path_factory):
    return _write_model(tmp_path_factory.mktemp("ckpt") / "offline.mfsn", "offline")


ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion; printed at session end."""

    def record(number, title, ok, detail):
        ACCEPTANCE_LINES[number] = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        print(ACCEPTANCE_LINES[number])
        assert ok, ACCEPTANCE_LINES[number]

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[key])
