import dataclasses
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from stylediff.audio import compute_stats, normalize_mel  # noqa: E402
from stylediff.config import DiffusionConfig, ModelConfig, RunConfig, TrainConfig  # noqa: E402
from stylediff.data import load_corpus, make_synthetic_corpus  # noqa: E402
from stylediff.text import Vocabulary  # noqa: E402

TINY_MODEL = ModelConfig(d_model=16, n_heads=2, d_ff=32, n_text_blocks=1, n_sae_blocks=1, style_dim=8,
                         style_hidden=16, align_width=16, dur_width=16, unet_dim=4, dropout=0.0, vocab_size=16)


def tiny_run_config(**train):
    tc = dict(steps=5, batch_size=4, seed=0, checkpoint_every=0, log_every=1, warmup_steps=10, lr=1e-3)
    tc.update(train)
    return RunConfig(model=TINY_MODEL, diffusion=DiffusionConfig(), train=TrainConfig(**tc))


@pytest.fixture(scope="session")
def tiny_corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_corpus")
    make_synthetic_corpus(2, 3, seed=3, out=out, frames_per_symbol=4, min_len=2, max_len=4)
    return out


@pytest.fixture(scope="session")
def tiny_corpus(tiny_corpus_dir):
    utts = load_corpus(tiny_corpus_dir)
    return utts, Vocabulary.from_texts(u.text for u in utts)


@pytest.fixture(scope="session")
def synth_corpus_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth_corpus")
    make_synthetic_corpus(4, 8, seed=0, out=out)
    return out


@pytest.fixture(scope="session")
def synth_corpus(synth_corpus_dir):
    return load_corpus(synth_corpus_dir)


def normalized(utts):
    stats = compute_stats([u.mel for u in utts])
    return [dataclasses.replace(u, mel=normalize_mel(u.mel, stats)) for u in utts]


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
