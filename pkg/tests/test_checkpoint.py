import dataclasses
import json
import os

import numpy as np
import pytest
import torch

from conftest import TINY_MODEL, tiny_run_config
from stylediff.audio import MelStats
from stylediff.checkpoint import MAGIC, CheckpointError, from_model, load_checkpoint, save_checkpoint
from stylediff.model import StyleDiffTTS
from stylediff.text import Vocabulary


@pytest.fixture
def ckpt():
    torch.manual_seed(0)
    model = StyleDiffTTS(TINY_MODEL)
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    model.diffusion.out.weight.sum().backward()
    opt.step()
    stats = MelStats(np.linspace(-1, 1, 80), np.linspace(0.5, 2, 80))
    return from_model(model, tiny_run_config(), 17, stats, Vocabulary(list("abc")), opt)


def test_round_trip_bit_exact(tmp_path, ckpt):
    save_checkpoint(ckpt, tmp_path / "c.npz")
    back = load_checkpoint(tmp_path / "c.npz", ckpt.config)
    assert back.step == 17 and back.config == ckpt.config and back.vocab == ckpt.vocab
    assert set(back.params) == set(ckpt.params) and set(back.optim) == set(ckpt.optim)
    for k in ckpt.params:
        assert back.params[k].dtype == ckpt.params[k].dtype
        np.testing.assert_array_equal(back.params[k], ckpt.params[k])
    for k in ckpt.optim:
        np.testing.assert_array_equal(back.optim[k], ckpt.optim[k])
    np.testing.assert_array_equal(back.stats.mean, ckpt.stats.mean)
    model = back.build_model()
    for k, v in model.namespaced_state().items():
        np.testing.assert_array_equal(v.numpy(), ckpt.params[k])


def test_layout(tmp_path, ckpt):
    save_checkpoint(ckpt, tmp_path / "c.npz")
    with np.load(tmp_path / "c.npz") as z:
        files = set(z.files)
        assert str(z["meta/magic"]) == MAGIC
        assert json.loads(str(z["meta/config"]))["model"]["d_model"] == TINY_MODEL.d_model
    assert {"meta/version", "meta/config_hash", "meta/step", "norm/mean", "norm/std"} <= files
    assert any(k.startswith("hier_encoder/sae/") for k in files)
    assert any(k.startswith("optim/diffusion/") for k in files)


def test_refuses_config_mismatch(tmp_path, ckpt):
    save_checkpoint(ckpt, tmp_path / "c.npz")
    other = dataclasses.replace(ckpt.config, model=dataclasses.replace(TINY_MODEL, d_model=32))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.npz", other)
    assert load_checkpoint(tmp_path / "c.npz", other, force=True).config == ckpt.config


def test_refuses_version_mismatch(tmp_path, ckpt):
    ckpt.version = "2.0.0"
    save_checkpoint(ckpt, tmp_path / "c.npz")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "c.npz")
    assert load_checkpoint(tmp_path / "c.npz", force=True).version == "2.0.0"


def test_minor_version_accepted(tmp_path, ckpt):
    ckpt.version = "1.4.2"
    save_checkpoint(ckpt, tmp_path / "c.npz")
    assert load_checkpoint(tmp_path / "c.npz").step == 17


def test_refuses_tampered_hash(tmp_path, ckpt):
    save_checkpoint(ckpt, tmp_path / "c.npz")
    with np.load(tmp_path / "c.npz") as z:
        data = {k: z[k] for k in z.files}
    data["meta/config_hash"] = np.array("0" * 16)
    np.savez(tmp_path / "t.npz", **data)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.npz")


def test_foreign_files(tmp_path):
    np.savez(tmp_path / "x.npz", a=np.zeros(3))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.npz")
    (tmp_path / "y.npz").write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "y.npz")


def test_atomic_write(tmp_path, ckpt, monkeypatch):
    path = tmp_path / "c.npz"
    save_checkpoint(ckpt, path)
    before = path.read_bytes()

    def boom(*a, **k):
        raise RuntimeError("disk full")

    monkeypatch.setattr(np, "savez", boom)
    with pytest.raises(RuntimeError):
        save_checkpoint(ckpt, path)
    assert path.read_bytes() == before
    assert os.listdir(tmp_path) == ["c.npz"]


def test_build_model_dtype(ckpt):
    assert next(ckpt.build_model().parameters()).dtype == torch.float32
    assert next(ckpt.build_model(torch.float64).parameters()).dtype == torch.float64


def test_group_params(ckpt):
    sae = ckpt.group_params("hier_encoder/sae")
    assert sae and all(k.startswith("hier_encoder/sae/") for k in sae)
