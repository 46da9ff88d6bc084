"""Versioned named-array checkpoint archives.

An archive is a single ``.npz`` holding:

- ``meta/magic``, ``meta/version``, ``meta/config`` (run config as JSON),
  ``meta/config_hash`` (architecture hash), ``meta/step``, ``meta/vocab``
- ``<namespace>/<param>`` for every model tensor (see ``model.NAMESPACES``)
- ``optim/<namespace>/<param>/<slot>`` optimizer moments
- ``norm/mean`` and ``norm/std`` corpus statistics
"""

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .audio import MelStats
from .config import RunConfig
from .model import NAMESPACES, StyleDiffTTS
from .text import Vocabulary

MAGIC = "stylediff-checkpoint"
VERSION = "1.0.0"


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: RunConfig
    params: dict
    step: int = 0
    stats: MelStats = None
    vocab: Vocabulary = None
    optim: dict = field(default_factory=dict)
    version: str = VERSION

    @property
    def config_hash(self):
        return self.config.arch_hash()

    def group_params(self, namespace):
        prefix = namespace.rstrip("/") + "/"
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def build_model(self, dtype=None) -> StyleDiffTTS:
        model = StyleDiffTTS(self.config.model, self.config.diffusion)
        if dtype is None:
            dtype = torch.from_numpy(np.asarray(next(iter(self.params.values())))).dtype
        model.to(dtype)
        model.load_namespaced_state({k: torch.from_numpy(np.array(v)) for k, v in self.params.items()})
        return model


def _numpy(t):
    return t.detach().cpu().numpy().copy()


def from_model(model: StyleDiffTTS, config: RunConfig, step=0, stats=None, vocab=None, optimizer=None):
    """Snapshot a model (and optionally its Adam-style optimizer) into a :class:`Checkpoint`."""
    params = {k: _numpy(v) for k, v in model.namespaced_state().items()}
    optim = {}
    if optimizer is not None:
        names = {id(p): name for name, p in named_parameters(model)}
        for p, state in optimizer.state.items():
            for slot, value in state.items():
                optim[f"optim/{names[id(p)]}/{slot}"] = _numpy(torch.as_tensor(value))
    return Checkpoint(config, params, int(step), stats, vocab, optim)


def named_parameters(model: StyleDiffTTS):
    """Parameters under their checkpoint names, e.g. ``hier_encoder/sae/proj.weight``."""
    for group, ns in NAMESPACES.items():
        for name, p in model.group(group).named_parameters():
            yield f"{ns}/{name}", p


def restore_optimizer(optimizer, model: StyleDiffTTS, optim: dict):
    """Load saved moments into ``optimizer`` for the parameters it manages."""
    managed = {id(p) for g in optimizer.param_groups for p in g["params"]}
    for name, p in named_parameters(model):
        if id(p) not in managed:
            continue
        prefix = f"optim/{name}/"
        state = {k[len(prefix):]: torch.from_numpy(np.array(v)) for k, v in optim.items() if k.startswith(prefix)}
        if state:
            optimizer.state[p] = state


def save_checkpoint(ckpt: Checkpoint, path):
    """Atomically write ``ckpt`` to ``path`` (temp file in the same directory, then rename)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        "meta/magic": np.array(MAGIC),
        "meta/version": np.array(ckpt.version),
        "meta/config": np.array(json.dumps(ckpt.config.to_dict(), sort_keys=True)),
        "meta/config_hash": np.array(ckpt.config_hash),
        "meta/step": np.array(ckpt.step, dtype=np.int64),
        "meta/vocab": np.array(json.dumps(None if ckpt.vocab is None else ckpt.vocab.symbols)),
    }
    for k, v in ckpt.params.items():
        arrays[k] = np.asarray(v)
    arrays.update({k: np.asarray(v) for k, v in ckpt.optim.items()})
    if ckpt.stats is not None:
        arrays["norm/mean"] = np.asarray(ckpt.stats.mean)
        arrays["norm/std"] = np.asarray(ckpt.stats.std)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _major(version):
    return version.split(".")[0]


def load_checkpoint(path, config: RunConfig = None, force=False) -> Checkpoint:
    """Read an archive written by :func:`save_checkpoint`.

    Refuses (``CheckpointError``) a foreign archive, a different major
    version, or an architecture hash differing from ``config`` (when given)
    or from the embedded config, unless ``force``.
    """
    try:
        with np.load(path, allow_pickle=False) as z:
            data = {k: z[k] for k in z.files}
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if str(data.get("meta/magic", "")) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint archive")
    version = str(data["meta/version"])
    if _major(version) != _major(VERSION) and not force:
        raise CheckpointError(f"checkpoint version {version} incompatible with {VERSION}")
    stored = RunConfig.from_dict(json.loads(str(data["meta/config"])))
    stored_hash = str(data["meta/config_hash"])
    if not force:
        if stored.arch_hash() != stored_hash:
            raise CheckpointError("checkpoint config does not match its stored hash")
        if config is not None and config.arch_hash() != stored_hash:
            raise CheckpointError(f"config hash {config.arch_hash()} != checkpoint hash {stored_hash}")
    symbols = json.loads(str(data["meta/vocab"]))
    vocab = None if symbols is None else Vocabulary(symbols)
    stats = None
    if "norm/mean" in data:
        stats = MelStats(data["norm/mean"], data["norm/std"])
    params = {k: v for k, v in data.items() if not k.startswith(("meta/", "optim/", "norm/"))}
    optim = {k: v for k, v in data.items() if k.startswith("optim/")}
    return Checkpoint(stored, params, int(data["meta/step"]), stats, vocab, optim, version)
