"""Run configuration: dataclasses plus an INI-style file loader."""

import configparser
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields

from .audio import FeatureConfig
from .diffusion import NoiseSchedule

PARAM_GROUPS = (
    "style_encoder",
    "text_encoder",
    "aligner",
    "duration_predictor",
    "style_adaptive_encoder",
    "diffusion",
)

GROUP_ALIASES = {
    "sae": "style_adaptive_encoder",
    "diff": "diffusion",
    "dp": "duration_predictor",
    "style": "style_encoder",
    "text": "text_encoder",
}


def resolve_groups(names):
    out = []
    for name in names:
        name = name.strip()
        if not name:
            continue
        full = GROUP_ALIASES.get(name, name)
        if full not in PARAM_GROUPS:
            raise ValueError(f"unknown parameter group {name!r}; valid: {', '.join(PARAM_GROUPS)}")
        if full not in out:
            out.append(full)
    return out


@dataclass
class ModelConfig:
    n_mels: int = 80
    vocab_size: int = 64
    d_model: int = 128
    n_heads: int = 2
    d_ff: int = 512
    n_text_blocks: int = 4
    n_sae_blocks: int = 4
    style_dim: int = 128
    style_hidden: int = 128
    align_width: int = 128
    dur_width: int = 128
    unet_dim: int = 16
    dropout: float = 0.1
    max_tokens: int = 512
    detach_duration_input: bool = False


@dataclass
class DiffusionConfig:
    beta0: float = 0.05
    beta1: float = 20.0
    T: float = 1.0
    t_min: float = 1e-5
    weighting: str = "sigma2"
    detach_mu: bool = False

    @property
    def schedule(self):
        return NoiseSchedule(self.beta0, self.beta1, self.T)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    lr: float = 1e-4
    warmup_steps: int = 4000
    seed: int = 0
    w_diff: float = 1.0
    w_prior: float = 1.0
    w_align: float = 1.0
    bin_ramp_steps: int = 6000
    freeze: list = field(default_factory=list)
    checkpoint_every: int = 1000
    log_every: int = 10
    grad_clip: float = 1.0
    finetune_mix: float = 0.5

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ValueError("steps must be >= 0 and batch_size >= 1")
        self.freeze = resolve_groups(self.freeze)


@dataclass
class RunConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(
            FeatureConfig(**d.get("features", {})),
            ModelConfig(**d.get("model", {})),
            DiffusionConfig(**d.get("diffusion", {})),
            TrainConfig(**d.get("train", {})),
        )

    def arch_hash(self):
        """Hash of everything that fixes parameter shapes and feature semantics."""
        blob = json.dumps({"features": dataclasses.asdict(self.features), "model": dataclasses.asdict(self.model)},
                          sort_keys=True).encode()
        return hashlib.sha1(blob).hexdigest()[:16]


class ConfigError(ValueError):
    """Bad config file; ``key`` names the offending ``section.option``."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


_SECTIONS = {"features": FeatureConfig, "model": ModelConfig, "diffusion": DiffusionConfig, "train": TrainConfig}


def _coerce(key, raw, typ):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in {"1", "true", "yes", "on"}:
                return True
            if low in {"0", "false", "no", "off"}:
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is list:
            return [x.strip() for x in raw.split(",") if x.strip()]
        return raw.strip()
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ.__name__}") from None


def load_config(path) -> RunConfig:
    """Read an INI file with optional sections ``[features] [model] [diffusion] [train]``."""
    parser = configparser.ConfigParser()
    parser.optionxform = str  # option names are case-sensitive (diffusion.T)
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(str(path), str(exc)) from None
    parts = {}
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigError(section, "unknown section")
        cls = _SECTIONS[section]
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for opt, raw in parser.items(section):
            key = f"{section}.{opt}"
            if opt not in types:
                raise ConfigError(key, "unknown option")
            values[opt] = _coerce(key, raw, types[opt])
        try:
            parts[section] = cls(**values)
        except ValueError as exc:
            raise ConfigError(section, str(exc)) from None
    return RunConfig(**parts)


def save_config(cfg: RunConfig, path):
    parser = configparser.ConfigParser()
    parser.optionxform = str
    for section, values in cfg.to_dict().items():
        parser[section] = {k: (",".join(v) if isinstance(v, list) else str(v)) for k, v in values.items()}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)
