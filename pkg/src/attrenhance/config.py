"""Run configuration: typed dataclasses, TOML loading with strict key
validation, dotted command-line overrides and a stable config hash that is
embedded in every checkpoint."""

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

try:
    import tomllib
except ImportError:  # python 3.10
    import tomli as tomllib

from .errors import ConfigError
from .synthgen import DEFAULT_PRIORS

SEED_ENV_VAR = "ATTRENHANCE_SEED"


@dataclass
class ImageConfig:
    height: int = 80
    width: int = 32
    blocks: int = 10


@dataclass
class DatasetConfig:
    train: int = 2000
    test: int = 500
    occluded_train_fraction: float = 0.3
    lowres_factor: int = 4
    min_ratio: float = 0.01
    priors: dict = field(default_factory=lambda: dict(DEFAULT_PRIORS))


@dataclass
class ClassifierConfig:
    channels: list = field(default_factory=lambda: [16, 16, 32, 64])
    lr: float = 0.02
    lr_decay: float = 1e-4
    momentum: float = 0.9
    batch: int = 8
    epochs: int = 10


@dataclass
class GanConfig:
    enc_channels: list = field(default_factory=list)
    dec_channels: list = field(default_factory=list)
    disc_channels: list = field(default_factory=list)
    lr: float = 0.002
    beta1: float = 0.5
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 8
    epochs: int = 10
    k: int = 1
    adv_weight: float = 0.1
    sse_pool: int = 2


@dataclass
class PipelineConfig:
    trigger: float = 0.5
    threshold: float = 0.5


@dataclass
class RunConfig:
    seed: int = 7
    image: ImageConfig = field(default_factory=ImageConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    reconstruction: GanConfig = field(default_factory=lambda: GanConfig(
        enc_channels=[32, 64, 128, 256], dec_channels=[128, 64, 32, 16],
        disc_channels=[32, 64, 128, 256], adv_weight=0.1))
    sr: GanConfig = field(default_factory=lambda: GanConfig(
        enc_channels=[64, 128], dec_channels=[64, 64, 32, 32],
        disc_channels=[32, 64, 128, 256], adv_weight=1.0))
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.image.height % self.image.blocks:
            raise ConfigError(
                f"height {self.image.height} not divisible by {self.image.blocks}")
        if self.image.height % 16 or self.image.width % 16:
            raise ConfigError("image dims must be divisible by 16")
        for name in ("lr", "lr_decay", "momentum"):
            if getattr(self.classifier, name) < 0:
                raise ConfigError(f"classifier.{name} must be >= 0")
        if self.classifier.lr <= 0:
            raise ConfigError("classifier.lr must be > 0")
        for gan_name in ("reconstruction", "sr"):
            gan = getattr(self, gan_name)
            if gan.lr <= 0:
                raise ConfigError(f"{gan_name}.lr must be > 0")
            if gan.k < 1:
                raise ConfigError(f"{gan_name}.k must be >= 1")
            if gan.adv_weight < 0:
                raise ConfigError(f"{gan_name}.adv_weight must be >= 0")
        if len(self.reconstruction.dec_channels) != len(self.reconstruction.enc_channels):
            raise ConfigError("reconstruction decoder depth must equal encoder depth")
        if len(self.sr.dec_channels) != len(self.sr.enc_channels) + 2:
            raise ConfigError("sr decoder needs encoder depth + 2 for a net 4x upscale")

    def to_dict(self):
        return asdict(self)

    def hash(self) -> str:
        """Hash of everything that shapes data and training. The pipeline
        table holds inference-time knobs (trigger, threshold) and is left
        out, so re-running evaluation with a different trigger still accepts
        previously trained checkpoints."""
        d = self.to_dict()
        d.pop("pipeline")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def save_snapshot(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        snapshot = {"hash": self.hash(), "config": self.to_dict()}
        (out / "config.json").write_text(
            json.dumps(snapshot, indent=2, sort_keys=True) + "\n")


def _apply_section(obj, section: dict, prefix: str):
    known = {f.name: f for f in fields(obj)}
    for key, value in section.items():
        if key not in known:
            raise ConfigError(f"unknown config key {prefix}{key}")
        current = getattr(obj, key)
        if isinstance(current, (ImageConfig, DatasetConfig, ClassifierConfig,
                                GanConfig, PipelineConfig)):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{key} must be a table")
            _apply_section(current, value, f"{prefix}{key}.")
        elif isinstance(current, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{prefix}{key} must be a table")
            setattr(obj, key, {str(k): float(v) for k, v in value.items()})
        elif isinstance(current, list):
            setattr(obj, key, [int(v) for v in value])
        elif isinstance(current, bool):
            setattr(obj, key, bool(value))
        elif isinstance(current, int):
            setattr(obj, key, int(value))
        elif isinstance(current, float):
            setattr(obj, key, float(value))
        else:
            setattr(obj, key, value)


def _parse_scalar(text: str):
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def apply_overrides(config: RunConfig, overrides) -> RunConfig:
    """Apply dotted-key overrides like ``classifier.lr=0.05`` or
    ``dataset.train=200``. Lists are comma-separated."""
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        dotted, _, raw = item.partition("=")
        parts = dotted.strip().split(".")
        obj = config
        for part in parts[:-1]:
            if not hasattr(obj, part):
                raise ConfigError(f"unknown config key {dotted}")
            obj = getattr(obj, part)
        leaf = parts[-1]
        if isinstance(obj, dict):
            obj[leaf] = float(raw)
            continue
        if not hasattr(obj, leaf):
            raise ConfigError(f"unknown config key {dotted}")
        current = getattr(obj, leaf)
        if isinstance(current, list):
            setattr(obj, leaf, [int(v) for v in raw.split(",") if v.strip()])
        elif isinstance(current, bool):
            setattr(obj, leaf, raw.strip().lower() == "true")
        elif isinstance(current, int):
            setattr(obj, leaf, int(raw))
        elif isinstance(current, float):
            setattr(obj, leaf, float(raw))
        else:
            setattr(obj, leaf, _parse_scalar(raw.strip()))
    config.validate()
    return config


def load_config(path=None, overrides=(), preset=None) -> RunConfig:
    """Build a RunConfig from a TOML file (or a named preset), then apply
    overrides and the seed environment variable. Unknown keys are rejected."""
    config = RunConfig()
    if preset is not None:
        source = resources.files("attrenhance.configs").joinpath(f"{preset}.toml")
        data = tomllib.loads(source.read_text())
    elif path is not None:
        with open(path, "rb") as f:
            data = tomllib.load(f)
    else:
        data = {}
    if "priors" in data.get("dataset", {}):
        config.dataset.priors = {}
    _apply_section(config, data, "")
    apply_overrides(config, overrides)
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        config.seed = int(env_seed)
    config.validate()
    return config
