import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass


class Config:
    # Run Configuration
    RUNS_DIR = os.environ.get('DECORNET_RUNS_DIR') or 'runs'
    BEST_CHECKPOINT = 'best.ckpt'
    LAST_CHECKPOINT = 'last.ckpt'
    TRAIN_LOG = 'train_log.csv'
    CONFIG_SNAPSHOT = 'config.json'

    # Data Configuration
    WINDOW_LOW = -1250.0
    WINDOW_HIGH = 250.0
    SPLIT_COUNTS = (127, 32, 40)

    # Evaluation Configuration
    THRESHOLD = 0.5
    PROBE_LAYER = 2


from data.augment import AugmentationPolicy  # noqa: E402
from models.decor_core import LossWeights  # noqa: E402
from models.network import ChannelConfig, NetworkSpec  # noqa: E402
from utils.exceptions import ConfigError  # noqa: E402
from utils.helpers import (  # noqa: E402
    validate_choice,
    validate_positive_float,
    validate_positive_int,
    validate_range,
)

OPTIMIZERS = ("adam", "sgd")


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr0: float = 1e-4
    momentum: float = 0.9
    epochs: int = 300
    plateau_patience: int = 30
    plateau_min_delta: float = 5e-3
    lr_factor: float = 5.0
    batch_size: int = 16
    seed: int = 0
    deterministic: bool = False
    max_iterations: int = None
    val_every: int = 1
    num_workers: int = 0


@dataclass
class DataConfig:
    manifest: str = None
    split_file: str = None
    window_low: float = Config.WINDOW_LOW
    window_high: float = Config.WINDOW_HIGH
    split_counts: tuple = Config.SPLIT_COUNTS
    drop_empty_slices: bool = False


@dataclass
class ModelConfig:
    channels: tuple = (248, 248, 112, 112, 112)
    in_channels: int = 1
    out_channels: int = 1
    block_kind: str = "residual"
    norm: str = "batch"

    def network_spec(self):
        return NetworkSpec(
            channel_config=ChannelConfig(tuple(self.channels)),
            in_channels=self.in_channels,
            out_channels=self.out_channels,
            block_kind=self.block_kind,
            norm=self.norm,
        )


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)

    def to_dict(self):
        return _plain(asdict(self))


SECTIONS = {
    "model": ModelConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "data": DataConfig,
    "augment": AugmentationPolicy,
}


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(raw, current, key):
    """Parse a command-line string to the type of the current value."""
    text = raw.strip()
    if text.lower() in ("null", "none"):
        return None
    if isinstance(current, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key} expects true/false, got '{raw}'")
    if isinstance(current, (list, tuple)):
        items = [t.strip() for t in text.strip("[]()").split(",") if t.strip()]
        kind = type(current[0]) if current else float
        try:
            return [kind(i) if kind is not int else int(float(i)) for i in items]
        except ValueError:
            raise ConfigError(f"{key} expects a comma-separated list, got '{raw}'")
    if isinstance(current, int):
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key} expects an integer, got '{raw}'")
    if isinstance(current, float):
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key} expects a number, got '{raw}'")
    if current is None:
        if "," in text and not text.startswith("["):
            text = f"[{text}]"
        try:
            return json.loads(text)
        except ValueError:
            return text
    return text


def apply_overrides(data, overrides):
    """Apply ``section.key=value`` strings to a plain config dictionary."""
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' must look like section.key=value")
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        if len(parts) != 2 or parts[0] not in data or parts[1] not in data[parts[0]]:
            raise ConfigError(f"unknown config key '{key}'")
        section, name = parts
        data[section][name] = _coerce(value, data[section][name], key)
    return data


def _validate(config):
    t = config.train
    checks = [
        validate_choice(t.optimizer, OPTIMIZERS, "train.optimizer"),
        validate_positive_float(t.lr0, "train.lr0"),
        validate_positive_int(t.epochs, "train.epochs"),
        validate_positive_int(t.plateau_patience, "train.plateau_patience"),
        validate_positive_float(t.plateau_min_delta, "train.plateau_min_delta", allow_zero=True),
        validate_positive_int(t.batch_size, "train.batch_size"),
        validate_positive_int(t.val_every, "train.val_every"),
        validate_range((config.data.window_low, config.data.window_high), "data window"),
    ]
    if t.max_iterations is not None:
        checks.append(validate_positive_int(t.max_iterations, "train.max_iterations"))
    errors = [message for ok, message in checks if not ok]
    if t.lr_factor <= 1:
        errors.append("train.lr_factor must be greater than 1")
    if config.data.window_low >= config.data.window_high:
        errors.append("data window must satisfy low < high")
    if len(config.data.split_counts) != 3 or min(config.data.split_counts) < 1:
        errors.append("data.split_counts needs three positive counts")
    if errors:
        raise ConfigError("; ".join(errors))
    t.optimizer = t.optimizer.lower()


def from_dict(data):
    """Build a validated RunConfig from a (possibly partial) dictionary."""
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    built = {}
    for name, cls in SECTIONS.items():
        section = dict(data.get(name) or {})
        known = {f.name for f in fields(cls)}
        extra = set(section) - known
        if extra:
            raise ConfigError(f"unknown keys in [{name}]: {sorted(extra)}")
        for key, value in section.items():
            if isinstance(value, list):
                section[key] = tuple(value)
        try:
            built[name] = cls(**section)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"invalid [{name}] section: {e}")
    config = RunConfig(**built)
    try:
        config.model.network_spec()
    except ValueError as e:
        raise ConfigError(f"invalid [model] section: {e}")
    _validate(config)
    return config


def load_config(path=None, overrides=None):
    """Defaults, then the JSON file, then ``--set`` overrides."""
    data = RunConfig().to_dict()
    if path:
        if not os.path.exists(path):
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path) as f:
                loaded = json.load(f)
        except ValueError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        for section, values in loaded.items():
            if section not in data or not isinstance(values, dict):
                raise ConfigError(f"unknown config section '{section}'")
            data[section].update(values)
    return from_dict(apply_overrides(data, overrides))


def config_hash(config):
    payload = config.to_dict() if is_dataclass(config) else config
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def save_config(config, path):
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
