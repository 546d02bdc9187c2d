"""Model and training configuration, stored as ``key = value`` text."""

import dataclasses
from dataclasses import dataclass, field


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 16
    channels: int = 1
    resolutions: tuple = (4, 8, 16)
    groups: tuple = (2, 3, 3)
    base_channels: int = 32
    channel_mult: tuple = (1, 1, 1)
    z_channels: int = 4
    enc_blocks: int = 1
    blocks_per_layer: int = 1
    emb_dim: int = 16
    output: str = "gaussian"
    sigma_output: float = 0.025
    num_mixtures: int = 10
    num_classes: int = 0
    label_drop_prob: float = 0.1
    schedule: str = "geometric"
    schedule_A: float = 1000.0
    schedule_B: float = 10.0

    def __post_init__(self):
        self.resolutions = tuple(int(r) for r in self.resolutions)
        self.groups = tuple(int(g) for g in self.groups)
        self.channel_mult = tuple(int(m) for m in self.channel_mult)
        self.validate()

    def validate(self):
        res = self.resolutions
        if not res or any(b <= a or b % a for a, b in zip(res, res[1:])):
            raise ConfigError(f"resolutions must strictly increase, each dividing the next: {res}")
        if any(b != 2 * a for a, b in zip(res, res[1:])):
            raise ConfigError(f"resolution changes are x2 steps only: {res}")
        if res[-1] != self.image_size:
            raise ConfigError(f"last resolution {res[-1]} must equal image_size {self.image_size}")
        if len(self.groups) != len(res) or any(g < 0 for g in self.groups):
            raise ConfigError("groups needs one nonnegative count per resolution")
        if len(self.channel_mult) != len(res) or any(m < 1 for m in self.channel_mult):
            raise ConfigError("channel_mult needs one positive multiplier per resolution")
        if self.num_layers < 2:
            raise ConfigError("need at least 2 stochastic layers in total")
        if self.z_channels < 1 or self.base_channels < 1:
            raise ConfigError("z_channels and base_channels must be positive")
        if self.channels not in (1, 3):
            raise ConfigError("channels must be 1 or 3")
        if self.output not in ("gaussian", "dmol"):
            raise ConfigError(f"output must be gaussian or dmol, got {self.output!r}")
        if not self.sigma_output > 0:
            raise ConfigError("sigma_output must be positive")
        if not 0 <= self.label_drop_prob < 1:
            raise ConfigError("label_drop_prob must be in [0, 1)")
        if self.schedule not in ("geometric", "resolution", "none"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.num_mixtures < 1 or self.num_classes < 0:
            raise ConfigError("num_mixtures >= 1 and num_classes >= 0 required")

    @property
    def num_layers(self):
        return sum(self.groups)

    @property
    def layer_resolutions(self):
        return [r for r, g in zip(self.resolutions, self.groups) for _ in range(g)]

    @property
    def dims(self):
        return self.image_size * self.image_size * self.channels

    def width(self, res_index):
        return self.base_channels * self.channel_mult[res_index]


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_lr: float = 6e-4
    min_lr: float = 3e-4
    warmup_steps: int = 50
    ema_decay: float = 0.9997
    skip_threshold: float = 300.0
    iterations: int = 1000
    checkpoint_every: int = 500
    log_every: int = 1
    seed: int = 0
    flip: bool = True
    # Spectral regularization is not implemented; the key is accepted and ignored.
    sr_penalty: float = 0.0


@dataclass
class Config:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def replace(self, **changes):
        """Copy with fields overridden; keys may belong to either section."""
        model, train = {}, {}
        for key, value in changes.items():
            if key in _MODEL_FIELDS:
                model[key] = value
            elif key in _TRAIN_FIELDS:
                train[key] = value
            else:
                raise ConfigError(f"unknown config key {key!r}")
        return Config(dataclasses.replace(self.model, **model), dataclasses.replace(self.train, **train))

    def dumps(self):
        return format_config(self)


_MODEL_FIELDS = {f.name: f for f in dataclasses.fields(ModelConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _parse_value(name, default, text):
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            return tuple(int(v) for v in text.split(",") if v.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None


def parse_config(text):
    model, train = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in _MODEL_FIELDS:
            model[key] = _parse_value(key, _MODEL_FIELDS[key].default, value)
        elif key in _TRAIN_FIELDS:
            train[key] = _parse_value(key, _TRAIN_FIELDS[key].default, value)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    try:
        return Config(ModelConfig(**model), TrainConfig(**train))
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg):
    lines = ["# model"]
    lines += [f"{k} = {_format_value(getattr(cfg.model, k))}" for k in _MODEL_FIELDS]
    lines.append("# training")
    lines += [f"{k} = {_format_value(getattr(cfg.train, k))}" for k in _TRAIN_FIELDS]
    return "\n".join(lines) + "\n"


def load_config(path):
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())
