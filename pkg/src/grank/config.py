"""Line-based ``key = value`` configuration with namespaced keys.

    # comment
    generator.d = 32
    serving.k1 = 2000

Defaults < config file < command-line flags.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ParseError
from .generator import GeneratorConfig
from .ranker import RankerConfig

MODES = ("pure_generator", "gen_sa", "gen_ca", "full")


@dataclass
class TrainingConfig:
    lambda0: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    batch_size: int = 64
    epochs: int = 1
    seed: int = 0
    precision: str = "32"
    log_interval: int = 10
    max_steps: int | None = None

    def __post_init__(self):
        weights = (self.lambda0, self.lambda1, self.lambda2)
        if min(weights) < 0 or max(weights) == 0:
            raise ConfigError("loss weights must be >= 0 and not all zero")

    @property
    def weights(self):
        return (self.lambda0, self.lambda1, self.lambda2)


@dataclass
class ServingConfig:
    k1: int = 2000
    k2: int = 500
    quantized: bool = False
    mode: str = "full"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown serving mode {self.mode!r}; expected one of {MODES}")
        if not 1 <= self.k2 <= self.k1:
            raise ConfigError(f"need 1 <= k2 <= k1, got k1={self.k1} k2={self.k2}")

    def check_corpus(self, n_items: int) -> None:
        if self.k1 > n_items:
            raise ConfigError(f"k1={self.k1} exceeds corpus size {n_items}")


@dataclass
class DataConfig:
    n_items: int = 10_000
    n_users: int = 5_000
    n_topics: int = 16
    seq_len: int = 1000
    seed: int = 0


@dataclass
class Config:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    ranker: RankerConfig = field(default_factory=RankerConfig)
    trainer: TrainingConfig = field(default_factory=TrainingConfig)
    serving: ServingConfig = field(default_factory=ServingConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        self.sync()

    def sync(self):
        # the ranker shares the item table, so its width follows the generator
        self.ranker.d = self.generator.d
        return self

    def items(self):
        for section in ("generator", "ranker", "trainer", "serving", "data"):
            obj = getattr(self, section)
            for f in dataclasses.fields(obj):
                yield f"{section}.{f.name}", getattr(obj, f.name)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.items())

    def set(self, key: str, value) -> None:
        self.update({key: value})

    def update(self, pairs: dict) -> "Config":
        """Apply ``section.name -> value`` pairs; each section is validated once, after all its changes."""
        aliases = {"training": "trainer", "train": "trainer"}
        staged: dict[str, dict] = {}
        for key, value in pairs.items():
            section, _, name = key.partition(".")
            section = aliases.get(section, section)
            obj = getattr(self, section, None)
            if obj is None or not dataclasses.is_dataclass(obj) or not name:
                raise ConfigError(f"unknown config key {key!r}")
            if name not in {f.name for f in dataclasses.fields(obj)}:
                raise ConfigError(f"unknown config key {key!r}")
            values = staged.setdefault(section, {f.name: getattr(obj, f.name) for f in dataclasses.fields(obj)})
            values[name] = _coerce(value, getattr(obj, name), key)
        for section, values in staged.items():
            setattr(self, section, type(getattr(self, section))(**values))
        return self.sync()

    def fingerprint(self) -> str:
        import hashlib

        return hashlib.sha1(self.to_text().encode()).hexdigest()[:12]


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def _coerce(raw, current, key):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    try:
        if text.lower() == "none":
            return None
        if isinstance(current, bool):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(current, int):
            return int(text)
        if isinstance(current, float):
            return float(text)
        if isinstance(current, list) or "," in text or key.endswith("mlp_hidden"):
            return [int(v) for v in text.split(",") if v.strip()]
        if current is None:
            for cast in (int, float):
                try:
                    return cast(text)
                except ValueError:
                    pass
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {raw!r}") from None


def parse_config_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"expected 'key = value', got {raw.strip()!r}", line=n)
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ParseError(f"key {key!r} is not namespaced (e.g. generator.d)", line=n)
        out[key] = value
    return out


def load_config(path=None, overrides: dict | None = None) -> Config:
    cfg = Config()
    if path is not None:
        cfg.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
    if overrides:
        cfg.update({k: v for k, v in overrides.items() if v is not None})
    return cfg


def save_config(cfg: Config, path) -> None:
    Path(path).write_text(cfg.to_text(), encoding="utf-8")
