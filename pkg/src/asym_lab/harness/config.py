"""Training configuration and its ``key = value`` / ``[section]`` text format."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field

from ..augment import BASELINE, Recipe
from ..numerics import ConfigError
from ..objective import LossConfig
from .data import DatasetSpec

SIDES = ("neither", "source", "target", "both")


def on_source(side: str) -> bool:
    return side in ("source", "both")


def on_target(side: str) -> bool:
    return side in ("target", "both")


@dataclass
class DesignToggles:
    """Where each variance-oriented design is plugged in."""
    multicrop_side: str = "neither"
    multicrop_m: int = 6
    scalemix_side: str = "neither"
    weaker_side: str = "neither"
    stronger_side: str = "neither"
    syncbn_side: str = "neither"
    mean_enc_side: str = "neither"
    mean_enc_n: int = 2

    def validate(self):
        for f in dataclasses.fields(self):
            if f.name.endswith("_side") and getattr(self, f.name) not in SIDES:
                raise ConfigError(f"{f.name}={getattr(self, f.name)!r}; expected one of {SIDES}")
        for side in ("source", "target"):
            if self._on(self.weaker_side, side) and self._on(self.stronger_side, side):
                raise ConfigError(f"weaker and stronger augmentation both placed on the {side}")
        if self.multicrop_m < 1:
            raise ConfigError("multicrop_m must be >= 1")
        if self.mean_enc_n < 1:
            raise ConfigError("mean_enc_n must be >= 1")

    @staticmethod
    def _on(placement: str, side: str) -> bool:
        return on_source(placement) if side == "source" else on_target(placement)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.06
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    cosine: bool = True
    max_steps: int = 0  # 0 = no cap
    seed: int = 0
    ema_momentum: float = 0.99
    hidden: int = 128
    proj_hidden: int = 64
    out_dim: int = 32
    bn_groups: int = 8
    target_shuffle: bool = True
    bank_size: int = 4096
    small_bank_size: int = 4096
    log_wall_time: bool = False
    loss: LossConfig = field(default_factory=LossConfig)
    data: DatasetSpec = field(default_factory=DatasetSpec)
    design: DesignToggles = field(default_factory=DesignToggles)
    source_recipe: Recipe = BASELINE
    target_recipe: Recipe = BASELINE

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 2:
            raise ConfigError("epochs must be >= 0 and batch_size >= 2")
        if self.lr < 0 or self.weight_decay < 0 or not 0 <= self.sgd_momentum < 1:
            raise ConfigError("invalid optimizer settings")
        if not 0 <= self.ema_momentum <= 1:
            raise ConfigError("ema_momentum must be in [0, 1]")
        if self.bn_groups < 1 or self.batch_size % self.bn_groups:
            raise ConfigError(f"batch_size {self.batch_size} not divisible by bn_groups {self.bn_groups}")
        if self.batch_size // self.bn_groups < 2:
            raise ConfigError("each BN group needs at least 2 rows")
        if self.bank_size < 1 or self.small_bank_size < 1:
            raise ConfigError("bank sizes must be positive")
        self.design.validate()
        return self

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)

    def with_design(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, design=dataclasses.replace(self.design, **kw))

    def to_text(self) -> str:
        return config_to_text(self)

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# text format
# ---------------------------------------------------------------------------

_TRAIN_KEYS = [f.name for f in dataclasses.fields(TrainConfig)
               if f.name not in ("loss", "data", "design", "source_recipe", "target_recipe")]


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ", ".join(str(x) for x in v)
    if v is None:
        return ""
    return str(v)


def _coerce(default, raw: str, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


def config_to_text(cfg: TrainConfig) -> str:
    out = ["[train]"]
    out += [f"{k} = {_fmt(getattr(cfg, k))}" for k in _TRAIN_KEYS]
    out += ["", "[loss]", f"temperature = {cfg.loss.temperature!r}", f"epsilon = {cfg.loss.epsilon!r}"]
    out += ["", "[data]"]
    out += [f"{f.name} = {_fmt(getattr(cfg.data, f.name))}" for f in dataclasses.fields(DatasetSpec)]
    out += ["", "[design]"]
    out += [f"{f.name} = {_fmt(getattr(cfg.design, f.name))}" for f in dataclasses.fields(DesignToggles)]
    out += ["", "[recipe.source]", cfg.source_recipe.to_text().rstrip()]
    out += ["", "[recipe.target]", cfg.target_recipe.to_text().rstrip()]
    return "\n".join(out) + "\n"


def config_from_text(text: str) -> TrainConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config parse error: {e}") from None
    known = {"train", "loss", "data", "design", "recipe.source", "recipe.target"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    defaults = TrainConfig()
    kw = {}
    if cp.has_section("train"):
        for k, v in cp.items("train"):
            if k not in _TRAIN_KEYS:
                raise ConfigError(f"unknown key {k!r} in [train]")
            kw[k] = _coerce(getattr(defaults, k), v, k)
    if cp.has_section("loss"):
        lk = {}
        for k, v in cp.items("loss"):
            if k not in ("temperature", "epsilon"):
                raise ConfigError(f"unknown key {k!r} in [loss]")
            lk[k] = _coerce(1.0, v, k)
        kw["loss"] = LossConfig(**lk)
    if cp.has_section("data"):
        dk = {}
        base = DatasetSpec()
        names = {f.name for f in dataclasses.fields(DatasetSpec)}
        for k, v in cp.items("data"):
            if k not in names:
                raise ConfigError(f"unknown key {k!r} in [data]")
            if k == "template_seeds":
                dk[k] = [int(x) for x in v.split(",") if x.strip()] or None
            else:
                dk[k] = _coerce(getattr(base, k), v, k)
        kw["data"] = DatasetSpec(**dk)
    if cp.has_section("design"):
        names = {f.name for f in dataclasses.fields(DesignToggles)}
        dk = {}
        for k, v in cp.items("design"):
            if k not in names:
                raise ConfigError(f"unknown key {k!r} in [design]")
            dk[k] = _coerce(getattr(DesignToggles(), k), v, k)
        kw["design"] = DesignToggles(**dk)
    for side in ("source", "target"):
        sec = f"recipe.{side}"
        if cp.has_section(sec):
            kw[f"{side}_recipe"] = Recipe.from_items(dict(cp.items(sec)))
    return TrainConfig(**kw).validate()


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_text(fh.read())
