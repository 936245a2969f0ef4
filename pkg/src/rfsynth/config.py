"""Flat ``section.key = value`` experiment configs.

Lines are ``key = value``; ``#`` starts a comment.  Keys under ``sweep.``
name a grid axis: ``sweep.strategy.generation = mgs, prototype`` runs one
cell per listed value.  Any key can be overridden from the environment with
``RFS_`` plus the key upper-cased and dots turned into underscores
(``RFS_LOSS_ALPHA=2``).
"""

from __future__ import annotations

import hashlib
import itertools
import os
from dataclasses import dataclass
from typing import Any, Callable, Mapping

from .compensate import COMPENSATION_STRATEGIES, GENERATION_STRATEGIES, StrategyConfig
from .engine import TrainConfig
from .synthdata import generate_dataset, split_tasks

ENV_PREFIX = "RFS_"


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(t) for t in text.replace(",", " ").split())


def _seed_or_auto(text: str):
    return "auto" if text.strip() == "auto" else int(text)


def _optional_float(text: str):
    return None if text.strip() in ("", "none", "auto") else float(text)


def _choice(options) -> Callable[[str], str]:
    def parse(text: str) -> str:
        text = text.strip()
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {text!r}")
        return text
    return parse


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if value is None:
        return "none"
    return repr(value) if isinstance(value, float) else str(value)


REQUIRED = object()

# key -> (parser, default)
SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "data.classes": (int, REQUIRED),
    "data.train_per_class": (int, 100),
    "data.test_per_class": (int, 50),
    "data.side": (int, 8),
    "data.noise": (float, 0.15),
    "data.seed": (_seed_or_auto, "auto"),
    "tasks.B": (int, REQUIRED),
    "tasks.C": (int, REQUIRED),
    "tasks.T": (int, REQUIRED),
    "tasks.order_seed": (_seed_or_auto, "auto"),
    "model.hidden": (int, 64),
    "model.feature_dim": (int, 32),
    "model.depth": (int, 2),
    "model.head_bias": (_bool, False),
    "model.init_gain": (float, 1.0),
    "train.epochs": (int, 30),
    "train.milestones": (_int_tuple, (14, 27)),
    "train.batch_size": (int, 32),
    "train.lr": (float, 5e-3),
    "train.weight_decay": (float, 2e-4),
    "loss.alpha": (float, 15.0),
    "loss.feature_kd": (_bool, True),
    "loss.logit_kd": (_bool, True),
    "loss.kd_temperature": (float, 1.0),
    "loss.new_cls_full_logits": (_bool, True),
    "strategy.generation": (_choice(GENERATION_STRATEGIES), "mgs"),
    "strategy.compensation": (_choice(COMPENSATION_STRATEGIES), "sfc"),
    "strategy.noise_scale": (_optional_float, None),
    "strategy.interp_low": (float, 0.0),
    "strategy.interp_high": (float, 1.0),
    "mgs.K": (int, 1000),
    "mgs.tied_covariance": (_bool, False),
    "run.seed": (int, 0),
    "run.label": (str, ""),
}

STRATEGY_KEYS = ("strategy.generation", "strategy.compensation")


def env_name(key: str) -> str:
    return ENV_PREFIX + key.replace(".", "_").upper()


def parse_text(text: str) -> tuple[dict[str, str], dict[str, list[str]]]:
    """Raw key/value strings plus sweep axes, in file order."""
    values: dict[str, str] = {}
    axes: dict[str, list[str]] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key.startswith("sweep."):
            target = key[len("sweep."):]
            if target not in SCHEMA:
                raise ConfigError(key, "unknown key")
            axes[target] = [v.strip() for v in value.split(",") if v.strip()]
            if not axes[target]:
                raise ConfigError(key, "empty value list")
        elif key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        else:
            values[key] = value
    return values, axes


@dataclass(frozen=True)
class ExperimentConfig:
    values: Mapping[str, Any]

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def from_raw(cls, raw: Mapping[str, str], env: Mapping[str, str] | None = None) -> "ExperimentConfig":
        env = os.environ if env is None else env
        merged = dict(raw)
        for key in SCHEMA:
            if env_name(key) in env:
                merged[key] = env[env_name(key)]
        values = {}
        for key, (parse, default) in SCHEMA.items():
            if key in merged:
                try:
                    values[key] = parse(merged[key])
                except ValueError as exc:
                    raise ConfigError(key, str(exc)) from None
            elif default is REQUIRED:
                raise ConfigError(key, "required field is missing")
            else:
                values[key] = default
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def from_text(cls, text: str, env=None) -> "ExperimentConfig":
        return cls.from_raw(parse_text(text)[0], env)

    def replace(self, **overrides: str) -> "ExperimentConfig":
        """Copy with raw-string overrides given as ``{"loss.alpha": "0"}``-style kwargs."""
        raw = {k: _fmt(v) for k, v in self.values.items()}
        raw.update(overrides)
        return ExperimentConfig.from_raw(raw, env={})

    def validate(self) -> None:
        v = self.values
        positive = ("data.classes", "data.train_per_class", "data.test_per_class", "data.side", "tasks.B",
                    "model.hidden", "model.feature_dim", "model.depth", "train.epochs", "mgs.K")
        for key in positive:
            if v[key] < 1:
                raise ConfigError(key, "must be at least 1")
        if v["data.train_per_class"] < 2:
            raise ConfigError("data.train_per_class", "need at least 2 samples per class for a covariance")
        if v["tasks.C"] < 1 or v["tasks.T"] < 0:
            raise ConfigError("tasks.C", "need C >= 1 and T >= 0")
        if v["tasks.B"] + v["tasks.C"] * v["tasks.T"] != v["data.classes"]:
            raise ConfigError("tasks.B", "B + C*T must equal data.classes")
        if v["data.noise"] < 0:
            raise ConfigError("data.noise", "must be non-negative")
        if v["loss.alpha"] < 0:
            raise ConfigError("loss.alpha", "must be non-negative")
        if v["train.batch_size"] < 1:
            raise ConfigError("train.batch_size", "must be at least 1")
        if v["loss.kd_temperature"] <= 0:
            raise ConfigError("loss.kd_temperature", "must be positive")
        for key, build in (("strategy.interp_low", self.strategy), ("train.milestones", self.train_config)):
            try:
                build()
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None

    # -- canonical form ------------------------------------------------------
    def canonical_text(self, include_seed: bool = False) -> str:
        keys = sorted(k for k in SCHEMA if include_seed or k != "run.seed")
        return "".join(f"{k}={_fmt(self.values[k])}\n" for k in keys)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode()).hexdigest()[:12]

    def echo(self) -> dict[str, str]:
        return {k: _fmt(self.values[k]) for k in sorted(SCHEMA)}

    # -- builders ------------------------------------------------------------
    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    def _derived_seed(self, key: str) -> int:
        s = self.values[key]
        return self.seed if s == "auto" else s

    @property
    def protocol(self) -> tuple[int, int, int]:
        return self["tasks.B"], self["tasks.C"], self["tasks.T"]

    def strategy(self) -> StrategyConfig:
        v = self.values
        return StrategyConfig(v["strategy.generation"], v["strategy.compensation"], K=v["mgs.K"],
                              noise_scale=v["strategy.noise_scale"], interp_low=v["strategy.interp_low"],
                              interp_high=v["strategy.interp_high"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(epochs=v["train.epochs"], milestones=v["train.milestones"],
                           batch_size=v["train.batch_size"], lr=v["train.lr"],
                           weight_decay=v["train.weight_decay"], alpha=v["loss.alpha"],
                           strategy=self.strategy(), feature_kd=v["loss.feature_kd"],
                           logit_kd=v["loss.logit_kd"], kd_temperature=v["loss.kd_temperature"],
                           new_cls_full_logits=v["loss.new_cls_full_logits"], seed=self.seed)

    def model_kwargs(self) -> dict:
        v = self.values
        return dict(hidden=v["model.hidden"], feature_dim=v["model.feature_dim"], depth=v["model.depth"],
                    head_bias=v["model.head_bias"], init_gain=v["model.init_gain"],
                    tied_covariance=v["mgs.tied_covariance"])

    def dataset(self):
        v = self.values
        return generate_dataset(v["data.classes"], v["data.train_per_class"], v["data.test_per_class"],
                                side=v["data.side"], seed=self._derived_seed("data.seed"),
                                noise_std=v["data.noise"])

    def stream(self):
        B, C, T = self.protocol
        return split_tasks(self["data.classes"], B, C, T, order_seed=self._derived_seed("tasks.order_seed"))

    @property
    def label(self) -> str:
        return self["run.label"] or self.strategy().name


def load_config(path, env=None) -> tuple[ExperimentConfig, dict[str, list[str]]]:
    with open(path, encoding="utf-8") as fh:
        raw, axes = parse_text(fh.read())
    return ExperimentConfig.from_raw(raw, env), axes


def expand_grid(base: ExperimentConfig, axes: Mapping[str, list[str]]) -> list[ExperimentConfig]:
    """Cartesian product over the sweep axes, first axis outermost.

    Cells that differ in a non-strategy, non-seed key get that key appended
    to their label so table rows stay distinguishable.
    """
    if not axes:
        return [base]
    keys = list(axes)
    extra = [k for k in keys if k not in STRATEGY_KEYS and k not in ("run.seed", "run.label")]
    cells = []
    for combo in itertools.product(*(axes[k] for k in keys)):
        over = dict(zip(keys, combo))
        cfg = base.replace(**over)
        if extra and not base["run.label"]:
            tag = " ".join(f"{k.split('.')[-1]}={over[k]}" for k in extra)
            cfg = cfg.replace(**{"run.label": f"{cfg.strategy().name} {tag}"})
        cells.append(cfg)
    return cells


DEFAULT_CONFIG = """\
# 20-class synthetic benchmark, 10 base classes then 5 phases of 2
data.classes = 20
data.train_per_class = 100
data.test_per_class = 50
data.noise = 0.15
tasks.B = 10
tasks.C = 2
tasks.T = 5
train.epochs = 30
train.milestones = 14, 27
train.batch_size = 32
train.lr = 0.005
loss.alpha = 15
strategy.generation = mgs
strategy.compensation = sfc
mgs.K = 1000
run.seed = 0
"""
