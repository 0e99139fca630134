"""Run configuration: one JSON document covering data, model, training and scoring.

Every section maps onto a dataclass. Loading reports the first offending field by
its dotted path (``train.sft_lr: expected float, got 'fast'``) so the CLI can print
it and exit with the config-error status.
"""
from __future__ import annotations

import json
import typing
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from .synthdata import GenConfig, config_hash
from .trainer import ModelConfig, TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the offending field."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path


@dataclass
class ScorerConfig:
    kind: str = "rule"                 # rule | http
    endpoint: str | None = None        # base URL of the entailment service
    timeout: float = 2.0
    retries: int = 2
    fallback: bool = True              # fall back to the rule scorer when the service fails

    def __post_init__(self):
        if self.kind not in ("rule", "http"):
            raise ValueError(f"kind must be 'rule' or 'http', got {self.kind!r}")
        if self.kind == "http" and not self.endpoint:
            raise ValueError("an http scorer needs an endpoint")
        if self.timeout <= 0 or self.retries < 0:
            raise ValueError("timeout must be positive and retries non-negative")

    def build(self):
        from .rewards import HttpEntailmentScorer, RuleScorer
        rule = RuleScorer()
        if self.kind == "rule":
            return rule
        return HttpEntailmentScorer(self.endpoint, self.timeout, self.retries, rule if self.fallback else None)


@dataclass
class RunConfig:
    seeds: tuple = (1, 2, 3)
    n_train: int = 64
    n_eval: int = 32
    out_dir: str = "runs"
    gen: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scorer: ScorerConfig = field(default_factory=ScorerConfig)

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds", "at least one seed is required")
        if self.n_train < 2 or self.n_eval < 1:
            raise ConfigError("n_train", "need n_train >= 2 and n_eval >= 1")
        if self.model.grid != self.gen.grid:
            raise ConfigError("model.grid", f"{self.model.grid} differs from gen.grid {self.gen.grid}")
        if self.model.image_size != self.gen.image_size:
            raise ConfigError("model.image_size",
                              f"{self.model.image_size} differs from gen.image_size {self.gen.image_size}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        d["gen"] = self.gen.to_dict()
        d["train"]["reward_weights"] = list(self.train.reward_weights)
        d["train"]["sft_frozen"] = list(self.train.sft_frozen)
        return d

    def hash(self) -> str:
        return config_hash(self.to_dict())

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    @classmethod
    def load(cls, path=None, overrides=()) -> "RunConfig":
        """Read ``path`` (JSON) if given, then apply ``key.sub=value`` overrides."""
        d = {}
        if path is not None:
            try:
                d = json.loads(Path(path).read_text())
            except FileNotFoundError:
                raise ConfigError("", f"config file {path} not found") from None
            except json.JSONDecodeError as e:
                raise ConfigError("", f"config file {path} is not valid JSON: {e}") from None
            if not isinstance(d, dict):
                raise ConfigError("", "config root must be a JSON object")
        for item in overrides:
            apply_override(d, item)
        return cls.from_dict(d)


def apply_override(d: dict, item: str) -> None:
    """Set ``a.b=value`` in a nested dict; the value is parsed as JSON when it can be."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigError("", f"override {item!r} is not of the form key=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(key, "cannot set a field inside a non-object value")
    node[parts[-1]] = value


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union or str(origin) == "types.UnionType":
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
    if is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(path, f"expected an object, got {value!r}")
        return _build(tp, value, path + ".")
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(path, f"expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, f"expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, f"expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(path, f"expected a string, got {value!r}")
        return value
    if tp is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, f"expected a list, got {value!r}")
        return tuple(value)
    return value


def _build(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(prefix.rstrip("."), f"expected an object, got {d!r}")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.init}
    for k in d:
        if k not in known:
            raise ConfigError(prefix + k, "unknown field")
    kwargs = {k: _coerce(v, hints[k], prefix + k) for k, v in d.items()}
    if cls is GenConfig:
        kwargs = {k: (tuple(v) if isinstance(v, list) else v) for k, v in kwargs.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(prefix.rstrip(".") or cls.__name__, str(e)) from None
