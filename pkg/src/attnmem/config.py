"""Nested experiment configuration, loaded from YAML and overridable by dotted paths."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError


@dataclass
class TokenizerSection:
    vocab_size: int = 640


@dataclass
class ModelSection:
    n_layers: int = 4
    n_heads: int = 4
    n_kv_heads: int = 4
    d_model: int = 128
    max_seq: int = 256
    d_mlp: int = 512
    ln_eps: float = 1e-5
    init_seed: int = 0


@dataclass
class BooksSection:
    n_books: int = 3
    keywords_per_book: int = 20
    length: int = 700
    min_occurrences: int = 3
    sentences_per_scene: int = 5
    input_len: int = 96
    label_len: int = 24
    step: int = 16


@dataclass
class FactsSection:
    n_subjects: int = 16
    templates: list[int] = field(default_factory=lambda: [0, 1, 2, 3])


@dataclass
class DataSection:
    books: BooksSection = field(default_factory=BooksSection)
    facts: FactsSection = field(default_factory=FactsSection)


@dataclass
class RecipeSection:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 3e-3
    warmup_steps: int = 50
    min_lr_frac: float = 0.1
    target_loss: float = 0.0
    memorize_threshold: float = 1.0
    eval_every: int = 10


@dataclass
class TrainSection:
    books: RecipeSection = field(default_factory=lambda: RecipeSection(memorize_threshold=0.95, eval_every=5))
    facts: RecipeSection = field(default_factory=lambda: RecipeSection(epochs=300, eval_every=25))


@dataclass
class Exp1Section:
    targets: list[str] = field(default_factory=lambda: ["K", "V", "KV"])
    n_new: int = 0  # 0 = enough tokens to spell out either target
    max_pairs: int = 0  # 0 = every pair
    checkpoint: str = ""  # empty = the train stage output for this config


@dataclass
class Exp2Section:
    source: str = "contextual"
    n_neurons: int = 1
    orient_signs: bool = True
    keyword_budget: int = 20
    head_budget: int = 2
    exclude_first_head: bool = True
    scopes: list[str] = field(default_factory=lambda: ["heads", "all"])
    methods: list[str] = field(default_factory=lambda: ["extracted", "planted", "random"])
    repetition_n: int = 3
    checkpoint: str = ""


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    tokenizer: TokenizerSection = field(default_factory=TokenizerSection)
    model: ModelSection = field(default_factory=ModelSection)
    data: DataSection = field(default_factory=DataSection)
    train: TrainSection = field(default_factory=TrainSection)
    exp1: Exp1Section = field(default_factory=Exp1Section)
    exp2: Exp2Section = field(default_factory=Exp2Section)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def section_hash(self, *sections: str) -> str:
        """Hash of the named top-level sections (plus the seed), for stage directory names."""
        d = self.to_dict()
        payload = {"seed": self.seed, **{s: d[s] for s in sections}}
        for s in sections:
            if isinstance(payload[s], dict):
                payload[s].pop("checkpoint", None)
        raw = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(raw).hexdigest()[:12]

    def validate(self) -> None:
        if self.tokenizer.vocab_size < 259:
            raise ConfigError("tokenizer.vocab_size must be at least 259")
        m = self.model
        if m.n_heads % m.n_kv_heads or m.d_model % m.n_heads:
            raise ConfigError("model.n_heads must divide d_model and be a multiple of model.n_kv_heads")
        bad = set(self.exp1.targets) - {"K", "V", "KV"}
        if bad or not self.exp1.targets:
            raise ConfigError(f"exp1.targets must be drawn from K, V, KV; got {self.exp1.targets}")
        if self.exp2.source not in ("contextual", "static"):
            raise ConfigError(f"exp2.source must be contextual or static; got {self.exp2.source!r}")
        bad = set(self.exp2.scopes) - {"heads", "all"}
        if bad or not self.exp2.scopes:
            raise ConfigError(f"exp2.scopes must be drawn from heads, all; got {self.exp2.scopes}")
        bad = set(self.exp2.methods) - {"extracted", "planted", "random"}
        if bad or not self.exp2.methods:
            raise ConfigError(f"exp2.methods must be drawn from extracted, planted, random; got {self.exp2.methods}")
        b = self.data.books
        if b.input_len + b.label_len > m.max_seq:
            raise ConfigError("data.books.input_len + label_len exceeds model.max_seq")


def _build(cls, values: dict, path: str):
    if not isinstance(values, dict):
        raise ConfigError(f"{path or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {path + key!r}")
        default = getattr(cls(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{path}{key}.")
        else:
            kwargs[key] = _coerce(value, default, path + key)
    return cls(**kwargs)


def _coerce(value: Any, default: Any, name: str):
    kind = type(default)
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        # YAML 1.1 reads "1e-3" as a string
        if isinstance(value, str):
            try:
                return float(value)
            except ValueError:
                pass
    elif isinstance(default, list):
        if isinstance(value, list):
            return value
    elif isinstance(value, kind):
        return value
    raise ConfigError(f"{name} expects {kind.__name__}, got {value!r}")


def from_dict(values: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, values or {}, "")
    cfg.validate()
    return cfg


def apply_override(values: dict, dotted: str, raw: str) -> None:
    """Set ``values[a][b]...`` from ``a.b...=raw``; ``raw`` is parsed as YAML."""
    keys = dotted.split(".")
    if not all(keys):
        raise ConfigError(f"malformed override {dotted!r}")
    node = values
    for k in keys[:-1]:
        node = node.setdefault(k, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted!r} descends into a scalar")
    try:
        node[keys[-1]] = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value for {dotted}: {exc}") from exc


def load(path: str | Path | None = None, overrides: dict[str, str] | None = None) -> ExperimentConfig:
    values: dict = {}
    if path is not None:
        try:
            values = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from exc
    for dotted, raw in (overrides or {}).items():
        apply_override(values, dotted, raw)
    return from_dict(values)
