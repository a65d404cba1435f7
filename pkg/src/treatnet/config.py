"""Run configuration: one JSON document with sections gen, schema, model, train and eval.

Every section defaults to the reference values of the dataclasses it wraps.
Unknown keys are rejected so a typo never silently falls back to a default.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .metrics import SPEC_TARGETS
from .model import FusionConfig
from .synthgen import GenConfig
from .tabular import FeatureSchema, reference_schema
from .train import TrainConfig

DEFAULT_SEED = 17
SEED_ENV = "TREAT_SEED"
RESOLVED_NAME = "resolved_config.json"
SECTIONS = ("gen", "schema", "model", "train", "eval")


class ConfigError(ValueError):
    pass


@dataclass
class EvalConfig:
    seeds: list[int] = field(default_factory=lambda: [DEFAULT_SEED])
    spec_targets: list[float] = field(default_factory=lambda: list(SPEC_TARGETS))
    agreement_spec: float = 0.4
    fractions: list[float] = field(default_factory=lambda: [0.1, 0.25, 0.5, 0.75, 1.0])
    split_seed: int = 0

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("eval.seeds must not be empty")
        for f in self.fractions:
            if not 0.0 < f <= 1.0:
                raise ConfigError(f"eval.fractions entries must lie in (0, 1], got {f}")


@dataclass
class RunConfig:
    gen: GenConfig = field(default_factory=GenConfig)
    schema: dict | None = None
    model: FusionConfig = field(default_factory=FusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    # phase-1 overrides on top of ``train``
    train_tabular: dict = field(default_factory=dict)
    eval: EvalConfig = field(default_factory=EvalConfig)
    # True when the seed came from the config document itself
    seed_from_config: bool = False

    def feature_schema(self) -> FeatureSchema:
        return reference_schema() if self.schema is None else FeatureSchema.from_dict(self.schema)

    def tabular_train(self) -> TrainConfig:
        return replace(self.train, **{"phase": "tabular", **self.train_tabular})

    def fusion_train(self) -> TrainConfig:
        return replace(self.train, phase="fusion")

    def to_dict(self) -> dict:
        gen = asdict(self.gen)
        gen.pop("schema")
        train = asdict(self.train)
        train.pop("phase")
        if self.train_tabular:
            train["tabular"] = dict(self.train_tabular)
        return {
            "gen": gen,
            "schema": self.schema if self.schema is not None else reference_schema().to_dict(),
            "model": asdict(self.model),
            "train": train,
            "eval": asdict(self.eval),
        }


def _build(cls, section: str, data: Any, exclude: tuple[str, ...] = ()):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    known = {f.name for f in fields(cls)} - set(exclude)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    schema = doc.get("schema")
    if schema is not None:
        try:
            FeatureSchema.from_dict(schema)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid 'schema' section: {exc}") from exc
    train_doc = dict(doc.get("train", {}))
    tab_overrides = train_doc.pop("tabular", {})
    train = _build(TrainConfig, "train", train_doc, exclude=("phase",))
    # validate the overrides by building the phase-1 config once
    _build(TrainConfig, "train.tabular", {**asdict(train), **tab_overrides, "phase": "tabular"})
    gen = _build(GenConfig, "gen", doc.get("gen", {}), exclude=("schema",))
    return RunConfig(
        gen=replace(gen, schema=schema),
        schema=schema,
        model=_build(FusionConfig, "model", doc.get("model", {})),
        train=train,
        train_tabular=dict(tab_overrides),
        eval=_build(EvalConfig, "eval", doc.get("eval", {})),
        seed_from_config="seed" in train_doc,
    )


def load(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from exc
    return from_dict(doc)


def resolve_seed(cfg: RunConfig, flag: int | None, env: dict | None = None) -> int:
    """Seed precedence: command-line flag, then the config file, then $TREAT_SEED, then 17."""
    if flag is not None:
        return int(flag)
    if cfg.seed_from_config:
        return cfg.train.seed
    env = os.environ if env is None else env
    raw = env.get(SEED_ENV)
    if raw not in (None, ""):
        try:
            return int(raw)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from exc
    return DEFAULT_SEED


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    return replace(cfg, train=replace(cfg.train, seed=seed))


def write_resolved(cfg: RunConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / RESOLVED_NAME
    path.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
