"""Experiment config: YAML validated against ``schema.json``, with ``--set`` overrides.

Numeric fields accept fractions written as strings, e.g. ``epsilon: 16/255``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Any

import jsonschema
import yaml

from .core import RAPConfig
from .data import SyntheticSpec
from .errors import InvalidConfigError
from .evaluation import Recipe
from .losses import LossSpec
from .models import ToyModelSpec

SCHEMA = json.loads(resources.files("rapattack").joinpath("schema.json").read_text())

FRACTION_FIELDS = {"epsilon", "alpha", "epsilon_n", "alpha_n"}


def as_number(v):
    if isinstance(v, str):
        try:
            return float(Fraction(v.replace(" ", "")))
        except (ValueError, ZeroDivisionError):
            raise InvalidConfigError(f"cannot read {v!r} as a number") from None
    return v


def apply_override(raw: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    key, sep, value = assignment.partition("=")
    if not sep or not key:
        raise InvalidConfigError(f"override {assignment!r} is not of the form key=value")
    node = raw
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise InvalidConfigError(f"override {assignment!r} descends into a non-mapping")
    node[parts[-1]] = yaml.safe_load(value)
    return raw


def _attack(d: dict) -> RAPConfig:
    d = dict(d)
    for k in FRACTION_FIELDS & d.keys():
        d[k] = as_number(d[k])
    if "loss" in d:
        d["loss"] = LossSpec(**d["loss"])
    if "checkpoints" in d:
        d["checkpoints"] = tuple(d["checkpoints"])
    return RAPConfig(**d)


def _recipe(v) -> Recipe:
    if isinstance(v, dict) and "overrides" in v:
        v = dict(v)
        v["overrides"] = {k: as_number(x) if k in FRACTION_FIELDS else x for k, x in v["overrides"].items()}
    return Recipe.parse(v)


@dataclass
class ExperimentConfig:
    output_dir: str
    models: dict[str, ToyModelSpec]
    surrogates: list
    targets: list[str]
    attack: RAPConfig
    recipes: dict[str, Recipe]
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic", "n_images": 200, "sample_seed": 7})
    world: SyntheticSpec = field(default_factory=SyntheticSpec)
    train: dict = field(default_factory=lambda: {"n_train": 6000, "n_test": 1000, "seed": 0})
    seed: int = 0
    seeds: list[int] | None = None
    workers: int = 1
    batch_size: int = 50
    model_store: str = "store"
    ablation: dict | None = None
    flatness: dict | None = None

    def __post_init__(self):
        if self.seeds is None:
            self.seeds = [self.seed]
        for name in self.targets + [m for s in self.surrogates for m in ([s] if isinstance(s, str) else s)]:
            if name not in self.models:
                raise InvalidConfigError(f"model {name!r} is used but not defined under 'models'")

    def to_dict(self) -> dict:
        """Canonical plain-data form; ``parse_config(to_dict())`` reproduces this config."""
        return {
            "output_dir": self.output_dir,
            "models": {k: _spec_dict(v) for k, v in sorted(self.models.items())},
            "surrogates": list(self.surrogates),
            "targets": list(self.targets),
            "attack": self.attack.to_dict(),
            "recipes": {k: v.to_dict() for k, v in self.recipes.items()},
            "dataset": dict(self.dataset),
            "world": {f.name: getattr(self.world, f.name) for f in fields(self.world)},
            "train": dict(self.train),
            "seed": self.seed,
            "seeds": list(self.seeds),
            "workers": self.workers,
            "batch_size": self.batch_size,
            "model_store": self.model_store,
            **({"ablation": self.ablation} if self.ablation is not None else {}),
            **({"flatness": self.flatness} if self.flatness is not None else {}),
        }


def _spec_dict(spec: ToyModelSpec) -> dict:
    d = {f.name: getattr(spec, f.name) for f in fields(spec)}
    d["widths"] = list(d["widths"])
    d["input_shape"] = list(d["input_shape"])
    return d


def validate(raw: dict):
    try:
        jsonschema.validate(raw, SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(map(str, e.absolute_path)) or "<root>"
        raise InvalidConfigError(f"config invalid at {where}: {e.message}") from None


def parse_config(raw: dict) -> ExperimentConfig:
    validate(raw)
    d = dict(raw)
    try:
        d["models"] = {k: ToyModelSpec(**v) for k, v in d["models"].items()}
        d["attack"] = _attack(d["attack"])
        d["recipes"] = {k: _recipe(v) for k, v in d["recipes"].items()}
        if "world" in d:
            d["world"] = SyntheticSpec(**d["world"])
        if d.get("ablation") and "values" in d["ablation"]:
            d["ablation"] = dict(d["ablation"], values=[as_number(v) for v in d["ablation"]["values"]])
        if d.get("flatness") and "magnitudes" in d["flatness"]:
            d["flatness"] = dict(d["flatness"], magnitudes=[as_number(v) for v in d["flatness"]["magnitudes"]])
        return ExperimentConfig(**d)
    except TypeError as e:
        raise InvalidConfigError(str(e)) from None


def load_config(path: str | Path, overrides: list[str] = ()) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise InvalidConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise InvalidConfigError(f"cannot parse {path}: {e}") from None
    for o in overrides:
        apply_override(raw, o)
    return parse_config(raw)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
