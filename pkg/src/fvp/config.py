"""One JSON document drives every command.

Unknown keys are rejected with their dotted path. ``--set a.b=value`` style
overrides are applied to the raw document before validation, so they obey
the same rules. Values are parsed as JSON when possible and kept as strings
otherwise. The environment variable ``FVP_SEED`` replaces the top-level seed.
"""
from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, ValidationError, model_validator

from fvp.env import SceneConfig
from fvp.probe import ProbeConfig
from fvp.trainer import PretrainConfig

RUN_SCHEMA_VERSION = 1
SEED_ENV = "FVP_SEED"


class ConfigError(ValueError):
    pass


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_trajectories: int = 50
    held_out_trajectories: int = 10
    # held-out corpora use seed + held_out_seed_offset so they never overlap training
    held_out_seed_offset: int = 1000
    split: Literal["train", "held_out"] = "train"

    @model_validator(mode="after")
    def _check(self):
        if self.n_trajectories < 1 or self.held_out_trajectories < 1:
            raise ValueError("trajectory counts must be >= 1")
        if self.held_out_seed_offset == 0:
            raise ValueError("held_out_seed_offset must be non-zero")
        return self


class EvalConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_pairs: int = 16

    @model_validator(mode="after")
    def _check(self):
        if self.n_pairs < 1:
            raise ValueError("n_pairs must be >= 1")
        return self


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    schema_version: Literal[1] = RUN_SCHEMA_VERSION
    seed: int = 0
    scene: SceneConfig = SceneConfig()
    data: DataConfig = DataConfig()
    pretrain: PretrainConfig = PretrainConfig()
    probe: ProbeConfig = ProbeConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="before")
    @classmethod
    def _single_seed(cls, data):
        if isinstance(data, dict) and isinstance(data.get("pretrain"), dict) and "rng_seed" in data["pretrain"]:
            raise ValueError("pretrain.rng_seed is derived from the top-level seed; set seed instead")
        return data

    @property
    def corpus_seed(self) -> int:
        if self.data.split == "train":
            return self.seed
        return self.seed + self.data.held_out_seed_offset

    @property
    def corpus_size(self) -> int:
        return self.data.n_trajectories if self.data.split == "train" else self.data.held_out_trajectories

    def pretrain_config(self) -> PretrainConfig:
        return self.pretrain.model_copy(update={"rng_seed": self.seed})

    def probe_config(self) -> ProbeConfig:
        """Probe settings with every ablation seed shifted by the run seed."""
        return self.probe.model_copy(update={"seeds": tuple(self.seed + s for s in self.probe.seeds)})


def parse_override(item: str) -> tuple[list[str], object]:
    key, sep, text = item.partition("=")
    key = key.strip()
    if not sep or not key:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    parts = key.split(".")
    if any(not p for p in parts):
        raise ConfigError(f"override key {key!r} has an empty path segment")
    try:
        value = json.loads(text)
    except json.JSONDecodeError:
        value = text
    return parts, value


def apply_override(doc: dict, path: list[str], value) -> None:
    node = doc
    for i, part in enumerate(path[:-1]):
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(f"cannot set {'.'.join(path)}: {'.'.join(path[: i + 1])} is not a section")
        node = child
    node[path[-1]] = value


def _describe(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        if err["type"] == "extra_forbidden":
            lines.append(f"unknown key '{loc}'")
        else:
            lines.append(f"{loc or '<root>'}: {err['msg']}")
    return "; ".join(lines)


def build_config(doc: dict, overrides: list[str] = (), env: dict | None = None) -> RunConfig:
    doc = json.loads(json.dumps(doc))  # deep copy, JSON types only
    for item in overrides:
        apply_override(doc, *parse_override(item))
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        try:
            doc["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    try:
        return RunConfig.model_validate(doc)
    except ValidationError as exc:
        raise ConfigError(_describe(exc)) from exc


def load_config(path=None, overrides: list[str] = (), env: dict | None = None) -> RunConfig:
    doc: dict = {}
    if path is not None:
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return build_config(doc, overrides, env)


def dump_config(config: RunConfig) -> str:
    doc = config.model_dump(mode="json", exclude={"pretrain": {"rng_seed"}})
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"
