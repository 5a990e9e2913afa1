"""Run configuration: one mapping per stage, validated before any stage runs."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any, Optional

from .augment import AugmentParams
from .features import stable_hash
from .gfn import BaselineConfig, GFNConfig
from .mcts_datagen import DatagenParams
from .prm import PRMTrainConfig


class ConfigError(ValueError):
    """A configuration value is missing, unknown or out of range."""


@dataclass
class EnvSection:
    kind: str = "arithchain"
    options: dict = field(default_factory=dict)

    def validate(self, prefix: str = "env") -> None:
        from .envs import make_env

        if self.kind not in ("arithchain", "flowgrid"):
            raise ConfigError(f"{prefix}.kind: unknown environment {self.kind!r}")
        try:
            make_env(self.spec())
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{prefix}: {exc}") from exc

    def spec(self) -> dict:
        return {"kind": self.kind, **self.options}


@dataclass
class GeneratorSection:
    kind: str = "env"
    max_tokens: int = 256
    endpoint: Optional[str] = None
    timeout: Optional[float] = None
    attempts: int = 3
    backoff: float = 0.5
    max_in_flight: int = 4

    def validate(self, prefix: str = "generator") -> None:
        if self.kind not in ("env", "llm"):
            raise ConfigError(f"{prefix}.kind: value {self.kind!r} out of range")
        for key in ("max_tokens", "attempts", "max_in_flight"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{prefix}.{key}: value {getattr(self, key)!r} out of range")


@dataclass
class ScorerSection:
    dim: int = 1 << 16
    hash_seed: int = 0
    ngram: int = 2
    mask_numbers: bool = False
    env_features: bool = True

    def validate(self, prefix: str = "prm_model") -> None:
        if self.dim < 1 or self.ngram < 1:
            raise ConfigError(f"{prefix}: dim and ngram must be >= 1")


@dataclass
class PolicySection:
    hash_dim: int = 1 << 12
    ngram: int = 2
    hash_seed: int = 0
    reward: str = "prm"

    def validate(self, prefix: str = "policy") -> None:
        if self.hash_dim < 0:
            raise ConfigError(f"{prefix}.hash_dim: value {self.hash_dim!r} out of range")
        if self.reward not in ("prm", "oracle"):
            raise ConfigError(f"{prefix}.reward: value {self.reward!r} out of range")


@dataclass
class SearchSection:
    k_values: list = field(default_factory=lambda: [1, 2, 4, 8])
    temperature: float = 0.8
    max_steps: int = 32
    prm: str = "trained"
    n_problems: Optional[int] = None

    def validate(self, prefix: str = "search") -> None:
        if not self.k_values or any(int(k) < 1 for k in self.k_values):
            raise ConfigError(f"{prefix}.k_values: value {self.k_values!r} out of range")
        if not self.temperature > 0:
            raise ConfigError(f"{prefix}.temperature: value {self.temperature!r} out of range")
        if self.max_steps < 1:
            raise ConfigError(f"{prefix}.max_steps: value {self.max_steps!r} out of range")
        if self.prm not in ("trained", "oracle"):
            raise ConfigError(f"{prefix}.prm: value {self.prm!r} out of range")


@dataclass
class EvalSection:
    samples_per_problem: int = 8
    n_problems: Optional[int] = None
    embed_dim: int = 512
    embed_seed: int = 0

    def validate(self, prefix: str = "eval") -> None:
        if self.samples_per_problem < 2:
            raise ConfigError(f"{prefix}.samples_per_problem: value {self.samples_per_problem!r} out of range")
        if self.embed_dim < 1:
            raise ConfigError(f"{prefix}.embed_dim: value {self.embed_dim!r} out of range")


SECTIONS = {
    "env": EnvSection,
    "generator": GeneratorSection,
    "datagen": DatagenParams,
    "augment": AugmentParams,
    "prm_model": ScorerSection,
    "prm": PRMTrainConfig,
    "policy": PolicySection,
    "gfn": GFNConfig,
    "baseline": BaselineConfig,
    "search": SearchSection,
    "eval": EvalSection,
}


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "run"
    workers: int = 1
    env: EnvSection = field(default_factory=EnvSection)
    generator: GeneratorSection = field(default_factory=GeneratorSection)
    datagen: DatagenParams = field(default_factory=DatagenParams)
    augment: AugmentParams = field(default_factory=AugmentParams)
    prm_model: ScorerSection = field(default_factory=ScorerSection)
    prm: PRMTrainConfig = field(default_factory=PRMTrainConfig)
    policy: PolicySection = field(default_factory=PolicySection)
    gfn: GFNConfig = field(default_factory=GFNConfig)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    search: SearchSection = field(default_factory=SearchSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def validate(self) -> None:
        if self.workers < 1:
            raise ConfigError(f"workers: value {self.workers!r} out of range")
        for name in SECTIONS:
            try:
                getattr(self, name).validate(name)
            except ConfigError:
                raise
            except ValueError as exc:
                raise ConfigError(str(exc)) from exc

    def stage_seed(self, stage: str) -> list[int]:
        """Seed material for a named, independent random stream of ``stage``."""
        return [int(self.seed), stable_hash(stage) % (1 << 32)]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, data: Any, path: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    if cls is EnvSection:
        data = dict(data)
        kind = data.pop("kind", "arithchain")
        return EnvSection(kind, data)
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}: unknown key")
    try:
        return cls(**data)
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    data = dict(data or {})
    top = {}
    for key in ("seed", "out_dir", "workers"):
        if key in data:
            top[key] = data.pop(key)
    sections = {}
    for name, cls in SECTIONS.items():
        sections[name] = _build(cls, data.pop(name, None), name)
    if data:
        raise ConfigError(f"{sorted(data)[0]}: unknown key")
    return RunConfig(**top, **sections)


def load_config(path: Optional[str]) -> RunConfig:
    """Read a YAML or JSON config; ``None`` gives the defaults."""
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    try:
        if path.endswith(".json"):
            data = json.loads(text)
        else:
            import yaml

            data = yaml.safe_load(text)
    except Exception as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return config_from_dict(data or {})


def bundled_config_path(name: str = "smoke.yaml") -> str:
    from importlib import resources

    return str(resources.files("stepflow.configs").joinpath(name))
