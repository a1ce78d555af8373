"""Declarative run configuration (YAML) for training and ablation."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from pmmsynth.errors import ConfigError
from pmmsynth.losses import LossWeights
from pmmsynth.seeding import derive_seed


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class WeightsConfig(_Strict):
    syn: float = Field(100.0, ge=0)
    rec: float = Field(30.0, ge=0)
    adv: float = Field(1.0, ge=0)

    def to_weights(self) -> LossWeights:
        return LossWeights(self.syn, self.rec, self.adv)


class SeedConfig(_Strict):
    global_: int = Field(0, alias="global")
    init: int | None = None
    schedule: int | None = None
    condition: int | None = None

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    def resolved(self) -> dict[str, int]:
        return {
            "global": self.global_,
            "init": self.init if self.init is not None else derive_seed(self.global_, "init"),
            "schedule": self.schedule if self.schedule is not None else derive_seed(self.global_, "schedule"),
            "condition": self.condition if self.condition is not None else derive_seed(self.global_, "condition"),
        }


class NetworkSection(_Strict):
    depth: int = Field(3, ge=1)
    base_channels: int = Field(16, ge=1)
    id_dim: int = Field(64, ge=2)
    pfm_hidden: int = Field(64, ge=1)
    disc_stages: int = Field(3, ge=1)
    disc_channels: int = Field(16, ge=1)


class TrainConfig(_Strict):
    corpus: str | None = None
    epochs: int = Field(200, ge=1)
    batch_size: int = Field(16, ge=1)
    lr0: float = Field(2e-4, gt=0)
    lr_plateau_epochs: int = Field(50, ge=0)
    lr_schedule: Literal["plateau_then_linear", "decay_to_plateau"] = "plateau_then_linear"
    betas: tuple[float, float] = (0.9, 0.999)
    weights: WeightsConfig = Field(default_factory=WeightsConfig)
    seeds: SeedConfig = Field(default_factory=SeedConfig)
    pfm_enabled: bool = True
    mcbs_enabled: bool = True
    network: NetworkSection = Field(default_factory=NetworkSection)
    test_fraction: float = Field(0.25, ge=0, lt=1)
    checkpoint_every: int = Field(0, ge=0)
    audit_gradients: bool = True
    eval_tasks: list[str] = Field(default_factory=list)
    threads: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _schedule_bounds(self) -> "TrainConfig":
        if self.lr_plateau_epochs > self.epochs:
            raise ValueError("lr_plateau_epochs must not exceed epochs")
        return self

    @property
    def effective_batch_size(self) -> int:
        return self.batch_size if self.mcbs_enabled else 1


class AblationConfig(_Strict):
    train: TrainConfig
    arms: list[Literal["full", "no_pfm", "no_mcbs"]] = Field(default_factory=lambda: ["full", "no_pfm"])
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    tasks: list[str] = Field(default_factory=list)
    split: Literal["train", "test", "all"] = "test"

    @field_validator("arms")
    @classmethod
    def _two_arms(cls, v: list[str]) -> list[str]:
        if len(set(v)) < 2:
            raise ValueError("an ablation needs at least two distinct arms")
        return v


def _format_error(exc: ValidationError) -> ConfigError:
    err = exc.errors()[0]
    where = ".".join(str(p) for p in err["loc"]) or "<root>"
    return ConfigError(f"{where}: {err['msg']}", field=where)


def parse_config(doc: dict[str, Any], model: type[BaseModel]) -> Any:
    try:
        return model.model_validate(doc or {})
    except ValidationError as exc:
        raise _format_error(exc) from None


def load_config(path: str | Path, model: type[BaseModel] = TrainConfig) -> Any:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found", field="config") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}", field="config") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a mapping", field="<root>")
    return parse_config(doc or {}, model)


def apply_overrides(cfg: BaseModel, overrides: dict[str, Any]) -> Any:
    """Return a copy with dotted-key overrides (``network.depth=2``) applied and revalidated."""
    doc = cfg.model_dump(by_alias=True)
    for key, value in overrides.items():
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"unknown override key {key}", field=key)
            node = node[p]
        node[parts[-1]] = value
    return parse_config(doc, type(cfg))
