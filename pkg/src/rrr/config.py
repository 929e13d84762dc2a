"""Experiment configuration schema (YAML or JSON documents)."""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import ConfigError
from .model import ClassifierSpec
from .saliency import SaliencySpec
from .scenario import ScenarioSpec, SyntheticParams
from .strategies import TrainConfig

SCHEMA_VERSION = 1
OUTPUT_ROOT_ENV = "RRR_OUTPUT_ROOT"

for _cls in (ScenarioSpec, SyntheticParams, ClassifierSpec, TrainConfig, SaliencySpec):
    _cls.__pydantic_config__ = ConfigDict(extra="forbid")


class PerClassQuota(BaseModel):
    """Fixed buffer counts for the few-shot protocol."""
    model_config = ConfigDict(extra="forbid")
    base: int = Field(4, ge=0)
    novel: int = Field(1, ge=0)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    schema_version: Literal[1] = SCHEMA_VERSION
    name: str = "run"
    seed: int = 0
    output_dir: str = "runs/run"
    archive_checkpoints: bool = True
    pointing_game: bool = True
    buffer_capacity: int = Field(0, ge=0)
    buffer_per_class: PerClassQuota | None = None
    scenario: ScenarioSpec
    model: ClassifierSpec = ClassifierSpec()
    train: TrainConfig = TrainConfig()
    saliency: SaliencySpec = SaliencySpec()

    @model_validator(mode="after")
    def _consistent(self):
        checks = [
            ("scenario", self.scenario.validate),
            ("model", lambda: self.model.validate(self.scenario.image_size)),
            ("saliency", self.saliency.validate),
            ("train", lambda: self.train.validate(self.buffer_capacity)),
        ]
        for path, check in checks:
            try:
                check()
            except ConfigError as exc:
                raise ValueError(f"{path}: {exc}") from None
        if self.scenario.seed != 0:
            raise ValueError("scenario.seed: derived from the top-level seed; set `seed` instead")
        layer = self.saliency.target_layer
        if layer is not None and layer not in self.model.layer_names:
            raise ValueError(f"saliency.target_layer: {layer!r} is not a model layer "
                             f"{self.model.layer_names}")
        return self

    def digest(self) -> str:
        """Hash of everything that affects results (the output location does not)."""
        data = self.model_dump(mode="json", exclude={"output_dir"})
        return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()

    def resolved_output_dir(self) -> Path:
        out = Path(self.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            out = Path(root) / out
        return out

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping at the top level")
    return ExperimentConfig.model_validate(data)
