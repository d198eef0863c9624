"""Validated configuration documents for the model, training and runs."""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .clustering import ClusterSpec
from .encoding import EncodingConfig


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelConfig(_Strict):
    d: int = Field(32, ge=1)
    heads: int = Field(8, ge=1)
    d_model: int = Field(32, ge=1)
    ffn_hidden: int = Field(32, ge=1)
    weight_hidden: int = Field(32, ge=1)
    dropout: float = Field(0.1, ge=0.0, lt=1.0)
    max_len: int = Field(50, ge=1)
    metadata_present: bool = False
    temporal: EncodingConfig = EncodingConfig()
    positional: EncodingConfig = EncodingConfig()
    clusterer: ClusterSpec = ClusterSpec(method="ward", k=5)
    weight_mode: Literal["learned", "equal", "exp_decay"] = "learned"
    decay_eps: float = Field(0.01, gt=0.0)
    loss: Literal["nll", "triplet"] = "nll"
    margin: float = 0.5
    learn_beta: bool = True

    @property
    def n_clusters(self) -> int:
        return self.clusterer.k

    @property
    def embed_len(self) -> int:
        return self.d + self.temporal.length + self.positional.length

    @property
    def weight_input_len(self) -> int:
        return self.d + self.max_len * self.temporal.length


class TrainConfig(_Strict):
    max_epochs: int = Field(100, ge=1)
    patience: int = Field(20, ge=1)
    batch_size: int = Field(128, ge=1)
    seed: int = 0
    stage: Literal["two_stage", "joint"] = "two_stage"
    lr: float = Field(1e-3, gt=0.0)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @model_validator(mode="after")
    def _check(self):
        if self.patience >= self.max_epochs:
            raise ValueError(f"patience ({self.patience}) must be below max_epochs ({self.max_epochs})")
        return self


class DataConfig(_Strict):
    split: str | None = None


class RunConfig(_Strict):
    """Everything a CLI run needs, in one JSON document."""

    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    seed: int = 0

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.model_validate_json(Path(path).read_text())

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))

    def hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:16]


def deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], val)
        else:
            out[key] = val
    return out
