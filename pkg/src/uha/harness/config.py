"""Experiment configuration, validated with pydantic."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..bounds import GROUPS

Method = Literal["plain_vi", "iw", "uha", "hais"]
Group = Literal["q", "eps", "eta", "Sigma", "beta", "eps_of_beta", "psi_of_beta"]

DEFAULT_TRAINABLE = {"uha": ["q", "eps", "eta"], "iw": ["q"], "plain_vi": ["q"], "hais": []}


class TargetSpec(BaseModel):
    model_config = ConfigDict(extra="forbid")

    kind: Literal["student_t", "gaussian", "logistic"]
    dim: int | None = Field(None, ge=1)
    nu: float = Field(3.0, gt=0)
    dataset: str | None = None
    n_features: int | None = Field(None, ge=1)
    max_rows: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "logistic":
            if self.dataset is None:
                raise ValueError("logistic targets need a dataset path")
        elif self.dim is None:
            raise ValueError(f"{self.kind} targets need dim")
        return self


class GridConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    etas: list[float] = [0.5, 0.9, 0.99]
    target_rejection_rates: list[float] = [0.05, 0.25, 0.5]
    pilot_draws: int = Field(64, ge=2)
    eps_hi: float = Field(4.0, gt=0)


class ExperimentConfig(BaseModel):
    """One optimize/evaluate experiment, repeated over ``n_seeds`` derived seeds."""

    model_config = ConfigDict(extra="forbid")

    method: Method
    target: TargetSpec
    K: int = Field(1, ge=1)
    trainable: list[Group] | None = None
    steps: int = Field(5000, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rates: list[float] = Field(default_factory=lambda: [1e-3, 1e-4, 1e-5], min_length=1)
    eval_draws: int = Field(10_000, ge=2)
    base_seed: int = Field(0, ge=0)
    n_seeds: int = Field(4, ge=1)
    init_q: Literal["standard", "plain_vi"] = "plain_vi"
    vi_steps: int | None = Field(None, ge=1)
    init_eps: float = Field(0.05, gt=0)
    init_eta: float = Field(0.5, gt=0, lt=1)
    eps_max: float = Field(0.5, gt=0)
    grid: GridConfig | None = None
    output: str | None = None

    @model_validator(mode="after")
    def _check(self):
        if self.trainable is None:
            self.trainable = list(DEFAULT_TRAINABLE[self.method])
        if self.method == "hais":
            if self.trainable:
                raise ValueError("hais has no gradient-trainable groups; use the grid block")
            if self.grid is None:
                self.grid = GridConfig()
        elif self.grid is not None:
            raise ValueError(f"grid block only applies to method hais, not {self.method}")
        if self.method in ("iw", "plain_vi") and set(self.trainable) - {"q"}:
            raise ValueError(f"{self.method} can only train q")
        if self.method == "plain_vi" and self.K != 1:
            raise ValueError("plain_vi uses K = 1")
        if self.method == "uha" and self.K < 2 and set(self.trainable) - {"q"}:
            raise ValueError("K = 1 has no transitions; only q is trainable")
        if not self.init_eps < self.eps_max:
            raise ValueError("init_eps must be below eps_max")
        return self

    def content_hash(self) -> str:
        payload = self.model_dump(mode="json", exclude={"output"})
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


class Table1Config(BaseModel):
    model_config = ConfigDict(extra="forbid")

    dims: list[int] = [20, 200, 500]
    uha_Ks: list[int] = [4, 16, 64, 128]
    iw_Ks: list[int] = [128, 1024]
    nu: float = 3.0
    steps: int = Field(5000, ge=1)
    learning_rates: list[float] = [1e-3]
    batch_size: int = Field(16, ge=1)
    iw_batch_size: int | None = Field(None, ge=1)
    eval_draws: int = Field(10_000, ge=2)
    n_seeds: int = Field(4, ge=1)
    base_seed: int = Field(0, ge=0)
    init_eps: float = Field(0.2, gt=0)
    init_eta: float = Field(0.5, gt=0, lt=1)
    eps_max: float = Field(1.0, gt=0)
    output: str | None = None

    @model_validator(mode="after")
    def _check(self):
        if not self.init_eps < self.eps_max:
            raise ValueError("init_eps must be below eps_max")
        return self


class SubsetsConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    experiment: ExperimentConfig
    subsets: list[list[Group]] = Field(min_length=1)


def format_validation_error(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        path = ".".join(str(p) for p in err["loc"]) or "<root>"
        lines.append(f"{path}: {err['msg']}")
    return "\n".join(lines)


def load_config(path: str | Path, model=ExperimentConfig):
    """Parse a JSON config file; pydantic errors carry field paths."""
    text = Path(path).read_text()
    return model.model_validate_json(text)


__all__ = [
    "GROUPS",
    "TargetSpec",
    "GridConfig",
    "ExperimentConfig",
    "Table1Config",
    "SubsetsConfig",
    "format_validation_error",
    "load_config",
    "ValidationError",
]
