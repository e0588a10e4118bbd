"""Declarative run configuration (YAML), validated before any stage runs."""

from __future__ import annotations

from pathlib import Path
from typing import Any, Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", validate_assignment=True)


class DatasetSection(_Section):
    path: str = "interactions.tsv"
    format: Literal["tsv", "csv", "ml-1m", "custom"] = "tsv"
    delimiter: Optional[str] = None
    user_col: int = Field(0, ge=0)
    item_col: int = Field(1, ge=0)
    timestamp_col: int = Field(2, ge=0)
    skip_header: bool = False
    min_count: int = Field(5, ge=1)
    max_seq_len: int = Field(50, ge=1)


class BackboneSection(_Section):
    dim: int = Field(64, ge=1)
    n_blocks: int = Field(2, ge=1)
    n_heads: int = Field(2, ge=1)
    ff_mult: int = Field(4, ge=1)
    dropout: float = Field(0.2, ge=0.0, lt=1.0)
    lr: float = Field(1e-3, gt=0)
    batch_size: int = Field(256, ge=1)
    epochs: int = Field(200, ge=0)
    patience: int = Field(10, ge=1)


class MemorySection(_Section):
    granularity: Literal["user", "prefix"] = "user"
    approximate: bool = False
    n_cells: int = Field(16, ge=1)
    nprobe: int = Field(4, ge=1)


class RetrievalSection(_Section):
    k: int = Field(10, ge=1)
    lam: float = Field(1.0, ge=0.0)
    lr: float = Field(1e-3, gt=0)
    epochs: int = Field(50, ge=0)
    batch_size: int = Field(256, ge=1)
    patience: int = Field(10, ge=1)
    attention: Literal["learned", "cosine"] = "learned"


class FusionSection(_Section):
    rho: float = Field(0.01, gt=0.0, le=1.0)
    literal_alpha: bool = False
    fixed_alpha: Optional[float] = Field(None, ge=0.0, le=1.0)


class EvalSection(_Section):
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2])
    cutoffs: list[int] = Field(default_factory=lambda: [5, 10, 20])
    top_n: int = Field(20, ge=1)

    @field_validator("seeds")
    @classmethod
    def _unique_seeds(cls, v: list[int]) -> list[int]:
        if not v or len(set(v)) != len(v):
            raise ValueError("seeds must be a non-empty list of distinct integers")
        return v


class RunConfig(_Section):
    artifact_dir: str = "artifacts"
    threads: int = Field(1, ge=1)
    dataset: DatasetSection = Field(default_factory=DatasetSection)
    backbone: BackboneSection = Field(default_factory=BackboneSection)
    memory: MemorySection = Field(default_factory=MemorySection)
    retrieval: RetrievalSection = Field(default_factory=RetrievalSection)
    fusion: FusionSection = Field(default_factory=FusionSection)
    eval: EvalSection = Field(default_factory=EvalSection)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)


def _set_dotted(tree: dict[str, Any], dotted: str, value: Any) -> None:
    node = tree
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {dotted}: {part} is not a section")
    node[parts[-1]] = value


def build_config(raw: dict[str, Any] | None = None, overrides: dict[str, Any] | None = None,
                 base_dir: Path | None = None) -> RunConfig:
    tree = dict(raw or {})
    for key, value in (overrides or {}).items():
        _set_dotted(tree, key, value)
    try:
        cfg = RunConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(f"invalid configuration:\n{exc}") from None
    if base_dir is not None:
        # relative paths in a config file resolve against the file's directory
        if not Path(cfg.artifact_dir).is_absolute():
            cfg.artifact_dir = str(base_dir / cfg.artifact_dir)
        if not Path(cfg.dataset.path).is_absolute():
            cfg.dataset.path = str(base_dir / cfg.dataset.path)
    if cfg.backbone.dim % cfg.backbone.n_heads:
        raise ConfigError(f"backbone.dim {cfg.backbone.dim} must be divisible by n_heads {cfg.backbone.n_heads}")
    if cfg.dataset.format == "custom" and not cfg.dataset.delimiter:
        raise ConfigError("dataset.format 'custom' requires dataset.delimiter")
    return cfg


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    if path is None:
        return build_config({}, overrides)
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must contain a mapping")
    return build_config(raw, overrides, base_dir=path.resolve().parent)
