"""Run configuration: one YAML document, validated by pydantic.

Every default used by the library lives here. Unknown keys are rejected and
the error names the dotted path of the offending key.
"""

from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from konvlina.attention import AttentionConfig
from konvlina.core.tensor import ConfigurationError
from konvlina.kan import SplineBasis
from konvlina.neck import NeckConfig

ABLATION_MODES = ("nearest", "enau", "enau+ckspp")


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SplineCfg(_Strict):
    degree: int = Field(3, ge=1)
    grid_size: int = Field(5, ge=1)
    lo: float = -1.0
    hi: float = 1.0

    @model_validator(mode="after")
    def _range(self):
        if not self.lo < self.hi:
            raise ValueError(f"spline range needs lo < hi, got [{self.lo}, {self.hi}]")
        return self

    def build(self) -> SplineBasis:
        return SplineBasis(self.degree, self.grid_size, self.lo, self.hi)


class AttentionCfg(_Strict):
    heads: int = Field(2, ge=1)
    head_dim: int = Field(8, ge=1)
    landmarks: int = Field(8, ge=1)
    registers: int = Field(4, ge=0)
    landmark_mode: Literal["segment-means", "strided-subset"] = "segment-means"
    pinv_iterations: int = Field(12, ge=1)
    pinv_warn_tol: float = Field(1e-2, gt=0)
    max_len: int = Field(1024, ge=1)

    def build(self) -> AttentionConfig:
        return AttentionConfig(**self.model_dump())


class NeckCfg(_Strict):
    c_out: int = Field(16, ge=1)
    c_red: int = Field(16, ge=1)
    scales: tuple[int, ...] = (1, 2, 3, 6)


class ModelCfg(_Strict):
    image_size: int = Field(64, ge=16)
    num_classes: int = Field(4, ge=1)
    widths: tuple[int, int, int, int] = (8, 16, 16, 16)


class TrainCfg(_Strict):
    mode: Literal["nearest", "enau", "enau+ckspp"] = "enau+ckspp"
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(8, ge=1)
    train_scenes: int = Field(128, ge=1)
    val_scenes: int = Field(32, ge=1)
    lr: float = Field(1e-3, gt=0)
    weight_decay: float = Field(5e-4, ge=0)
    # Adam first-moment coefficient; the reported "momentum 0.95" maps here.
    beta1: float = Field(0.95, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    # Global gradient-norm cap; 0 disables.
    grad_clip: float = Field(5.0, ge=0)
    flip_prob: float = Field(0.5, ge=0, le=1)
    iou_threshold: float = Field(0.5, gt=0, le=1)
    coco_sweep: bool = False
    score_threshold: float = Field(0.05, ge=0, le=1)
    nms_iou: float = Field(0.5, gt=0, le=1)
    max_detections: int = Field(20, ge=1)


class AblationCfg(_Strict):
    seeds: tuple[int, ...] = (0, 1, 2)

    @field_validator("seeds")
    @classmethod
    def _enough(cls, v):
        if len(v) < 3:
            raise ValueError(f"ablation needs at least 3 seeds, got {len(v)}")
        return v


class GradcheckCfg(_Strict):
    h: float = Field(1e-5, gt=0)
    tol: float = Field(1e-4, gt=0)


class BenchCfg(_Strict):
    n_values: tuple[int, ...] = (256, 512, 1024, 2048, 4096)
    m_values: tuple[int, ...] = (32,)
    heads: int = Field(1, ge=1)
    head_dim: int = Field(32, ge=1)
    repeats: int = Field(9, ge=1)
    warmup: int = Field(1, ge=0)
    pinv_iterations: int = Field(12, ge=1)

    @model_validator(mode="after")
    def _n_ge_m(self):
        if min(self.n_values) < max(self.m_values):
            raise ValueError("every N must be >= every m")
        return self


class RunConfig(_Strict):
    seed: int = Field(0, ge=0, lt=2**64)
    threads: Optional[int] = Field(None, ge=1)
    spline: SplineCfg = SplineCfg()
    attention: AttentionCfg = AttentionCfg()
    neck: NeckCfg = NeckCfg()
    model: ModelCfg = ModelCfg()
    train: TrainCfg = TrainCfg()
    ablation: AblationCfg = AblationCfg()
    gradcheck: GradcheckCfg = GradcheckCfg()
    bench: BenchCfg = BenchCfg()

    @model_validator(mode="after")
    def _widths(self):
        if self.attention.heads * self.attention.head_dim != self.neck.c_red:
            raise ValueError(f"attention heads*head_dim = {self.attention.heads * self.attention.head_dim} "
                             f"must equal neck.c_red = {self.neck.c_red}")
        return self

    def neck_config(self, mode: str | None = None) -> NeckConfig:
        mode = mode or self.train.mode
        return NeckConfig(c_out=self.neck.c_out, c_red=self.neck.c_red, scales=tuple(self.neck.scales),
                          upsample="nearest" if mode == "nearest" else "enau",
                          use_ckspp=mode == "enau+ckspp", attention=self.attention.build(),
                          basis=self.spline.build())

    def with_overrides(self, **paths) -> "RunConfig":
        """Copy with dotted-path overrides, e.g. ``with_overrides(**{"train.epochs": 2})``."""
        data = self.model_dump(mode="json")
        for path, value in paths.items():
            node = data
            *parents, leaf = path.split(".")
            for key in parents:
                node = node[key]
            node[leaf] = value
        return parse_config(data)


def _format_error(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        path = ".".join(str(p) for p in e["loc"]) or "<root>"
        parts.append(f"{path}: {e['msg']}")
    return "; ".join(parts)


def parse_config(data: dict | None) -> RunConfig:
    try:
        return RunConfig.model_validate(data or {})
    except ValidationError as err:
        raise ConfigurationError(f"invalid config: {_format_error(err)}") from None


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def loads_config(text: str) -> RunConfig:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as err:
        raise ConfigurationError(f"config is not valid YAML: {err}") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigurationError("config root must be a mapping")
    return parse_config(data)


def load_config(path) -> RunConfig:
    return loads_config(Path(path).read_text())


def save_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(dump_config(cfg))
