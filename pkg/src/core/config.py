#!/usr/bin/env python
# -*- coding: utf-8 -*-

import os
import json
import hashlib
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Literal, Optional, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src import __version__
from src.core.errors import UsageError

logger = logging.getLogger(__name__)

THREADS_ENV_VAR = "CARDIOLENS_THREADS"


class TrainConfig(BaseModel):
    """对比训练配置

    默认值与原始训练设置一致 (lr 5e-5, 2000步预热, batch 1024, 50个epoch)，
    桌面规模运行请使用 desk_profile() 覆盖。
    """

    model_config = ConfigDict(extra="forbid")

    lr_max: float = Field(default=5e-5, ge=0.0)
    warmup_steps: int = Field(default=2000, ge=0)
    epochs: int = Field(default=50, ge=1)
    batch_size: int = Field(default=1024, ge=2)
    seed: int = 0
    d: int = Field(default=512, ge=1)
    val_every: int = Field(default=1, ge=1)
    log_temp_init: float = 2.6592600369327779  # ln(1/0.07)
    max_logit_scale: float = Field(default=100.0, gt=0.0)
    frames_per_video: int = Field(default=16, ge=1)

    def steps_per_epoch(self, n_pairs: int) -> int:
        return max(1, n_pairs // self.batch_size)

    def total_steps(self, n_pairs: int) -> int:
        return self.epochs * self.steps_per_epoch(n_pairs)

    def check_schedule(self, n_pairs: int) -> None:
        total = self.total_steps(n_pairs)
        if self.warmup_steps >= total:
            raise UsageError(
                f"warmup_steps ({self.warmup_steps}) 必须小于总步数 ({total})"
            )


def desk_profile(**overrides: Any) -> TrainConfig:
    """桌面规模训练配置: d=32, batch 64, 预热100步, lr_max=0.2

    lr_max 同样被覆盖 (默认 5e-5 → 0.2), overrides 中的值优先。
    """
    params: Dict[str, Any] = {"d": 32, "batch_size": 64, "warmup_steps": 100, "lr_max": 0.2}
    params.update(overrides)
    return TrainConfig(**params)


class RunConfig(BaseModel):
    """一次命令行运行的配置，写入运行清单"""

    model_config = ConfigDict(extra="forbid")

    command: str
    seed: int = 0
    output_dir: Path
    paths: Dict[str, str] = Field(default_factory=dict)
    params: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_paths(self) -> "RunConfig":
        for name, value in self.paths.items():
            if not value:
                raise ValueError(f"路径参数 {name} 为空")
        return self

    def config_hash(self) -> str:
        payload = json.dumps(
            self.model_dump(mode="json"), sort_keys=True, separators=(",", ":")
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def write_manifest(self) -> Path:
        """写入 run_manifest.json (时间戳只出现在这里)"""
        self.output_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "command": self.command,
            "config_hash": self.config_hash(),
            "seed": self.seed,
            "tool_version": __version__,
            "created_utc": datetime.now(timezone.utc).isoformat(),
            "config": self.model_dump(mode="json"),
        }
        path = self.output_dir / "run_manifest.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, ensure_ascii=False)
        logger.info(f"运行清单已写入: {path}")
        return path


def load_json_config(path: Optional[str]) -> Dict[str, Any]:
    """读取 JSON 配置文件，命令行参数随后覆盖其中的值"""
    if not path:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise UsageError(f"配置文件不存在: {path}") from e
    except json.JSONDecodeError as e:
        raise UsageError(f"配置文件不是合法JSON: {path}: {e}") from e
    if not isinstance(data, dict):
        raise UsageError(f"配置文件顶层必须是对象: {path}")
    return data


def build_train_config(base: Dict[str, Any], overrides: Dict[str, Any]) -> TrainConfig:
    """合并配置文件与命令行覆盖项 (None 表示未指定)"""
    merged = dict(base)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return desk_profile(**merged)
    except ValidationError as e:
        raise UsageError(f"训练配置无效: {e}") from e


class TokenizeOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    vocab: Optional[str] = None
    tokenizer: Literal["template", "bpe"] = "template"
    stats: bool = False
    bpe_vocab: Optional[str] = None
    bpe_merges: int = Field(default=1000, ge=0)
    context_length: int = Field(default=77, ge=3)
    seed: int = 0


class GenOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    patients: int = Field(default=200, ge=2)
    studies: int = Field(default=4, ge=1)
    seed: int = 0
    noise: float = Field(default=0.5, ge=0.0)
    event_fraction: float = Field(default=0.0, ge=0.0, le=1.0)
    geometry_seed: int = 0


class EncodeOptions(BaseModel):
    """encode 与 zeroshot 共用的编码器选项"""

    model_config = ConfigDict(extra="forbid")

    checkpoint: Optional[str] = None
    random_init: bool = False
    featurizer: Optional[Literal["bag", "slot"]] = None
    split_file: Optional[str] = None
    subset: Literal["all", "train", "val"] = "all"
    seed: int = 0
    vocab: Optional[str] = None


class ZeroshotOptions(EncodeOptions):
    mode: Literal["pooled", "averaged"] = "pooled"
    top_fraction: float = Field(default=0.2, ge=0.0, le=1.0)
    single_frame: bool = False
    n_boot: int = Field(default=1000, ge=1)
    by_patient: bool = False


class RetrievalOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    image_mode: Literal["first_frame", "mean_pool"] = "first_frame"
    ks: str = "1,5,10"


class CohortOptions(BaseModel):
    model_config = ConfigDict(extra="forbid")

    n_pairs: int = Field(default=1000, ge=1)
    events: Optional[str] = None
    window_days: int = Field(default=200, ge=0)
    n_boot: int = Field(default=1000, ge=1)
    seed: int = 0


OptionsT = TypeVar("OptionsT", bound=BaseModel)


def build_options(model: Type[OptionsT], config_path: Optional[str],
                  overrides: Dict[str, Any]) -> OptionsT:
    """配置文件 + 命令行覆盖 → 校验后的选项

    None 与未打开的开关 (False) 视为未指定, 保留配置文件中的值。
    """
    merged = load_json_config(config_path)
    merged.update({k: v for k, v in overrides.items() if v is not None and v is not False})
    try:
        return model(**merged)
    except ValidationError as e:
        raise UsageError(f"{model.__name__} 配置无效: {e}") from e


def threads_from_env() -> int:
    """读取 CARDIOLENS_THREADS，默认单线程"""
    raw = os.environ.get(THREADS_ENV_VAR)
    if raw is None or raw == "":
        return 1
    try:
        value = int(raw)
    except ValueError as e:
        raise UsageError(f"{THREADS_ENV_VAR} 必须是正整数, 实际为 {raw!r}") from e
    if value < 1:
        raise UsageError(f"{THREADS_ENV_VAR} 必须是正整数, 实际为 {value}")
    return value
