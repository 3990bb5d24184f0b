#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
零样本推断引擎

分类: 帧嵌入与正例提示嵌入的余弦相似度 (帧均值 × 提示均值)。
回归: 把数值代入多种措辞生成提示网格, 取相似度最高的前 20% 提示的数值中位数,
再对视频前 10 帧取平均。
"""

import os
import json
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from jsonschema import Draft7Validator

from src.core.errors import InputFormatError, UsageError

logger = logging.getLogger(__name__)

PLACEHOLDER = "X"
MAX_FRAMES = 10
DEFAULT_TOP_FRACTION = 0.2
MODES = ("pooled", "averaged")
TASKS_DIR = os.path.join(os.path.dirname(__file__), "tasks")

TextEncoder = Callable[[str], np.ndarray]

PROMPT_SET_SCHEMA = {
    "type": "object",
    "required": ["task", "type", "phrasings"],
    "properties": {
        "task": {"type": "string", "minLength": 1},
        "type": {"enum": ["binary", "regression"]},
        "phrasings": {"type": "array", "minItems": 1, "items": {"type": "string", "minLength": 1}},
        "lo": {"type": "integer"},
        "hi": {"type": "integer"},
        "unit": {"type": "string"},
    },
    "if": {"properties": {"type": {"const": "regression"}}},
    "then": {"required": ["lo", "hi"]},
    "additionalProperties": False,
}
_prompt_set_validator = Draft7Validator(PROMPT_SET_SCHEMA)


@dataclass(frozen=True)
class Prompt:
    phrasing_index: int
    value: int
    text: str


@dataclass
class PromptGrid:
    """数值提示网格, 顺序为措辞优先、数值升序"""

    phrasings: List[str]
    lo: int
    hi: int
    prompts: List[Prompt]
    embeddings: Optional[np.ndarray] = field(default=None, repr=False)

    def __len__(self) -> int:
        return len(self.prompts)

    @property
    def values(self) -> np.ndarray:
        return np.array([p.value for p in self.prompts], dtype=np.float64)

    @property
    def phrasing_indices(self) -> np.ndarray:
        return np.array([p.phrasing_index for p in self.prompts], dtype=np.int64)

    def texts(self) -> List[str]:
        return [p.text for p in self.prompts]

    def embed(self, encoder: TextEncoder) -> "PromptGrid":
        """用文本编码器生成提示嵌入 (单位向量, 每行一个提示)"""
        matrix = np.stack([np.asarray(encoder(t), dtype=np.float64) for t in self.texts()])
        self.embeddings = matrix
        return self


@dataclass
class ClassPromptSet:
    """描述正例的提示集合"""

    phrasings: List[str]
    embeddings: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not self.phrasings:
            raise InputFormatError("ClassPromptSet 至少需要一个提示")

    def embed(self, encoder: TextEncoder) -> "ClassPromptSet":
        self.embeddings = np.stack([np.asarray(encoder(t), dtype=np.float64)
                                    for t in self.phrasings])
        return self


@dataclass(frozen=True)
class PromptSetFile:
    """任务提示文件的内容"""

    task: str
    type: str
    phrasings: Tuple[str, ...]
    lo: Optional[int] = None
    hi: Optional[int] = None
    unit: str = ""

    def grid(self) -> PromptGrid:
        if self.type != "regression":
            raise UsageError(f"任务 {self.task} 不是回归任务")
        return build_prompt_grid(list(self.phrasings), self.lo, self.hi)

    def class_prompts(self) -> ClassPromptSet:
        if self.type != "binary":
            raise UsageError(f"任务 {self.task} 不是二分类任务")
        return ClassPromptSet(phrasings=list(self.phrasings))


def build_prompt_grid(phrasings: Sequence[str], lo: int, hi: int) -> PromptGrid:
    """构造提示网格

    Args:
        phrasings: 含且仅含一个占位符 X 的措辞
        lo: 数值下界 (含)
        hi: 数值上界 (含)

    Returns:
        PromptGrid: |phrasings| × (hi - lo + 1) 个提示
    """
    if not phrasings:
        raise InputFormatError("至少需要一个措辞")
    if lo > hi:
        raise InputFormatError(f"数值范围非法: lo={lo} > hi={hi}")
    for i, phrasing in enumerate(phrasings):
        count = phrasing.count(PLACEHOLDER)
        if count != 1:
            raise InputFormatError(
                f"第 {i} 个措辞应恰好包含一个占位符 {PLACEHOLDER}, 实际 {count} 个: {phrasing!r}"
            )
    prompts = [
        Prompt(phrasing_index=i, value=v, text=phrasing.replace(PLACEHOLDER, str(v)))
        for i, phrasing in enumerate(phrasings)
        for v in range(lo, hi + 1)
    ]
    return PromptGrid(phrasings=list(phrasings), lo=lo, hi=hi, prompts=prompts)


def _frame_matrix(frame_embs, limit: Optional[int] = MAX_FRAMES) -> np.ndarray:
    frames = np.asarray(frame_embs, dtype=np.float64)
    if frames.ndim == 1:
        frames = frames[None, :]
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise InputFormatError("至少需要一帧嵌入")
    return frames[:limit] if limit else frames


def _check_dims(frames: np.ndarray, prompts: np.ndarray) -> None:
    if prompts is None:
        raise UsageError("提示尚未生成嵌入, 请先调用 embed()")
    if prompts.ndim != 2 or prompts.shape[0] == 0:
        raise InputFormatError("至少需要一个提示嵌入")
    if frames.shape[1] != prompts.shape[1]:
        raise InputFormatError(
            f"维度不一致: 帧 {frames.shape[1]}, 提示 {prompts.shape[1]}"
        )


def zeroshot_classify(frame_embs, prompt_embs, single_frame: bool = False) -> float:
    """零样本分类得分

    Args:
        frame_embs: 帧嵌入 (F × d), 仅使用前 10 帧
        prompt_embs: 正例提示嵌入 (P × d) 或已嵌入的 ClassPromptSet
        single_frame: 只使用第一帧

    Returns:
        float: 帧均值(提示均值(余弦相似度))
    """
    if isinstance(prompt_embs, ClassPromptSet):
        prompt_embs = prompt_embs.embeddings
    frames = _frame_matrix(frame_embs, 1 if single_frame else MAX_FRAMES)
    prompts = None if prompt_embs is None else np.asarray(prompt_embs, dtype=np.float64)
    if prompts is not None and prompts.ndim == 1:
        prompts = prompts[None, :]
    _check_dims(frames, prompts)
    sims = np.clip(frames @ prompts.T, -1.0, 1.0)
    return float(sims.mean(axis=1).mean())


def _select_median(sims: np.ndarray, values: np.ndarray, tiebreak: np.ndarray,
                   top_fraction: float) -> float:
    k = math.ceil(top_fraction * sims.size)
    # lexsort 以最后一个键为主键
    order = np.lexsort((tiebreak, values, -sims))
    return float(np.median(values[order[:k]]))


def zeroshot_regress_frame(frame_emb, grid: PromptGrid,
                           top_fraction: float = DEFAULT_TOP_FRACTION,
                           mode: str = "pooled") -> float:
    """单帧零样本回归

    pooled: 所有措辞的提示合并为一个候选集;
    averaged: 同一数值的各措辞相似度先取平均, 再在数值上选取。
    """
    if not 0.0 < top_fraction <= 1.0:
        raise UsageError(f"top_fraction 必须在 (0, 1] 内, 实际 {top_fraction}")
    if mode not in MODES:
        raise UsageError(f"未知的回归模式: {mode}")
    if len(grid) == 0:
        raise InputFormatError("提示网格为空")
    frame = np.asarray(frame_emb, dtype=np.float64).reshape(1, -1)
    _check_dims(frame, grid.embeddings)
    sims = np.clip(grid.embeddings @ frame[0], -1.0, 1.0)

    if mode == "pooled":
        return _select_median(sims, grid.values, grid.phrasing_indices, top_fraction)

    n_values = grid.hi - grid.lo + 1
    by_value = sims.reshape(len(grid.phrasings), n_values).mean(axis=0)
    values = np.arange(grid.lo, grid.hi + 1, dtype=np.float64)
    return _select_median(by_value, values, np.zeros(n_values, dtype=np.int64), top_fraction)


def zeroshot_regress_video(frame_embs, grid: PromptGrid,
                           top_fraction: float = DEFAULT_TOP_FRACTION,
                           mode: str = "pooled") -> float:
    """视频级零样本回归: 前 min(10, F) 帧逐帧预测的算术平均"""
    frames = _frame_matrix(frame_embs)
    predictions = [zeroshot_regress_frame(f, grid, top_fraction, mode) for f in frames]
    return float(np.mean(predictions))


def _map_videos(fn, videos: Mapping[str, np.ndarray], n_jobs: int) -> Dict[str, float]:
    keys = sorted(videos)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(lambda k: fn(videos[k]), keys))
    else:
        results = [fn(videos[k]) for k in keys]
    return dict(zip(keys, results))


def classify_videos(videos: Mapping[str, np.ndarray], prompts: ClassPromptSet,
                    single_frame: bool = False, n_jobs: int = 1) -> Dict[str, float]:
    """批量分类, 返回 {视频ID: 得分}"""
    scores = _map_videos(lambda f: zeroshot_classify(f, prompts, single_frame), videos, n_jobs)
    logger.info(f"零样本分类完成: {len(scores)} 段视频")
    return scores


def regress_videos(videos: Mapping[str, np.ndarray], grid: PromptGrid,
                   top_fraction: float = DEFAULT_TOP_FRACTION, mode: str = "pooled",
                   n_jobs: int = 1) -> Dict[str, float]:
    """批量回归, 返回 {视频ID: 预测值}"""
    preds = _map_videos(lambda f: zeroshot_regress_video(f, grid, top_fraction, mode),
                        videos, n_jobs)
    logger.info(f"零样本回归完成: {len(preds)} 段视频, 网格 {len(grid)} 个提示, 模式 {mode}")
    return preds


def parse_prompt_set(document) -> PromptSetFile:
    """校验并解析提示集 JSON (字符串或已解析的字典)"""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise InputFormatError(f"提示集不是合法的JSON: {e}") from e
    errors = sorted(_prompt_set_validator.iter_errors(document), key=lambda e: list(e.path))
    if errors:
        first = errors[0]
        location = "/".join(str(p) for p in first.path) or "<root>"
        raise InputFormatError(f"提示集格式错误 ({location}): {first.message}")
    prompt_set = PromptSetFile(
        task=document["task"],
        type=document["type"],
        phrasings=tuple(document["phrasings"]),
        lo=document.get("lo"),
        hi=document.get("hi"),
        unit=document.get("unit", ""),
    )
    if prompt_set.type == "regression":
        # 提前校验占位符与范围
        build_prompt_grid(list(prompt_set.phrasings), prompt_set.lo, prompt_set.hi)
    return prompt_set


def load_prompt_set(path_or_task: str) -> PromptSetFile:
    """按文件路径或内置任务名加载提示集"""
    path = path_or_task
    if not os.path.exists(path):
        path = os.path.join(TASKS_DIR, f"{path_or_task}.json")
    if not os.path.exists(path):
        raise UsageError(f"找不到提示集: {path_or_task}")
    with open(path, "r", encoding="utf-8") as f:
        return parse_prompt_set(f.read())


def builtin_tasks() -> List[str]:
    return sorted(os.path.splitext(name)[0] for name in os.listdir(TASKS_DIR)
                  if name.endswith(".json"))
