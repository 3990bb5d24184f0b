#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
确定性指标内核: MAE、带并列处理的ROC AUC、带种子的bootstrap置信区间

随机数流: 第 b 次bootstrap迭代使用 numpy.random.default_rng([seed, b])
(PCG64, 由 SeedSequence([seed, b]) 播种)，与调度顺序和平台无关。
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, Field
from scipy.stats import rankdata

from src.core.errors import InputFormatError, NumericError

logger = logging.getLogger(__name__)

DEFAULT_N_BOOT = 1000
MAX_REDRAWS = 100


@dataclass(frozen=True)
class MetricEstimate:
    """点估计 + 百分位bootstrap置信区间"""

    value: float
    ci_low: float
    ci_high: float
    n_boot: int
    seed: int
    redraws: int = 0

    def to_dict(self) -> Dict[str, float]:
        return asdict(self)


def _as_1d(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} 含有非有限值")
    return arr


def mae(predictions: Sequence[float], truths: Sequence[float]) -> float:
    """平均绝对误差"""
    preds = _as_1d(predictions, "predictions")
    trues = _as_1d(truths, "truths")
    if preds.shape != trues.shape:
        raise InputFormatError(
            f"predictions 与 truths 长度不一致: {preds.size} != {trues.size}"
        )
    if preds.size == 0:
        raise InputFormatError("mae 需要非空输入")
    return float(np.mean(np.abs(preds - trues)))


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann–Whitney 形式的 ROC AUC: (一致对 + 0.5·并列对) / (n_pos·n_neg)

    使用平均秩处理并列分数。
    """
    s = _as_1d(scores, "scores")
    y = np.asarray(labels).reshape(-1).astype(bool)
    if s.shape != y.shape:
        raise InputFormatError(f"scores 与 labels 长度不一致: {s.size} != {y.size}")
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise NumericError(
            f"roc_auc 需要两个类别 (正例 {n_pos}, 负例 {n_neg})"
        )
    ranks = rankdata(s, method="average")
    u_stat = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u_stat / (n_pos * n_neg))


def recall_at_k(ranks: Sequence[int], k: int) -> float:
    """排名 ≤ k 的查询比例"""
    r = np.asarray(ranks)
    if r.size == 0:
        raise InputFormatError("recall_at_k 需要非空排名")
    return float(np.mean(r <= k))


def _resample_indices(rng: np.random.Generator, n: int,
                      groups: Optional[np.ndarray],
                      group_members: Optional[List[np.ndarray]]) -> np.ndarray:
    if groups is None:
        return rng.integers(0, n, size=n)
    picked = rng.integers(0, len(group_members), size=len(group_members))
    return np.concatenate([group_members[g] for g in picked])


def bootstrap_ci(metric: Callable[..., float],
                 samples: Sequence[Sequence],
                 n_boot: int = DEFAULT_N_BOOT,
                 seed: int = 0,
                 groups: Optional[Sequence] = None,
                 n_jobs: int = 1,
                 show_progress: bool = False) -> MetricEstimate:
    """百分位法bootstrap置信区间

    Args:
        metric: 指标函数, 按顺序接收 samples 中每个数组的重采样
        samples: 等长数组元组, 例如 (predictions, truths)
        n_boot: 重采样次数
        seed: 随机种子
        groups: 可选的分组标签 (如患者ID), 给出时按组重采样
        n_jobs: 并行线程数, 结果与线程数无关
        show_progress: 是否显示 tqdm 进度条

    Returns:
        MetricEstimate: 全样本点估计及 2.5/97.5 百分位区间
    """
    arrays = [np.asarray(a) for a in samples]
    if not arrays:
        raise InputFormatError("bootstrap_ci 需要至少一个样本数组")
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise InputFormatError("bootstrap_ci 的样本数组长度不一致")
    if n < 2:
        raise InputFormatError(f"bootstrap_ci 至少需要2个样本, 实际 {n}")
    if n_boot < 1:
        raise InputFormatError(f"n_boot 必须为正, 实际 {n_boot}")

    group_arr = None
    group_members = None
    if groups is not None:
        group_arr = np.asarray(groups)
        if len(group_arr) != n:
            raise InputFormatError("groups 长度与样本数不一致")
        _, inverse = np.unique(group_arr, return_inverse=True)
        group_members = [np.flatnonzero(inverse == g) for g in range(inverse.max() + 1)]

    point = float(metric(*arrays))

    def one_iterate(b: int):
        rng = np.random.default_rng([seed, b])
        for attempt in range(MAX_REDRAWS + 1):
            idx = _resample_indices(rng, n, group_arr, group_members)
            try:
                return float(metric(*[a[idx] for a in arrays])), attempt
            except NumericError:
                continue
        raise NumericError(
            f"bootstrap 第 {b} 次迭代连续 {MAX_REDRAWS} 次重抽样均退化"
        )

    iterates = range(n_boot)
    if show_progress:
        from tqdm import tqdm
        iterates = tqdm(iterates, desc="bootstrap", leave=False)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one_iterate, iterates))
    else:
        results = [one_iterate(b) for b in iterates]

    values = np.array([r[0] for r in results], dtype=np.float64)
    redraws = int(sum(r[1] for r in results))
    if redraws:
        logger.warning(f"bootstrap 共重抽样 {redraws} 次 (退化样本)")
    ci_low, ci_high = np.percentile(values, [2.5, 97.5], method="linear")
    return MetricEstimate(value=point, ci_low=float(ci_low), ci_high=float(ci_high),
                          n_boot=n_boot, seed=seed, redraws=redraws)


class EvalReport(BaseModel):
    """所有评估输出共用的 JSON 结构"""

    task: Optional[str] = None
    direction: Optional[str] = None
    n: int = 0
    mean_rank: Optional[float] = None
    recall: Dict[str, float] = Field(default_factory=dict)
    mcmrr: Optional[float] = None
    metrics: Dict[str, Dict[str, float]] = Field(default_factory=dict)

    def add_estimate(self, name: str, estimate: MetricEstimate) -> None:
        self.metrics[name] = estimate.to_dict()

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.to_json())
