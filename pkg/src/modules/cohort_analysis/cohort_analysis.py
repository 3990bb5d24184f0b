#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
基于余弦相似度的队列分析: 同一患者判别与术前/术后时间线
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date
from itertools import combinations
from typing import Dict, List, Mapping, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from src.core.errors import InputFormatError, UsageError
from src.modules.embedding_store.embedding_store import (EmbeddingRecord, EmbeddingStore,
                                                         cosine_similarity)
from src.modules.metrics.metrics import MetricEstimate, bootstrap_ci, roc_auc

logger = logging.getLogger(__name__)

RELATIONS = ("same_study", "same_patient_diff_study", "diff_patient")
DEFAULT_WINDOW_DAYS = 200
TIMELINE_COLUMNS = ["patient_id", "event_date", "record_id", "day_offset", "similarity", "is_anchor"]


@dataclass(frozen=True)
class PairSample:
    """一对图像嵌入及其元数据关系"""

    a: EmbeddingRecord = field(repr=False)
    b: EmbeddingRecord = field(repr=False)
    relation: str
    similarity: float

    @property
    def ids(self) -> Tuple[str, str]:
        return self.a.id, self.b.id


def relation_of(a: EmbeddingRecord, b: EmbeddingRecord) -> str:
    """仅由元数据推断关系"""
    if a.patient_id != b.patient_id:
        return "diff_patient"
    if a.study_id == b.study_id:
        return "same_study"
    return "same_patient_diff_study"


def _class_groups(records: List[EmbeddingRecord]) -> Dict[str, List[List[int]]]:
    by_study: Dict[str, List[int]] = {}
    by_patient: Dict[str, List[int]] = {}
    for idx, r in enumerate(records):
        by_study.setdefault(r.study_id, []).append(idx)
        by_patient.setdefault(r.patient_id, []).append(idx)
    return {
        "same_study": [by_study[k] for k in sorted(by_study)],
        "same_patient_diff_study": [by_patient[k] for k in sorted(by_patient)],
        "diff_patient": [list(range(len(records)))],
    }


def _group_pair_counts(relation: str, group: List[int],
                       records: List[EmbeddingRecord]) -> int:
    m = len(group)
    total = m * (m - 1) // 2
    if relation == "same_study":
        return total
    if relation == "same_patient_diff_study":
        sizes = pd.Series([records[i].study_id for i in group]).value_counts().to_numpy()
        return int(total - np.sum(sizes * (sizes - 1) // 2))
    sizes = pd.Series([records[i].patient_id for i in group]).value_counts().to_numpy()
    return int(total - np.sum(sizes * (sizes - 1) // 2))


def _sample_class(relation: str, groups: List[List[int]], records: List[EmbeddingRecord],
                  n: int, rng: np.random.Generator) -> List[Tuple[int, int]]:
    counts = np.array([_group_pair_counts(relation, g, records) for g in groups], dtype=np.float64)
    total = int(counts.sum())
    if total == 0:
        raise InputFormatError(f"无法采样关系 {relation}: 没有满足条件的图像对")

    if total <= n:
        # 全部枚举
        if total < n:
            logger.warning(f"{relation} 只有 {total} 对, 少于请求的 {n} 对")
        pairs = []
        for g in groups:
            for i, j in combinations(g, 2):
                if relation_of(records[i], records[j]) == relation:
                    pairs.append((i, j))
        return sorted(pairs)

    probs = counts / counts.sum()
    seen: Set[Tuple[int, int]] = set()
    pairs = []
    while len(pairs) < n:
        g = groups[rng.choice(len(groups), p=probs)]
        i, j = rng.choice(len(g), size=2, replace=False)
        a, b = sorted((g[i], g[j]))
        if relation_of(records[a], records[b]) != relation or (a, b) in seen:
            continue
        seen.add((a, b))
        pairs.append((a, b))
    return pairs


def sample_pairs(store: EmbeddingStore, n_per_relation: int, seed: int) -> List[PairSample]:
    """按关系类别均匀随机采样图像对 (尽量不放回)

    Args:
        store: 嵌入存储, 使用其中的图像记录
        n_per_relation: 每个关系类别的对数
        seed: 随机种子

    Returns:
        List[PairSample]: 按 RELATIONS 顺序排列
    """
    if n_per_relation < 1:
        raise UsageError(f"n_per_relation 必须为正, 实际 {n_per_relation}")
    ids, _ = store.candidates("image")
    records = [store.get(i) for i in ids]
    if len({r.patient_id for r in records}) < 2:
        raise InputFormatError("sample_pairs 至少需要两位患者")
    groups = _class_groups(records)
    samples: List[PairSample] = []
    for rel_idx, relation in enumerate(RELATIONS):
        rng = np.random.default_rng([seed, rel_idx])
        for a, b in _sample_class(relation, groups[relation], records, n_per_relation, rng):
            ra, rb = records[a], records[b]
            samples.append(PairSample(a=ra, b=rb, relation=relation,
                                      similarity=cosine_similarity(ra.embedding, rb.embedding)))
    logger.info(
        "采样图像对: " + ", ".join(
            f"{rel} {sum(1 for s in samples if s.relation == rel)}" for rel in RELATIONS)
    )
    return samples


def relation_summary(pairs: Sequence[PairSample], n_boot: int = 1000,
                     seed: int = 0) -> Dict[str, MetricEstimate]:
    """各关系类别的平均相似度及 95% bootstrap 置信区间"""
    summary = {}
    for relation in RELATIONS:
        sims = np.array([p.similarity for p in pairs if p.relation == relation])
        if sims.size == 0:
            continue
        if sims.size == 1:
            value = float(sims[0])
            summary[relation] = MetricEstimate(value, value, value, 0, seed)
            continue
        summary[relation] = bootstrap_ci(np.mean, (sims,), n_boot=n_boot, seed=seed)
    return summary


def same_patient_auc(pairs: Sequence[PairSample], cross_study_only: bool = False,
                     n_boot: int = 1000, seed: int = 0) -> MetricEstimate:
    """以相似度为得分判断两张图像是否来自同一患者的 AUC

    Args:
        pairs: sample_pairs 的输出
        cross_study_only: 正例只用不同检查的同一患者图像对
    """
    kept = [p for p in pairs if not (cross_study_only and p.relation == "same_study")]
    scores = np.array([p.similarity for p in kept])
    labels = np.array([p.relation != "diff_patient" for p in kept])
    estimate = bootstrap_ci(roc_auc, (scores, labels), n_boot=n_boot, seed=seed)
    logger.info(
        f"同一患者 AUC ({'仅跨检查' if cross_study_only else '含同检查'}): "
        f"{estimate.value:.3f} [{estimate.ci_low:.3f}, {estimate.ci_high:.3f}]"
    )
    return estimate


@dataclass(frozen=True)
class TimelinePoint:
    record_id: str
    day_offset: int
    similarity: float
    is_anchor: bool = False


@dataclass
class ProcedureTimeline:
    """围绕一次手术事件的相似度时间线"""

    patient_id: str
    event_date: date
    anchor_id: str
    points: List[TimelinePoint]


def procedure_timeline(store: EmbeddingStore, patient_id: str, event_date: date,
                       window_days: int = DEFAULT_WINDOW_DAYS) -> ProcedureTimeline:
    """构建单个患者的术前/术后时间线

    锚点为窗口内最早的采集 (同日按记录ID), 每个窗口内图像嵌入对应一个点。
    """
    if window_days < 0:
        raise UsageError(f"window_days 不能为负: {window_days}")
    ids = store.by_patient.get(patient_id, [])
    in_window = []
    for record_id in ids:
        r = store.get(record_id)
        offset = (r.acquired - event_date).days
        if r.kind == "image" and abs(offset) <= window_days:
            in_window.append((offset, r.id, r))
    if not in_window:
        raise InputFormatError(
            f"患者 {patient_id} 在事件 {event_date} 前后 {window_days} 天内没有图像"
        )
    in_window.sort(key=lambda item: (item[0], item[1]))
    anchor = in_window[0][2]
    points = [
        TimelinePoint(
            record_id=r.id,
            day_offset=offset,
            similarity=1.0 if r.id == anchor.id else cosine_similarity(anchor.embedding, r.embedding),
            is_anchor=r.id == anchor.id,
        )
        for offset, _, r in in_window
    ]
    return ProcedureTimeline(patient_id=patient_id, event_date=event_date,
                             anchor_id=anchor.id, points=points)


def build_timelines(store: EmbeddingStore, events: Mapping[str, date],
                    window_days: int = DEFAULT_WINDOW_DAYS,
                    n_jobs: int = 1) -> List[ProcedureTimeline]:
    """为多个患者并行构建时间线, 窗口内无图像的患者跳过"""
    def one(patient_id: str) -> Optional[ProcedureTimeline]:
        try:
            return procedure_timeline(store, patient_id, events[patient_id], window_days)
        except InputFormatError as e:
            logger.warning(str(e))
            return None

    patients = sorted(events)
    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, patients))
    else:
        results = [one(p) for p in patients]
    timelines = [t for t in results if t is not None]
    logger.info(f"构建时间线: {len(timelines)}/{len(patients)} 位患者")
    return timelines


def _pooled_points(timelines: Sequence[ProcedureTimeline]):
    rows = []
    for t in timelines:
        for p in t.points:
            if not p.is_anchor:
                rows.append((t.patient_id, p.day_offset, p.record_id, p.similarity))
    rows.sort()
    return rows


def pre_post_auc(timelines: Sequence[ProcedureTimeline], n_boot: int = 1000,
                 seed: int = 0) -> MetricEstimate:
    """判断采集是否在术后的 AUC (得分 = 1 - 与锚点相似度, 锚点不参与)"""
    rows = _pooled_points(timelines)
    if not rows:
        raise InputFormatError("时间线中没有非锚点的点")
    scores = np.array([1.0 - r[3] for r in rows])
    labels = np.array([r[1] >= 0 for r in rows])
    estimate = bootstrap_ci(roc_auc, (scores, labels), n_boot=n_boot, seed=seed)
    logger.info(
        f"术前/术后 AUC: {estimate.value:.3f} [{estimate.ci_low:.3f}, {estimate.ci_high:.3f}] "
        f"({int(labels.sum())} 术后, {int((~labels).sum())} 术前)"
    )
    return estimate


def timelines_to_frame(timelines: Sequence[ProcedureTimeline]) -> pd.DataFrame:
    """时间线导出为绘图用表格"""
    rows = [
        {
            "patient_id": t.patient_id,
            "event_date": t.event_date.isoformat(),
            "record_id": p.record_id,
            "day_offset": p.day_offset,
            "similarity": p.similarity,
            "is_anchor": p.is_anchor,
        }
        for t in timelines for p in t.points
    ]
    frame = pd.DataFrame(rows, columns=TIMELINE_COLUMNS)
    return frame.sort_values(["patient_id", "day_offset", "record_id"], kind="mergesort",
                             ignore_index=True)


def load_events(path: str) -> Dict[str, date]:
    """读取事件表 (CSV, 列 patient_id, event_date)"""
    try:
        frame = pd.read_csv(path, dtype={"patient_id": str, "event_date": str})
    except (OSError, pd.errors.ParserError) as e:
        raise InputFormatError(f"无法读取事件表 {path}: {e}") from e
    missing = {"patient_id", "event_date"} - set(frame.columns)
    if missing:
        raise InputFormatError(f"事件表缺少列: {sorted(missing)}")
    events = {}
    for row in frame.itertuples(index=False):
        try:
            events[row.patient_id] = date.fromisoformat(row.event_date)
        except (TypeError, ValueError) as e:
            raise InputFormatError(f"事件日期非法: {row.event_date!r}") from e
    return events
