#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
跨模态检索评估: 每条查询的排名、平均排名、recall@K 与 MCMRR
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.errors import InputFormatError, UsageError
from src.modules.embedding_store.embedding_store import EmbeddingStore, mean_pool
from src.modules.metrics.metrics import EvalReport, recall_at_k

logger = logging.getLogger(__name__)

DIRECTIONS = ("image_to_text", "text_to_image")
IMAGE_MODES = ("first_frame", "mean_pool")
QUERY_BLOCK = 1024


@dataclass(frozen=True)
class RetrievalPair:
    """一个报告对应的唯一图文对"""

    report_id: str
    image_id: str
    text_id: str
    image_emb: np.ndarray = field(repr=False, compare=False)
    text_emb: np.ndarray = field(repr=False, compare=False)


@dataclass
class DedupResult:
    pairs: List[RetrievalPair]
    excluded: int = 0
    excluded_reports: List[str] = field(default_factory=list)


@dataclass
class RetrievalResult:
    """单方向检索结果"""

    direction: str
    ranks: np.ndarray
    mean_rank: float
    recall_at: Dict[int, float]
    n_candidates: int
    report_ids: Tuple[str, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.direction not in DIRECTIONS:
            raise UsageError(f"未知的检索方向: {self.direction}")


def _video_embedding(store: EmbeddingStore, image_id: str, mode: str) -> np.ndarray:
    record = store.get(image_id)
    if mode == "first_frame":
        return record.embedding
    # 同一检查同一报告的帧, 按帧序
    siblings = [store.get(i) for i in store.by_report[record.report_id]]
    frames = sorted((r for r in siblings if r.kind == "image" and r.study_id == record.study_id),
                    key=lambda r: (r.frame_index, r.id))
    return mean_pool([r.embedding for r in frames])


def dedup_pairs(store: EmbeddingStore, image_mode: str = "first_frame") -> DedupResult:
    """每个报告保留一个图文对, 图像取最小记录ID

    Args:
        store: 嵌入存储
        image_mode: first_frame 使用所选记录本身; mean_pool 对所选视频前 10 帧做均值池化

    Returns:
        DedupResult: 按报告ID排序的图文对与被排除的报告数
    """
    if image_mode not in IMAGE_MODES:
        raise UsageError(f"未知的图像模式: {image_mode}")
    pairs: List[RetrievalPair] = []
    excluded: List[str] = []
    for report_id in sorted(store.by_report):
        records = [store.get(i) for i in store.by_report[report_id]]
        images = sorted(r.id for r in records if r.kind == "image")
        texts = sorted(r.id for r in records if r.kind == "text")
        if not images or not texts:
            excluded.append(report_id)
            continue
        pairs.append(RetrievalPair(
            report_id=report_id,
            image_id=images[0],
            text_id=texts[0],
            image_emb=_video_embedding(store, images[0], image_mode),
            text_emb=store.get(texts[0]).embedding,
        ))
    if not pairs:
        raise InputFormatError("去重后没有可评估的图文对")
    if excluded:
        logger.warning(f"{len(excluded)} 个报告缺少图像或文本, 已排除")
    return DedupResult(pairs=pairs, excluded=len(excluded), excluded_reports=excluded)


def rank_of_match(query_emb, true_id: str, candidates: Tuple[Sequence[str], np.ndarray]) -> int:
    """真实匹配在候选中的 1 起始排名 (相似度降序, 并列时ID升序)"""
    ids, matrix = candidates
    order = np.argsort(np.asarray(ids), kind="stable")
    sorted_ids = [ids[i] for i in order]
    try:
        true_idx = sorted_ids.index(true_id)
    except ValueError as e:
        raise InputFormatError(f"候选中没有真实匹配 {true_id}") from e
    q = np.asarray(query_emb, dtype=np.float64).reshape(-1)
    m = np.asarray(matrix, dtype=np.float64)[order]
    if m.shape[1] != q.size:
        raise InputFormatError(f"维度不一致: 查询 {q.size}, 候选 {m.shape[1]}")
    sims = np.clip(m @ q, -1.0, 1.0)
    target = sims[true_idx]
    return int(1 + np.sum(sims > target) + np.sum(sims[:true_idx] == target))


def _block_ranks(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """第 i 个查询的真实匹配为第 i 个候选 (候选已按ID升序)"""
    n = queries.shape[0]
    ranks = np.empty(n, dtype=np.int64)
    columns = np.arange(candidates.shape[0])
    for start in range(0, n, QUERY_BLOCK):
        stop = min(start + QUERY_BLOCK, n)
        sims = np.clip(queries[start:stop] @ candidates.T, -1.0, 1.0)
        rows = np.arange(stop - start)
        truth = np.arange(start, stop)
        target = sims[rows, truth][:, None]
        ahead = (sims > target) | ((sims == target) & (columns[None, :] < truth[:, None]))
        ranks[start:stop] = 1 + ahead.sum(axis=1)
    return ranks


def retrieval_metrics(pairs: Sequence[RetrievalPair], direction: str,
                      ks: Sequence[int] = (10,)) -> RetrievalResult:
    """计算单方向检索指标

    image_to_text: 以图像查询全部文本候选; text_to_image 反之。
    """
    if direction not in DIRECTIONS:
        raise UsageError(f"未知的检索方向: {direction}")
    if not pairs:
        raise InputFormatError("至少需要一个图文对")
    if any(k < 1 for k in ks):
        raise UsageError(f"K 必须 ≥ 1: {list(ks)}")
    query_side, cand_side = ("image", "text") if direction == "image_to_text" else ("text", "image")

    cand_ids = [getattr(p, f"{cand_side}_id") for p in pairs]
    if len(set(cand_ids)) != len(cand_ids):
        raise InputFormatError("候选ID重复, 图文对未去重")
    order = np.argsort(np.asarray(cand_ids), kind="stable")
    queries = np.stack([getattr(pairs[i], f"{query_side}_emb") for i in order]).astype(np.float64)
    candidates = np.stack([getattr(pairs[i], f"{cand_side}_emb") for i in order]).astype(np.float64)
    if queries.shape[1] != candidates.shape[1]:
        raise InputFormatError(
            f"维度不一致: 查询 {queries.shape[1]}, 候选 {candidates.shape[1]}"
        )

    sorted_ranks = _block_ranks(queries, candidates)
    ranks = np.empty_like(sorted_ranks)
    ranks[order] = sorted_ranks
    result = RetrievalResult(
        direction=direction,
        ranks=ranks,
        mean_rank=float(np.mean(ranks)),
        recall_at={int(k): recall_at_k(ranks, k) for k in sorted(set(ks))},
        n_candidates=len(pairs),
        report_ids=tuple(sorted(p.report_id for p in pairs)),
    )
    logger.info(
        f"{direction}: {len(pairs)} 条查询, 平均排名 {result.mean_rank:.2f}, "
        + ", ".join(f"R@{k}={v:.3f}" for k, v in result.recall_at.items())
    )
    return result


def mcmrr(i2t: RetrievalResult, t2i: RetrievalResult) -> float:
    """平均跨模态平均排名 (两个方向平均排名的均值)"""
    if i2t.direction != "image_to_text" or t2i.direction != "text_to_image":
        raise UsageError("mcmrr 需要 (image_to_text, text_to_image) 两个方向的结果")
    if i2t.report_ids != t2i.report_ids:
        raise InputFormatError("两个方向的图文对集合不一致")
    return (i2t.mean_rank + t2i.mean_rank) / 2.0


def retrieval_from_store(store: EmbeddingStore, image_mode: str = "first_frame",
                         ks: Sequence[int] = (10,)):
    """对存储去重并计算双向检索指标

    Returns:
        (i2t, t2i, mcmrr, DedupResult)
    """
    dedup = dedup_pairs(store, image_mode)
    i2t = retrieval_metrics(dedup.pairs, "image_to_text", ks)
    t2i = retrieval_metrics(dedup.pairs, "text_to_image", ks)
    score = mcmrr(i2t, t2i)
    logger.info(f"MCMRR = {score:.2f} (共 {len(dedup.pairs)} 对, 排除 {dedup.excluded})")
    return i2t, t2i, score, dedup


def to_eval_report(result: RetrievalResult, mcmrr_value: Optional[float] = None,
                   task: Optional[str] = "retrieval") -> EvalReport:
    return EvalReport(
        task=task,
        direction=result.direction,
        n=len(result.ranks),
        mean_rank=result.mean_rank,
        recall={str(k): v for k, v in result.recall_at.items()},
        mcmrr=mcmrr_value,
    )
