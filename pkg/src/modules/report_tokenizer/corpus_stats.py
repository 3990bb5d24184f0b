#!/usr/bin/env python
# -*- coding: utf-8 -*-

import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from src.core.errors import InputFormatError

logger = logging.getLogger(__name__)

# 统计时不截断
UNBOUNDED_CONTEXT = 10 ** 9


def token_counts(corpus: Sequence[str], tokenizer) -> List[int]:
    """每篇报告的未截断token数 (不含 bos/eos)"""
    return [len(tokenizer.encode(text, UNBOUNDED_CONTEXT).ids) - 2 for text in corpus]


def corpus_stats(corpus: Sequence[str], tokenizer,
                 reference: Optional[object] = None) -> Dict[str, float]:
    """语料token长度统计

    Args:
        corpus: 报告文本列表
        tokenizer: 任何实现 encode(text, context_length) 的分词器
        reference: 可选的参照分词器 (如 BPE)

    Returns:
        dict: mean_tokens, sd_tokens (样本标准差), n, single_sample,
              以及给出参照分词器时的 reference_mean_tokens 和
              compression_ratio_vs_reference (= 参照均值 / 本分词器均值)
    """
    if len(corpus) == 0:
        raise InputFormatError("empty corpus")
    counts = np.asarray(token_counts(corpus, tokenizer), dtype=np.float64)
    single = counts.size == 1
    stats: Dict[str, float] = {
        "n": int(counts.size),
        "mean_tokens": float(counts.mean()),
        "sd_tokens": 0.0 if single else float(counts.std(ddof=1)),
        "single_sample": single,
        "compression_ratio_vs_reference": None,
    }
    if reference is not None:
        ref_counts = np.asarray(token_counts(corpus, reference), dtype=np.float64)
        stats["reference_mean_tokens"] = float(ref_counts.mean())
        stats["reference_sd_tokens"] = 0.0 if single else float(ref_counts.std(ddof=1))
        if stats["mean_tokens"] > 0:
            stats["compression_ratio_vs_reference"] = stats["reference_mean_tokens"] / stats["mean_tokens"]
    logger.info(
        f"语料统计: {stats['n']} 篇, 平均 {stats['mean_tokens']:.1f} "
        f"(± {stats['sd_tokens']:.1f}) tokens"
    )
    return stats
