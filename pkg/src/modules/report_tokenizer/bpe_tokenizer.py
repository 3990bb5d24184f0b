#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
字节级 BPE 分词器 (对照基线)

预切分后按最高频相邻对贪心合并; 频次相同时按合并对的字节序取最小者。
token id 布局: 0-3 为 pad/unk/bos/eos, 4-259 为 256 个字节, 之后为按学习顺序的合并。
"""

import re
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from src.core.errors import InputFormatError
from src.modules.report_tokenizer.template_tokenizer import (
    DEFAULT_CONTEXT_LENGTH, TokenSequence, finalize_sequence, normalize_text)

logger = logging.getLogger(__name__)

SPECIAL_IDS = {"pad": 0, "unk": 1, "bos": 2, "eos": 3}
BYTE_OFFSET = 4
FIRST_MERGE_ID = BYTE_OFFSET + 256

# 词 / 数字 / 标点 前可带一个空格, 连接所有片段即为原文
PRETOKENIZE = re.compile(r" ?[^\W\d_]+| ?\d+| ?[^\s\w]+| ?_+|\s+(?!\S)|\s+")


def pretokenize(text: str) -> List[str]:
    chunks = PRETOKENIZE.findall(text)
    if "".join(chunks) != text:
        raise InputFormatError("预切分未能覆盖全部文本")
    return chunks


def _merge(ids: Tuple[int, ...], pair: Tuple[int, int], new_id: int) -> Tuple[int, ...]:
    out = []
    i = 0
    while i < len(ids):
        if i < len(ids) - 1 and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return tuple(out)


@dataclass
class BpeVocab:
    """BPE 词表: 字节字母表 + 有序合并列表 + id→字节映射"""

    merges: List[Tuple[int, int]] = field(default_factory=list)
    token_bytes: Dict[int, bytes] = field(default_factory=dict)

    def __post_init__(self):
        if not self.token_bytes:
            self.token_bytes = {BYTE_OFFSET + b: bytes([b]) for b in range(256)}
            for rank, (a, b) in enumerate(self.merges):
                self.token_bytes[FIRST_MERGE_ID + rank] = self.token_bytes[a] + self.token_bytes[b]
        self.ranks: Dict[Tuple[int, int], int] = {
            pair: rank for rank, pair in enumerate(self.merges)
        }

    @property
    def size(self) -> int:
        return FIRST_MERGE_ID + len(self.merges)

    def merge_strings(self) -> List[Tuple[str, str]]:
        return [(self.token_bytes[a].decode("utf-8", "replace"),
                 self.token_bytes[b].decode("utf-8", "replace")) for a, b in self.merges]

    def to_json(self) -> str:
        return json.dumps({"version": 1, "merges": [list(m) for m in self.merges]})

    @classmethod
    def from_json(cls, document: str) -> "BpeVocab":
        try:
            data = json.loads(document)
            merges = [tuple(m) for m in data["merges"]]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise InputFormatError(f"BPE 词表格式错误: {e}") from e
        for rank, (a, b) in enumerate(merges):
            limit = FIRST_MERGE_ID + rank
            if not (BYTE_OFFSET <= a < limit and BYTE_OFFSET <= b < limit):
                raise InputFormatError(f"第 {rank} 个合并引用了尚未定义的token: {(a, b)}")
        return cls(merges=merges)


def train_bpe(corpus: Sequence[str], merge_count: int) -> BpeVocab:
    """训练 BPE

    Args:
        corpus: 规范化后的文本列表
        merge_count: 合并次数

    Returns:
        BpeVocab
    """
    if not corpus:
        raise InputFormatError("train_bpe 需要非空语料")
    if merge_count < 0:
        raise InputFormatError(f"merge_count 不能为负: {merge_count}")

    chunk_freqs: Counter = Counter()
    for text in corpus:
        for chunk in pretokenize(text):
            chunk_freqs[tuple(BYTE_OFFSET + b for b in chunk.encode("utf-8"))] += 1

    vocab = BpeVocab()
    token_bytes = vocab.token_bytes
    words = dict(chunk_freqs)
    for step in range(merge_count):
        pair_freqs: Counter = Counter()
        for ids, freq in words.items():
            for pair in zip(ids, ids[1:]):
                pair_freqs[pair] += freq
        if not pair_freqs:
            logger.info(f"第 {step} 次合并时已没有可合并的相邻对, 提前结束")
            break
        best_freq = max(pair_freqs.values())
        best = min((p for p, f in pair_freqs.items() if f == best_freq),
                   key=lambda p: (token_bytes[p[0]], token_bytes[p[1]]))
        new_id = FIRST_MERGE_ID + len(vocab.merges)
        vocab.merges.append(best)
        token_bytes[new_id] = token_bytes[best[0]] + token_bytes[best[1]]
        words = {_merge(ids, best, new_id): freq for ids, freq in words.items()}
        # 合并后不同序列可能变成同一序列
        merged: Counter = Counter()
        for ids, freq in words.items():
            merged[ids] += freq
        words = dict(merged)
    vocab.ranks = {pair: rank for rank, pair in enumerate(vocab.merges)}
    logger.info(f"BPE 训练完成: {len(vocab.merges)} 次合并, 词表大小 {vocab.size}")
    return vocab


def encode_chunk(chunk: str, vocab: BpeVocab) -> List[int]:
    ids = tuple(BYTE_OFFSET + b for b in chunk.encode("utf-8"))
    while len(ids) > 1:
        candidates = [(vocab.ranks[p], p) for p in zip(ids, ids[1:]) if p in vocab.ranks]
        if not candidates:
            break
        rank, pair = min(candidates)
        ids = _merge(ids, pair, FIRST_MERGE_ID + rank)
    return list(ids)


def encode_bpe_body(text: str, vocab: BpeVocab) -> List[int]:
    body: List[int] = []
    for chunk in pretokenize(text):
        body.extend(encode_chunk(chunk, vocab))
    return body


def tokenize_bpe(text: str, vocab: BpeVocab,
                 context_length: int = DEFAULT_CONTEXT_LENGTH) -> TokenSequence:
    """BPE 分词, bos/eos/截断规则与模板分词一致"""
    ids, truncated = finalize_sequence(encode_bpe_body(text, vocab),
                                       SPECIAL_IDS["bos"], SPECIAL_IDS["eos"], context_length)
    return TokenSequence(ids=ids, truncated=truncated)


def decode_bpe(seq: TokenSequence, vocab: BpeVocab) -> str:
    out = bytearray()
    for token in seq.ids:
        if token in (SPECIAL_IDS["bos"], SPECIAL_IDS["eos"], SPECIAL_IDS["pad"]):
            continue
        if token not in vocab.token_bytes:
            raise InputFormatError(f"未知的BPE token id: {token}")
        out.extend(vocab.token_bytes[token])
    return out.decode("utf-8", errors="replace")


class BpeTokenizer:
    """与 TemplateTokenizer 相同接口的 BPE 分词器"""

    bos = SPECIAL_IDS["bos"]
    eos = SPECIAL_IDS["eos"]

    def __init__(self, vocab: BpeVocab, context_length: int = DEFAULT_CONTEXT_LENGTH):
        self.vocab = vocab
        self.context_length = context_length
        self._cache: Dict[str, List[int]] = {}

    def encode(self, text: str, context_length: Optional[int] = None) -> TokenSequence:
        body: List[int] = []
        for chunk in pretokenize(normalize_text(text)):
            if chunk not in self._cache:
                self._cache[chunk] = encode_chunk(chunk, self.vocab)
            body.extend(self._cache[chunk])
        ids, truncated = finalize_sequence(body, self.bos, self.eos,
                                           context_length or self.context_length)
        return TokenSequence(ids=ids, truncated=truncated)

    def decode(self, seq: TokenSequence) -> str:
        return decode_bpe(seq, self.vocab)
