#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
文本特征: 模板 token 序列 → 定长向量, 供 W_txt 投影

bag (默认):  按 token id 计数 (不含 bos/eos/pad), 维度 = 词表大小
slot (可选): 每个模板一个计数, 外加该模板槽位的严重程度/单位独热与数值群体编码,
             末位为 unk 计数。数字以群体编码进入特征, 零样本数值回归更准确
"""

from typing import Dict, List, Tuple

import numpy as np

from src.core.errors import InputFormatError, UsageError
from src.core.value_coding import VALUE_CENTERS, population_code
from src.modules.report_tokenizer.template_tokenizer import (TemplateVocab, TokenSequence,
                                                             parse_sequence)

FEATURIZERS = ("bag", "slot")


class BagFeaturizer:
    name = "bag"

    def __init__(self, vocab: TemplateVocab):
        self.vocab = vocab
        self.dim = vocab.size
        self._skip = {vocab.bos, vocab.eos, vocab.pad}

    def __call__(self, seq: TokenSequence) -> np.ndarray:
        counts = np.zeros(self.dim, dtype=np.float64)
        for token in seq.ids:
            if token in self._skip:
                continue
            if not 0 <= token < self.dim:
                raise InputFormatError(f"token id {token} 超出词表范围 {self.dim}")
            counts[token] += 1.0
        return counts


class SlotFeaturizer:
    name = "slot"

    def __init__(self, vocab: TemplateVocab):
        self.vocab = vocab
        self._severity_index = {w: i for i, (w, _) in enumerate(vocab.severity_tokens)}
        self._unit_index = {u: i for i, (u, _) in enumerate(vocab.unit_tokens)}
        # 模板 id → (计数位置, [(槽位类型, 起始位置)])
        self.layout: Dict[int, Tuple[int, List[Tuple[str, int]]]] = {}
        offset = 0
        for entry in vocab.templates:
            count_pos = offset
            offset += 1
            slots = []
            for kind in entry.slots:
                slots.append((kind, offset))
                offset += self._slot_width(kind)
            self.layout[entry.id] = (count_pos, slots)
        self.unk_pos = offset
        self.dim = offset + 1

    def _slot_width(self, kind: str) -> int:
        if kind == "severity":
            return len(self._severity_index)
        if kind == "unit":
            return len(self._unit_index)
        return len(VALUE_CENTERS)

    def __call__(self, seq: TokenSequence) -> np.ndarray:
        features = np.zeros(self.dim, dtype=np.float64)
        for parsed in parse_sequence(seq, self.vocab):
            if parsed.template is None:
                features[self.unk_pos] += 1.0
                continue
            count_pos, slots = self.layout[parsed.template.id]
            features[count_pos] += 1.0
            for (kind, start), text, value in zip(slots, parsed.slot_texts, parsed.slot_values):
                if kind == "severity":
                    features[start + self._severity_index[text]] += 1.0
                elif kind == "unit":
                    features[start + self._unit_index[text]] += 1.0
                elif value is not None:
                    features[start:start + len(VALUE_CENTERS)] += population_code(value)
        return features


def make_featurizer(name: str, vocab: TemplateVocab):
    if name == "bag":
        return BagFeaturizer(vocab)
    if name == "slot":
        return SlotFeaturizer(vocab)
    raise UsageError(f"未知的文本特征类型 {name}, 可选 {FEATURIZERS}")
