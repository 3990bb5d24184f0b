#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
超声报告模板分词器

每个报告句子用正则模板整体匹配, 输出一个模板token, 随后按捕获顺序输出
槽位token (严重程度词 / 数字逐字符 / 单位)。未匹配的句子输出一个 unk。
"""

import os
import re
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

from jsonschema import Draft7Validator

from src.core.errors import InputFormatError

logger = logging.getLogger(__name__)

DEFAULT_CONTEXT_LENGTH = 77
SLOT_KINDS = ("severity", "number", "unit")
UNK_TEXT = "[unk]"
STARTER_VOCAB_PATH = os.path.join(os.path.dirname(__file__), "data", "starter_vocab.json")

VOCAB_SCHEMA = {
    "type": "object",
    "required": ["version", "special", "severity", "digits", "units", "templates"],
    "properties": {
        "version": {"const": 1},
        "special": {
            "type": "object",
            "required": ["unk", "bos", "eos", "pad"],
            "properties": {k: {"type": "integer", "minimum": 0}
                           for k in ("unk", "bos", "eos", "pad")},
            "additionalProperties": False,
        },
        "severity": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["word", "id"],
                "properties": {"word": {"type": "string", "minLength": 1},
                               "id": {"type": "integer", "minimum": 0}},
                "additionalProperties": False,
            },
        },
        "digits": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["ch", "id"],
                "properties": {"ch": {"type": "string", "minLength": 1, "maxLength": 1},
                               "id": {"type": "integer", "minimum": 0}},
                "additionalProperties": False,
            },
        },
        "units": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["text", "id"],
                "properties": {"text": {"type": "string", "minLength": 1},
                               "id": {"type": "integer", "minimum": 0}},
                "additionalProperties": False,
            },
        },
        "templates": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "pattern", "slots", "canonical"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0},
                    "name": {"type": "string"},
                    "pattern": {"type": "string", "minLength": 1},
                    "slots": {"type": "array", "items": {"enum": list(SLOT_KINDS)}},
                    "canonical": {"type": "string"},
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}
_vocab_validator = Draft7Validator(VOCAB_SCHEMA)

REQUIRED_SEVERITIES = ("mild", "moderate", "severe")
DIGIT_CHARS = tuple("0123456789.-")


@dataclass(frozen=True)
class TemplateEntry:
    """一个模板: 正则 + 槽位类型 + 规范句"""

    id: int
    pattern: str
    slots: Tuple[str, ...]
    canonical: str
    name: Optional[str] = None
    regex: re.Pattern = field(default=None, repr=False, compare=False)

    def render(self, slot_texts: Sequence[str]) -> str:
        return self.canonical.format(*slot_texts)


@dataclass(frozen=True)
class TemplateVocab:
    """模板词表 (加载后不可变, 可在多个线程间共享)"""

    version: int
    special: Dict[str, int]
    severity_tokens: Tuple[Tuple[str, int], ...]
    digit_tokens: Tuple[Tuple[str, int], ...]
    unit_tokens: Tuple[Tuple[str, int], ...]
    templates: Tuple[TemplateEntry, ...]

    def __post_init__(self):
        # 反向索引
        object.__setattr__(self, "_severity", {w: i for w, i in self.severity_tokens})
        object.__setattr__(self, "_digit", {c: i for c, i in self.digit_tokens})
        object.__setattr__(self, "_unit", {u: i for u, i in self.unit_tokens})
        object.__setattr__(self, "_template_by_id", {t.id: t for t in self.templates})
        object.__setattr__(self, "_template_by_name",
                           {t.name: t for t in self.templates if t.name})
        id_text: Dict[int, Tuple[str, str]] = {}
        for w, i in self.severity_tokens:
            id_text[i] = ("severity", w)
        for c, i in self.digit_tokens:
            id_text[i] = ("digit", c)
        for u, i in self.unit_tokens:
            id_text[i] = ("unit", u)
        object.__setattr__(self, "_id_text", id_text)

    @property
    def size(self) -> int:
        return 4 + len(self.severity_tokens) + len(self.digit_tokens) + \
            len(self.unit_tokens) + len(self.templates)

    @property
    def unk(self) -> int:
        return self.special["unk"]

    @property
    def bos(self) -> int:
        return self.special["bos"]

    @property
    def eos(self) -> int:
        return self.special["eos"]

    @property
    def pad(self) -> int:
        return self.special["pad"]

    def severity_id(self, word: str) -> Optional[int]:
        return self._severity.get(word.lower())

    def digit_id(self, ch: str) -> Optional[int]:
        return self._digit.get(ch)

    def unit_id(self, text: str) -> Optional[int]:
        return self._unit.get(text.lower())

    def template(self, token_id: int) -> Optional[TemplateEntry]:
        return self._template_by_id.get(token_id)

    def template_named(self, name: str) -> TemplateEntry:
        try:
            return self._template_by_name[name]
        except KeyError as e:
            raise InputFormatError(f"词表中没有名为 {name} 的模板") from e

    def token_kind(self, token_id: int) -> Tuple[str, str]:
        """返回 (类别, 文本); 类别为 special/severity/digit/unit/template"""
        for name, sid in self.special.items():
            if sid == token_id:
                return "special", name
        if token_id in self._id_text:
            return self._id_text[token_id]
        entry = self._template_by_id.get(token_id)
        if entry is not None:
            return "template", entry.canonical
        raise InputFormatError(f"未知的token id: {token_id}")

    def render(self, name: str, *slot_values) -> str:
        """用命名模板的规范句渲染一个句子"""
        return self.template_named(name).render([str(v) for v in slot_values])


@dataclass
class TokenSequence:
    """分词结果"""

    ids: List[int]
    truncated: bool = False
    unmatched: int = 0

    def __len__(self) -> int:
        return len(self.ids)


def normalize_text(raw: str) -> str:
    """小写化, 合并空白; 换行视为句子边界

    Args:
        raw: 原始报告文本

    Returns:
        str: 规范化后的文本
    """
    if not raw:
        return ""
    pieces = []
    for line in raw.splitlines():
        line = " ".join(line.split())
        if not line:
            continue
        if pieces and not pieces[-1].endswith("."):
            pieces[-1] += "."
        pieces.append(line)
    return " ".join(pieces).lower()


_SENTENCE_SPLIT = re.compile(r"\.(?:\s+|$)")


def split_sentences(text: str) -> List[str]:
    """按 '.' + 空白 (或结尾) 切分句子, 数字中的小数点不切分"""
    sentences = []
    for part in _SENTENCE_SPLIT.split(text):
        part = part.strip().rstrip(",;:").strip()
        if part:
            sentences.append(part)
    return sentences


def _entry_error(index: int, message: str) -> InputFormatError:
    return InputFormatError(f"模板条目 #{index}: {message}")


def load_vocab(document) -> TemplateVocab:
    """加载并校验词表

    Args:
        document: JSON 文本或已解析的 dict

    Returns:
        TemplateVocab: 预编译后的词表
    """
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as e:
            raise InputFormatError(f"词表不是合法JSON: {e}") from e

    errors = sorted(_vocab_validator.iter_errors(document), key=lambda err: list(err.path))
    if errors:
        err = errors[0]
        location = "/".join(str(p) for p in err.path) or "<root>"
        raise InputFormatError(f"词表不符合schema ({location}): {err.message}")

    seen: Dict[int, str] = {}

    def claim(token_id: int, owner: str) -> None:
        if token_id in seen:
            raise InputFormatError(
                f"重复的token id {token_id}: {seen[token_id]} 与 {owner}"
            )
        seen[token_id] = owner

    for name, token_id in document["special"].items():
        claim(token_id, f"special:{name}")
    for item in document["severity"]:
        claim(item["id"], f"severity:{item['word']}")
    for item in document["digits"]:
        claim(item["id"], f"digit:{item['ch']}")
    for item in document["units"]:
        claim(item["id"], f"unit:{item['text']}")

    templates = []
    names = set()
    for index, item in enumerate(document["templates"]):
        claim(item["id"], f"template #{index}")
        try:
            regex = re.compile(item["pattern"], re.IGNORECASE)
        except re.error as e:
            raise _entry_error(index, f"正则无法编译: {e}") from e
        slots = tuple(item["slots"])
        if regex.groups != len(slots):
            raise _entry_error(
                index, f"捕获组数 {regex.groups} 与槽位数 {len(slots)} 不一致"
            )
        for a, b in zip(slots, slots[1:]):
            if a == "number" and b == "number":
                raise _entry_error(index, "相邻的两个数字槽位无法无歧义地解码")
        name = item.get("name")
        if name:
            if name in names:
                raise _entry_error(index, f"重复的模板名 {name}")
            names.add(name)
        templates.append(TemplateEntry(
            id=item["id"], pattern=item["pattern"], slots=slots,
            canonical=item["canonical"], name=name, regex=regex,
        ))

    ids = sorted(seen)
    if ids != list(range(len(ids))):
        missing = sorted(set(range(max(ids) + 1)) - set(ids))
        raise InputFormatError(f"token id 必须从0开始连续, 缺少: {missing[:10]}")

    severity_words = {item["word"].lower() for item in document["severity"]}
    missing_sev = [w for w in REQUIRED_SEVERITIES if w not in severity_words]
    if missing_sev:
        raise InputFormatError(f"严重程度词表缺少: {missing_sev}")
    digit_chars = {item["ch"] for item in document["digits"]}
    if set(DIGIT_CHARS) - digit_chars:
        raise InputFormatError(f"数字token缺少: {sorted(set(DIGIT_CHARS) - digit_chars)}")

    vocab = TemplateVocab(
        version=document["version"],
        special=dict(document["special"]),
        severity_tokens=tuple((i["word"].lower(), i["id"]) for i in document["severity"]),
        digit_tokens=tuple((i["ch"], i["id"]) for i in document["digits"]),
        unit_tokens=tuple((i["text"].lower(), i["id"]) for i in document["units"]),
        templates=tuple(templates),
    )
    logger.debug(f"词表加载完成: {len(templates)} 个模板, 共 {vocab.size} 个token")
    return vocab


def load_vocab_file(path: str) -> TemplateVocab:
    with open(path, "r", encoding="utf-8") as f:
        return load_vocab(f.read())


def load_starter_vocab() -> TemplateVocab:
    """加载随包提供的入门词表"""
    return load_vocab_file(STARTER_VOCAB_PATH)


def _slot_tokens(entry: TemplateEntry, match: re.Match,
                 vocab: TemplateVocab) -> Optional[List[int]]:
    tokens: List[int] = []
    for kind, value in zip(entry.slots, match.groups()):
        if value is None:
            return None
        if kind == "severity":
            token = vocab.severity_id(value)
            if token is None:
                return None
            tokens.append(token)
        elif kind == "unit":
            token = vocab.unit_id(value)
            if token is None:
                return None
            tokens.append(token)
        else:
            digits = [vocab.digit_id(ch) for ch in value]
            if not digits or any(d is None for d in digits):
                return None
            tokens.extend(digits)
    return tokens


def match_sentence(sentence: str, vocab: TemplateVocab) -> Optional[List[int]]:
    """按优先级顺序匹配一个句子, 返回模板token + 槽位token, 未匹配返回 None"""
    for entry in vocab.templates:
        match = entry.regex.fullmatch(sentence)
        if match is None:
            continue
        slots = _slot_tokens(entry, match, vocab)
        if slots is None:
            continue
        return [entry.id] + slots
    return None


def finalize_sequence(body: List[int], bos: int, eos: int,
                      context_length: int) -> Tuple[List[int], bool]:
    """包上 bos/eos, 超长时截断并强制以 eos 结尾"""
    if context_length < 3:
        raise InputFormatError(f"context_length 至少为3, 实际 {context_length}")
    ids = [bos] + body + [eos]
    if len(ids) > context_length:
        return ids[:context_length - 1] + [eos], True
    return ids, False


def tokenize_template(text: str, vocab: TemplateVocab,
                      context_length: int = DEFAULT_CONTEXT_LENGTH) -> TokenSequence:
    """模板分词

    Args:
        text: 规范化后的报告文本
        vocab: 模板词表
        context_length: 上下文长度 (默认77)

    Returns:
        TokenSequence
    """
    body: List[int] = []
    unmatched = 0
    for sentence in split_sentences(text):
        tokens = match_sentence(sentence, vocab)
        if tokens is None:
            unmatched += 1
            logger.debug(f"未匹配的句子: {sentence!r}")
            body.append(vocab.unk)
        else:
            body.extend(tokens)
    ids, truncated = finalize_sequence(body, vocab.bos, vocab.eos, context_length)
    return TokenSequence(ids=ids, truncated=truncated, unmatched=unmatched)


@dataclass(frozen=True)
class ParsedSentence:
    """解码出的一个句子: 模板 (None 表示 unk) + 槽位文本"""

    template: Optional[TemplateEntry]
    slot_texts: Tuple[str, ...] = ()
    slot_values: Tuple = ()


def parse_sequence(seq: TokenSequence, vocab: TemplateVocab) -> List[ParsedSentence]:
    """把 token 序列解析回 (模板, 槽位) 句子列表"""
    ids = list(seq.ids)
    pos = 0
    if ids and ids[0] == vocab.bos:
        pos = 1
    sentences: List[ParsedSentence] = []

    def at_end(p: int) -> bool:
        return p >= len(ids) or ids[p] in (vocab.eos, vocab.pad)

    while not at_end(pos):
        token = ids[pos]
        pos += 1
        if token == vocab.unk:
            sentences.append(ParsedSentence(template=None))
            continue
        entry = vocab.template(token)
        if entry is None:
            kind, text = vocab.token_kind(token)
            raise InputFormatError(f"位置 {pos - 1} 出现游离的 {kind} token {token} ({text!r})")
        texts: List[str] = []
        values: List = []
        complete = True
        for slot in entry.slots:
            if at_end(pos):
                complete = False
                break
            kind, text = vocab.token_kind(ids[pos])
            if slot == "number":
                chars = []
                while not at_end(pos):
                    kind, text = vocab.token_kind(ids[pos])
                    if kind != "digit":
                        break
                    chars.append(text)
                    pos += 1
                if not chars:
                    raise InputFormatError(f"模板 {entry.id} 的数字槽位缺少数字token")
                number = "".join(chars)
                texts.append(number)
                try:
                    values.append(float(number))
                except ValueError:
                    values.append(None)
            else:
                if kind != slot:
                    raise InputFormatError(
                        f"模板 {entry.id} 期望 {slot} token, 实际为 {kind} token {ids[pos]}"
                    )
                texts.append(text)
                values.append(text)
                pos += 1
        if not complete:
            if seq.truncated:
                break
            raise InputFormatError(f"模板 {entry.id} 的槽位不完整")
        sentences.append(ParsedSentence(entry, tuple(texts), tuple(values)))
    return sentences


def detokenize(seq: TokenSequence, vocab: TemplateVocab) -> str:
    """把模板 token 序列还原为规范文本, unk 渲染为 "[unk]" """
    rendered = []
    for parsed in parse_sequence(seq, vocab):
        if parsed.template is None:
            rendered.append(UNK_TEXT)
        else:
            rendered.append(parsed.template.render(parsed.slot_texts))
    if not rendered:
        return ""
    text = ". ".join(rendered)
    if rendered[-1] != UNK_TEXT:
        text += "."
    return text


def pad_sequence(seq: TokenSequence, context_length: int, pad_id: int) -> List[int]:
    """右侧补 pad 到 context_length"""
    if len(seq.ids) > context_length:
        raise InputFormatError(f"序列长度 {len(seq.ids)} 超过 context_length {context_length}")
    return list(seq.ids) + [pad_id] * (context_length - len(seq.ids))


class TemplateTokenizer:
    """模板分词器, 额外维护未匹配句子计数和各模板命中次数"""

    def __init__(self, vocab: TemplateVocab, context_length: int = DEFAULT_CONTEXT_LENGTH):
        self.logger = logging.getLogger(__name__)
        self.vocab = vocab
        self.context_length = context_length
        self.unmatched_sentences = 0
        self.total_sentences = 0
        self.template_hits: Counter = Counter()

    @property
    def bos(self) -> int:
        return self.vocab.bos

    @property
    def eos(self) -> int:
        return self.vocab.eos

    def encode(self, text: str, context_length: Optional[int] = None) -> TokenSequence:
        normalized = normalize_text(text)
        seq = tokenize_template(normalized, self.vocab, context_length or self.context_length)
        self.unmatched_sentences += seq.unmatched
        self.total_sentences += len(split_sentences(normalized))
        for token in seq.ids:
            if self.vocab.template(token) is not None:
                self.template_hits[token] += 1
        return seq

    def decode(self, seq: TokenSequence) -> str:
        return detokenize(seq, self.vocab)

    def coverage_report(self) -> Dict[str, float]:
        """已处理句子中被模板捕获的比例"""
        matched = self.total_sentences - self.unmatched_sentences
        coverage = matched / self.total_sentences if self.total_sentences else 0.0
        if self.unmatched_sentences:
            self.logger.warning(
                f"{self.unmatched_sentences}/{self.total_sentences} 个句子未匹配任何模板"
            )
        return {
            "sentences": self.total_sentences,
            "unmatched": self.unmatched_sentences,
            "coverage": coverage,
            "templates_used": len(self.template_hits),
        }
