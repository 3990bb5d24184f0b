#!/usr/bin/env python
# -*- coding: utf-8 -*-

import os
import json
import struct
import logging
from dataclasses import dataclass, field
from datetime import date
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from jsonschema import Draft7Validator

from src.core.errors import InputFormatError, NumericError, UsageError

logger = logging.getLogger(__name__)

# EMB1 二进制格式: 魔数 + u32 版本 + u32 维度 + u64 数量, 小端
BLOB_MAGIC = b"EMB1"
BLOB_VERSION = 1
HEADER_STRUCT = struct.Struct("<4sIIQ")
HEADER_SIZE = HEADER_STRUCT.size  # 20
NORM_TOLERANCE = 1e-5
KINDS = ("image", "text")

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["id", "kind", "patient_id", "study_id", "report_id", "acquired"],
    "properties": {
        "id": {"type": "string", "minLength": 1},
        "kind": {"enum": list(KINDS)},
        "patient_id": {"type": "string"},
        "study_id": {"type": "string"},
        "report_id": {"type": "string"},
        "acquired": {"type": "string", "pattern": r"^\d{4}-\d{2}-\d{2}$"},
        "frame_index": {"type": ["integer", "null"], "minimum": 0},
    },
    "additionalProperties": False,
}
_manifest_validator = Draft7Validator(MANIFEST_SCHEMA)


def normalize(vector: Sequence[float]) -> np.ndarray:
    """L2 归一化, 返回 float32 单位向量

    Args:
        vector: 原始向量

    Returns:
        np.ndarray: float32 单位向量
    """
    v = np.asarray(vector, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(v)):
        raise NumericError("向量含有非有限值")
    norm = np.linalg.norm(v)
    if norm == 0.0:
        raise NumericError("无法归一化零向量")
    return (v / norm).astype(np.float32)


def is_unit(vector: np.ndarray) -> bool:
    norm = np.linalg.norm(np.asarray(vector, dtype=np.float64))
    return abs(norm - 1.0) <= NORM_TOLERANCE


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """单位向量的点积 (64位累加), 截断到 [-1, 1]"""
    a64 = np.asarray(a, dtype=np.float64).reshape(-1)
    b64 = np.asarray(b, dtype=np.float64).reshape(-1)
    if a64.shape != b64.shape:
        raise InputFormatError(f"维度不一致: {a64.size} != {b64.size}")
    return float(np.clip(np.dot(a64, b64), -1.0, 1.0))


def mean_pool(frames: Sequence[np.ndarray], first_n: int = 10) -> np.ndarray:
    """对前 first_n 帧嵌入取平均后重新归一化"""
    if len(frames) == 0:
        raise InputFormatError("mean_pool 需要至少一帧")
    stacked = np.asarray(frames[:first_n], dtype=np.float64)
    return normalize(stacked.mean(axis=0))


@dataclass(frozen=True)
class EmbeddingRecord:
    """一条带身份元数据的单位嵌入"""

    id: str
    kind: str
    patient_id: str
    study_id: str
    report_id: str
    acquired: date
    frame_index: Optional[int]
    embedding: np.ndarray = field(repr=False, compare=False)

    def manifest_line(self) -> Dict:
        return {
            "id": self.id,
            "kind": self.kind,
            "patient_id": self.patient_id,
            "study_id": self.study_id,
            "report_id": self.report_id,
            "acquired": self.acquired.isoformat(),
            "frame_index": self.frame_index,
        }


@dataclass
class LoadReport:
    """导入统计"""

    count: int = 0
    dimension: int = 0
    renormalized: List[str] = field(default_factory=list)


class EmbeddingStore:
    """嵌入存储: 单写者构建, seal() 之后只读, 可并发查询"""

    def __init__(self, dimension: int):
        if dimension < 1:
            raise InputFormatError(f"维度必须为正, 实际 {dimension}")
        self.logger = logging.getLogger(__name__)
        self.dimension = dimension
        self.records: Dict[str, EmbeddingRecord] = {}
        self.order: List[str] = []
        self.by_kind: Dict[str, List[str]] = {k: [] for k in KINDS}
        self.by_patient: Dict[str, List[str]] = {}
        self.by_study: Dict[str, List[str]] = {}
        self.by_report: Dict[str, List[str]] = {}
        self._sealed = False
        self._matrices: Dict[str, Tuple[List[str], np.ndarray]] = {}

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, record_id: str) -> bool:
        return record_id in self.records

    @property
    def sealed(self) -> bool:
        return self._sealed

    def add(self, record: EmbeddingRecord) -> None:
        if self._sealed:
            raise UsageError("存储已封存, 不能再添加记录")
        if record.kind not in KINDS:
            raise InputFormatError(f"记录 {record.id} 的 kind 非法: {record.kind}")
        if record.id in self.records:
            raise InputFormatError(f"重复的记录ID: {record.id}")
        if record.kind == "image" and record.frame_index is None:
            raise InputFormatError(f"图像记录 {record.id} 缺少 frame_index")
        if record.kind == "text" and record.frame_index is not None:
            raise InputFormatError(f"文本记录 {record.id} 不应带 frame_index")
        if record.embedding.shape != (self.dimension,):
            raise InputFormatError(
                f"记录 {record.id} 维度 {record.embedding.shape} 与存储维度 {self.dimension} 不一致"
            )
        self.records[record.id] = record
        self.order.append(record.id)
        self.by_kind[record.kind].append(record.id)
        self.by_patient.setdefault(record.patient_id, []).append(record.id)
        self.by_study.setdefault(record.study_id, []).append(record.id)
        self.by_report.setdefault(record.report_id, []).append(record.id)

    def seal(self) -> "EmbeddingStore":
        """冻结存储并预计算各类别的候选矩阵 (按ID升序)"""
        for kind in KINDS:
            ids = sorted(self.by_kind[kind])
            matrix = (np.stack([self.records[i].embedding for i in ids]).astype(np.float64)
                      if ids else np.zeros((0, self.dimension)))
            self._matrices[kind] = (ids, matrix)
        self._sealed = True
        self.logger.info(
            f"存储已封存: {len(self)} 条记录 (图像 {len(self.by_kind['image'])}, "
            f"文本 {len(self.by_kind['text'])}), 维度 {self.dimension}"
        )
        return self

    def get(self, record_id: str) -> EmbeddingRecord:
        try:
            return self.records[record_id]
        except KeyError as e:
            raise InputFormatError(f"未知记录ID: {record_id}") from e

    def candidates(self, kind: Optional[str] = None) -> Tuple[List[str], np.ndarray]:
        """返回 (按ID升序的ID列表, float64 矩阵)"""
        if not self._sealed:
            self.seal()
        if kind is None:
            ids = sorted(self.records)
            matrix = (np.stack([self.records[i].embedding for i in ids]).astype(np.float64)
                      if ids else np.zeros((0, self.dimension)))
            return ids, matrix
        if kind not in KINDS:
            raise UsageError(f"未知 kind 过滤: {kind}")
        return self._matrices[kind]

    def iter_records(self, kind: Optional[str] = None) -> Iterable[EmbeddingRecord]:
        ids = self.order if kind is None else self.by_kind[kind]
        for record_id in ids:
            yield self.records[record_id]


def rank_candidates(query: np.ndarray, ids: List[str],
                    matrix: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """按相似度降序排列候选, 并列时ID升序 (ids 须已按升序排列)

    Returns:
        (排序索引, 相似度)
    """
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if matrix.shape[1] != q.size:
        raise InputFormatError(f"维度不一致: 查询 {q.size}, 候选 {matrix.shape[1]}")
    sims = np.clip(matrix @ q, -1.0, 1.0)
    order = np.argsort(-sims, kind="stable")
    return order, sims


def top_k(query: np.ndarray, store: EmbeddingStore, kind: Optional[str] = None,
          k: int = 10) -> List[Tuple[str, float]]:
    """余弦相似度 top-k 检索

    Args:
        query: 单位查询向量
        store: 嵌入存储
        kind: 候选类别过滤 (image/text/None)
        k: 返回数量

    Returns:
        [(id, similarity)] 按相似度降序, 并列时ID升序
    """
    if k < 1:
        raise UsageError(f"k 必须 ≥ 1, 实际 {k}")
    ids, matrix = store.candidates(kind)
    if not ids:
        raise InputFormatError(f"候选集为空 (kind={kind})")
    order, sims = rank_candidates(query, ids, matrix)
    return [(ids[i], float(sims[i])) for i in order[:k]]


def write_blob(matrix: np.ndarray) -> bytes:
    """把 (count, dim) 矩阵编码为 EMB1 二进制"""
    m = np.asarray(matrix, dtype="<f4")
    if m.ndim != 2:
        raise InputFormatError(f"blob 需要二维矩阵, 实际 {m.ndim} 维")
    count, dim = m.shape
    return HEADER_STRUCT.pack(BLOB_MAGIC, BLOB_VERSION, dim, count) + m.tobytes(order="C")


def read_blob(data: bytes) -> np.ndarray:
    """解码 EMB1 二进制为 (count, dim) float32 矩阵"""
    if len(data) < HEADER_SIZE:
        raise InputFormatError(f"blob 太短 ({len(data)} 字节), 无法读取文件头")
    magic, version, dim, count = HEADER_STRUCT.unpack_from(data, 0)
    if magic != BLOB_MAGIC:
        raise InputFormatError(f"错误的魔数 {magic!r}, 期望 {BLOB_MAGIC!r}")
    if version != BLOB_VERSION:
        raise InputFormatError(f"不支持的 blob 版本 {version}, 期望 {BLOB_VERSION}")
    expected = HEADER_SIZE + count * dim * 4
    if len(data) != expected:
        raise InputFormatError(
            f"blob 大小 {len(data)} 与文件头声明不符 (期望 {expected} 字节)"
        )
    values = np.frombuffer(data, dtype="<f4", offset=HEADER_SIZE)
    if not np.all(np.isfinite(values)):
        raise NumericError("blob 中含有非有限值")
    return values.reshape(count, dim).astype(np.float32)


def parse_manifest(text: str) -> List[Dict]:
    """解析 JSON Lines 清单, 每行做 schema 校验"""
    entries = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise InputFormatError(f"清单第 {line_no} 行不是合法JSON: {e}") from e
        errors = sorted(_manifest_validator.iter_errors(obj), key=lambda err: err.path)
        if errors:
            raise InputFormatError(f"清单第 {line_no} 行不符合schema: {errors[0].message}")
        entries.append(obj)
    return entries


def import_embeddings(manifest_text: str, blob: bytes) -> Tuple[EmbeddingStore, LoadReport]:
    """由清单文本和 EMB1 blob 构建存储

    非单位向量会被归一化并记录在 LoadReport 中。
    """
    matrix = read_blob(blob)
    entries = parse_manifest(manifest_text)
    if len(entries) != matrix.shape[0]:
        raise InputFormatError(
            f"数量不一致: 文件头 {matrix.shape[0]} 条, 清单 {len(entries)} 行"
        )
    dim = matrix.shape[1]
    store = EmbeddingStore(dim)
    report = LoadReport(count=len(entries), dimension=dim)
    for entry, vector in zip(entries, matrix):
        if is_unit(vector):
            embedding = vector.copy()
        else:
            embedding = normalize(vector)
            report.renormalized.append(entry["id"])
        store.add(EmbeddingRecord(
            id=entry["id"],
            kind=entry["kind"],
            patient_id=entry["patient_id"],
            study_id=entry["study_id"],
            report_id=entry["report_id"],
            acquired=date.fromisoformat(entry["acquired"]),
            frame_index=entry.get("frame_index"),
            embedding=embedding,
        ))
    if report.renormalized:
        logger.warning(f"{len(report.renormalized)} 个导入向量不是单位向量, 已归一化")
    store.seal()
    return store, report


def export_embeddings(store: EmbeddingStore) -> Tuple[str, bytes]:
    """把存储导出为 (清单文本, EMB1 blob), 顺序为插入顺序"""
    lines = []
    vectors = []
    for record in store.iter_records():
        lines.append(json.dumps(record.manifest_line(), sort_keys=True))
        vectors.append(record.embedding)
    matrix = (np.stack(vectors) if vectors
              else np.zeros((0, store.dimension), dtype=np.float32))
    return "\n".join(lines) + ("\n" if lines else ""), write_blob(matrix)


def load_store(manifest_path: str, blob_path: str) -> Tuple[EmbeddingStore, LoadReport]:
    for path in (manifest_path, blob_path):
        if not os.path.exists(path):
            raise UsageError(f"文件不存在: {path}")
    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest_text = f.read()
    with open(blob_path, "rb") as f:
        blob = f.read()
    logger.info(f"读取嵌入: 清单 {manifest_path}, blob {blob_path}")
    return import_embeddings(manifest_text, blob)


def save_store(store: EmbeddingStore, manifest_path: str, blob_path: str) -> None:
    manifest_text, blob = export_embeddings(store)
    with open(manifest_path, "w", encoding="utf-8") as f:
        f.write(manifest_text)
    with open(blob_path, "wb") as f:
        f.write(blob)
    logger.info(f"已导出 {len(store)} 条嵌入到 {manifest_path} / {blob_path}")
