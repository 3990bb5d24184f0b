#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
合成超声"检查"生成器

每个检查包含一个潜在心脏状态、按入门模板语法渲染的报告文本, 以及
编码该状态的逐帧图像特征。图像特征 = 固定线性嵌入(潜在状态)
+ 患者签名 + 检查扰动 (+ 事件后偏移) + 帧噪声。
"""

import os
import json
import logging
from dataclasses import dataclass, field, asdict
from datetime import date, timedelta
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.core.errors import InputFormatError, UsageError
from src.core.value_coding import VALUE_CENTERS, population_code
from src.modules.embedding_store.embedding_store import write_blob, read_blob
from src.modules.report_tokenizer.template_tokenizer import TemplateVocab, load_starter_vocab

logger = logging.getLogger(__name__)

SEVERITY_LEVELS = ("none", "mild", "moderate", "severe")
SEVERITY_PROBS = (0.55, 0.25, 0.12, 0.08)
CHAMBERS = ("lv", "rv", "la", "ra")
DEVICES = ("pacemaker", "tavr", "mitraclip", "impella")
DEFAULT_PREVALENCE = {"pacemaker": 0.3, "tavr": 0.15, "mitraclip": 0.1, "impella": 0.05}
EF_RANGE = (10, 80)
PAP_RANGE = (15, 90)
LATENT_DIM = 2 * len(VALUE_CENTERS) + len(DEVICES) + len(CHAMBERS)
START_DATE = date(2012, 1, 1)


@dataclass(frozen=True)
class LatentState:
    """潜在心脏状态"""

    ef: int
    pap: int
    pacemaker: bool = False
    tavr: bool = False
    mitraclip: bool = False
    impella: bool = False
    lv: str = "none"
    rv: str = "none"
    la: str = "none"
    ra: str = "none"

    def __post_init__(self):
        if not EF_RANGE[0] <= self.ef <= EF_RANGE[1]:
            raise InputFormatError(f"ef 超出范围 {EF_RANGE}: {self.ef}")
        if not PAP_RANGE[0] <= self.pap <= PAP_RANGE[1]:
            raise InputFormatError(f"pap 超出范围 {PAP_RANGE}: {self.pap}")
        for chamber in CHAMBERS:
            if getattr(self, chamber) not in SEVERITY_LEVELS:
                raise InputFormatError(f"{chamber} 严重程度非法: {getattr(self, chamber)}")

    def vector(self, value_scale: float = 2.0, device_scale: float = 0.5) -> np.ndarray:
        """潜在编码: ef/pap 的群体编码 + 设备 ±device_scale + 严重程度 [-1, 1]"""
        devices = [device_scale if getattr(self, d) else -device_scale for d in DEVICES]
        severities = [(SEVERITY_LEVELS.index(getattr(self, c)) - 1.5) / 1.5 for c in CHAMBERS]
        return np.concatenate([
            value_scale * population_code(self.ef),
            value_scale * population_code(self.pap),
            np.asarray(devices + severities, dtype=np.float64),
        ])

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class SyntheticStudy:
    """一个合成检查 (一段视频 + 一份报告)"""

    patient_id: str
    study_id: str
    acquired: date
    latent: LatentState
    report_text: str
    frames: np.ndarray = field(repr=False)
    post_event: bool = False
    event_date: Optional[date] = None

    @property
    def report_id(self) -> str:
        return f"{self.study_id}-R"


@dataclass(frozen=True)
class SynthConfig:
    """生成参数"""

    d_img: int = 64
    n_frames: int = 16
    value_scale: float = 2.0
    device_scale: float = 0.5
    signature_scale: float = 2.0
    study_scale: float = 0.3
    event_fraction: float = 0.0
    event_shift: float = 3.0
    geometry_seed: int = 0
    prevalence: Tuple[Tuple[str, float], ...] = tuple(DEFAULT_PREVALENCE.items())

    def __post_init__(self):
        if self.d_img < LATENT_DIM:
            raise UsageError(f"d_img 至少为 {LATENT_DIM}")
        if self.n_frames < 1:
            raise UsageError("n_frames 必须为正")


def _severity_from_ef(ef: int) -> Optional[str]:
    if ef >= 50:
        return None
    if ef >= 40:
        return "mild"
    if ef >= 30:
        return "moderate"
    return "severe"


def render_report(latent: LatentState, vocab: TemplateVocab) -> str:
    """按模板语法渲染报告文本"""
    sentences = []
    for chamber in CHAMBERS:
        severity = getattr(latent, chamber)
        if severity == "none":
            sentences.append(vocab.render(f"{chamber}_normal_size"))
        else:
            sentences.append(vocab.render(f"{chamber}_dilated", severity))
        if chamber == "lv":
            sentences.append(vocab.render("lvef", latent.ef))
            reduced = _severity_from_ef(latent.ef)
            if reduced is None:
                sentences.append(vocab.render("lv_function_normal"))
            else:
                sentences.append(vocab.render("lv_function_reduced", reduced))
    sentences.append(vocab.render("pasp", latent.pap, "mmhg"))
    for device in DEVICES:
        if getattr(latent, device):
            sentences.append(vocab.render(device))
    sentences.append(vocab.render("no_effusion"))
    sentences.append(vocab.render("ivc_dilated" if latent.pap >= 40 else "ivc_normal"))
    return ". ".join(sentences) + "."


def latent_embedding(config: SynthConfig) -> np.ndarray:
    """固定的潜在→特征线性嵌入 (LATENT_DIM × d_img, 行正交)"""
    rng = np.random.default_rng([config.geometry_seed, 1])
    gaussian = rng.standard_normal((config.d_img, LATENT_DIM))
    q, _ = np.linalg.qr(gaussian)
    return q.T


def _unit(rng: np.random.Generator, dim: int) -> np.ndarray:
    v = rng.standard_normal(dim)
    return v / np.linalg.norm(v)


def _sample_latent(rng: np.random.Generator, prevalence: Dict[str, float]) -> LatentState:
    severities = {c: SEVERITY_LEVELS[rng.choice(len(SEVERITY_LEVELS), p=SEVERITY_PROBS)]
                  for c in CHAMBERS}
    devices = {d: bool(rng.random() < prevalence.get(d, 0.0)) for d in DEVICES}
    return LatentState(
        ef=int(rng.integers(EF_RANGE[0], EF_RANGE[1] + 1)),
        pap=int(rng.integers(PAP_RANGE[0], PAP_RANGE[1] + 1)),
        **devices, **severities,
    )


def _drift(rng: np.random.Generator, base: LatentState) -> LatentState:
    ef = int(np.clip(base.ef + rng.integers(-3, 4), *EF_RANGE))
    pap = int(np.clip(base.pap + rng.integers(-5, 6), *PAP_RANGE))
    values = base.to_dict()
    values.update(ef=ef, pap=pap)
    return LatentState(**values)


def generate_corpus(n_patients: int, studies_per_patient: int, seed: int,
                    noise_sigma: float = 0.5, config: Optional[SynthConfig] = None,
                    vocab: Optional[TemplateVocab] = None) -> List[SyntheticStudy]:
    """生成合成语料

    Args:
        n_patients: 患者数 (≥2)
        studies_per_patient: 每位患者的检查数
        seed: 随机种子, 第 i 位患者使用 default_rng([seed, i])
        noise_sigma: 帧噪声的期望范数
        config: 其余生成参数
        vocab: 渲染报告用的模板词表, 默认入门词表

    Returns:
        List[SyntheticStudy]: 按 (患者, 检查日期) 排序
    """
    if n_patients < 2:
        raise UsageError(f"n_patients 至少为2, 实际 {n_patients}")
    if studies_per_patient < 1:
        raise UsageError(f"studies_per_patient 必须为正, 实际 {studies_per_patient}")
    if noise_sigma < 0:
        raise UsageError(f"noise_sigma 不能为负: {noise_sigma}")
    config = config or SynthConfig()
    vocab = vocab or load_starter_vocab()
    embedding = latent_embedding(config)
    prevalence = dict(config.prevalence)
    noise_sd = noise_sigma / np.sqrt(config.d_img)

    studies: List[SyntheticStudy] = []
    for p in range(n_patients):
        rng = np.random.default_rng([seed, p])
        patient_id = f"P{p:05d}"
        base = _sample_latent(rng, prevalence)
        signature = _unit(rng, config.d_img) * config.signature_scale
        shift = _unit(rng, config.d_img) * config.event_shift

        acquired = START_DATE + timedelta(days=int(rng.integers(0, 3650)))
        dates = []
        for _ in range(studies_per_patient):
            dates.append(acquired)
            acquired = acquired + timedelta(days=int(rng.integers(30, 121)))

        event_date = None
        if studies_per_patient >= 2 and rng.random() < config.event_fraction:
            pivot = studies_per_patient // 2
            event_date = dates[pivot] - timedelta(days=int(rng.integers(1, 21)))

        for s, study_date in enumerate(dates):
            latent = base if s == 0 else _drift(rng, base)
            post = event_date is not None and study_date >= event_date
            center = latent.vector(config.value_scale, config.device_scale) @ embedding + signature
            center = center + _unit(rng, config.d_img) * config.study_scale
            if post:
                center = center + shift
            noise = rng.standard_normal((config.n_frames, config.d_img)) * noise_sd
            frames = (center[None, :] + noise).astype(np.float32)
            studies.append(SyntheticStudy(
                patient_id=patient_id,
                study_id=f"{patient_id}-S{s:02d}",
                acquired=study_date,
                latent=latent,
                report_text=render_report(latent, vocab),
                frames=frames,
                post_event=post,
                event_date=event_date,
            ))
    logger.info(
        f"生成合成语料: {n_patients} 位患者, {len(studies)} 个检查, "
        f"特征维度 {config.d_img}, 每检查 {config.n_frames} 帧"
    )
    return studies


def split_by_patient(studies: Sequence[SyntheticStudy], val_fraction: float,
                     seed: int) -> Tuple[List[SyntheticStudy], List[SyntheticStudy]]:
    """按患者划分训练/验证集 (两者患者不相交)"""
    patients = sorted({s.patient_id for s in studies})
    rng = np.random.default_rng([seed, 7])
    shuffled = [patients[i] for i in rng.permutation(len(patients))]
    n_val = max(1, int(round(len(patients) * val_fraction)))
    val_patients = set(shuffled[:n_val])
    train = [s for s in studies if s.patient_id not in val_patients]
    val = [s for s in studies if s.patient_id in val_patients]
    return train, val


def report_record(study: SyntheticStudy) -> Dict:
    return {
        "report_id": study.report_id,
        "patient_id": study.patient_id,
        "study_id": study.study_id,
        "acquired": study.acquired.isoformat(),
        "text": study.report_text,
        "latent": study.latent.to_dict(),
        "post_event": study.post_event,
        "event_date": study.event_date.isoformat() if study.event_date else None,
    }


def export_corpus(studies: Sequence[SyntheticStudy], out_dir: str) -> Dict[str, str]:
    """导出语料: 帧特征 (EMB1 + 清单) 与报告 JSONL

    特征按原始尺度写出 (未归一化的伪嵌入)。
    """
    if not studies:
        raise InputFormatError("没有可导出的检查")
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "manifest": os.path.join(out_dir, "features.jsonl"),
        "blob": os.path.join(out_dir, "features.emb1"),
        "reports": os.path.join(out_dir, "reports.jsonl"),
    }
    lines = []
    vectors = []
    for study in studies:
        for f_idx, frame in enumerate(study.frames):
            lines.append(json.dumps({
                "id": f"{study.study_id}-F{f_idx:02d}",
                "kind": "image",
                "patient_id": study.patient_id,
                "study_id": study.study_id,
                "report_id": study.report_id,
                "acquired": study.acquired.isoformat(),
                "frame_index": f_idx,
            }, sort_keys=True))
            vectors.append(frame)
    with open(paths["manifest"], "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    with open(paths["blob"], "wb") as f:
        f.write(write_blob(np.stack(vectors)))
    with open(paths["reports"], "w", encoding="utf-8") as f:
        for study in studies:
            f.write(json.dumps(report_record(study), sort_keys=True) + "\n")
    logger.info(f"语料已导出到 {out_dir}: {len(studies)} 个检查, {len(vectors)} 帧")
    return paths


def load_corpus(out_dir: str) -> List[SyntheticStudy]:
    """读取 export_corpus 的输出"""
    manifest_path = os.path.join(out_dir, "features.jsonl")
    blob_path = os.path.join(out_dir, "features.emb1")
    reports_path = os.path.join(out_dir, "reports.jsonl")
    for path in (manifest_path, blob_path, reports_path):
        if not os.path.exists(path):
            raise UsageError(f"语料文件不存在: {path}")
    with open(blob_path, "rb") as f:
        matrix = read_blob(f.read())
    with open(manifest_path, "r", encoding="utf-8") as f:
        entries = [json.loads(line) for line in f if line.strip()]
    if len(entries) != matrix.shape[0]:
        raise InputFormatError(
            f"数量不一致: blob {matrix.shape[0]} 帧, 清单 {len(entries)} 行"
        )
    frames_by_study: Dict[str, List[Tuple[int, np.ndarray]]] = {}
    for entry, vector in zip(entries, matrix):
        frames_by_study.setdefault(entry["study_id"], []).append((entry["frame_index"], vector))

    studies = []
    with open(reports_path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                frames = frames_by_study[rec["study_id"]]
            except (json.JSONDecodeError, KeyError) as e:
                raise InputFormatError(f"报告第 {line_no} 行无效: {e}") from e
            frames.sort(key=lambda item: item[0])
            studies.append(SyntheticStudy(
                patient_id=rec["patient_id"],
                study_id=rec["study_id"],
                acquired=date.fromisoformat(rec["acquired"]),
                latent=LatentState(**rec["latent"]),
                report_text=rec["text"],
                frames=np.stack([v for _, v in frames]),
                post_event=bool(rec.get("post_event", False)),
                event_date=date.fromisoformat(rec["event_date"]) if rec.get("event_date") else None,
            ))
    logger.info(f"读取语料 {out_dir}: {len(studies)} 个检查")
    return studies


def task_truth(task: str, latent: LatentState) -> float:
    """内置零样本任务在合成潜在状态上的真值"""
    if task == "lvef":
        return float(latent.ef)
    if task == "pap":
        return float(latent.pap)
    if task in DEVICES:
        return float(getattr(latent, task))
    if task.startswith("severe_") and task.endswith("_dilation"):
        chamber = task[len("severe_"):-len("_dilation")]
        if chamber in CHAMBERS:
            return float(getattr(latent, chamber) == "severe")
    raise UsageError(f"合成语料不支持任务 {task}")
