#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
桌面规模的双塔编码器: 两个线性投影 + 可学习温度, 使用对称 CLIP 损失训练

损失与梯度全部手写 (numpy), 并提供有限差分梯度校验。
"""

import os
import json
import math
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp, softmax
from tqdm import tqdm

from src.core.config import TrainConfig
from src.core.errors import InputFormatError, NumericError, UsageError
from src.modules.embedding_store.embedding_store import (EmbeddingRecord, EmbeddingStore,
                                                         normalize, read_blob, write_blob)
from src.modules.report_tokenizer.template_tokenizer import TemplateTokenizer, TokenSequence
from src.modules.retrieval_eval.retrieval_eval import RetrievalPair, mcmrr, retrieval_metrics

logger = logging.getLogger(__name__)

LOG_TEMP_INIT = math.log(1.0 / 0.07)
CHECKPOINT_VERSION = 1


@dataclass
class DualEncoderParams:
    """W_img (d_img × d), W_txt (d_txt × d), 对数温度 log_temp"""

    w_img: np.ndarray
    w_txt: np.ndarray
    log_temp: float = LOG_TEMP_INIT
    featurizer: str = "bag"

    def __post_init__(self):
        self.w_img = np.asarray(self.w_img, dtype=np.float64)
        self.w_txt = np.asarray(self.w_txt, dtype=np.float64)
        if self.w_img.ndim != 2 or self.w_txt.ndim != 2:
            raise InputFormatError("投影矩阵必须是二维")
        if self.w_img.shape[1] != self.w_txt.shape[1]:
            raise InputFormatError(
                f"共享维度不一致: W_img {self.w_img.shape}, W_txt {self.w_txt.shape}"
            )

    @property
    def d(self) -> int:
        return self.w_img.shape[1]

    @property
    def d_img(self) -> int:
        return self.w_img.shape[0]

    @property
    def d_txt(self) -> int:
        return self.w_txt.shape[0]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.w_img)) and np.all(np.isfinite(self.w_txt))
                    and math.isfinite(self.log_temp))

    def copy(self) -> "DualEncoderParams":
        return DualEncoderParams(self.w_img.copy(), self.w_txt.copy(), self.log_temp,
                                 self.featurizer)


def init_params(d_img: int, d_txt: int, d: int, seed: int,
                log_temp: float = LOG_TEMP_INIT, featurizer: str = "bag") -> DualEncoderParams:
    """高斯随机初始化, 方差 1/输入维度"""
    rng = np.random.default_rng([seed, 0])
    w_img = rng.standard_normal((d_img, d)) / math.sqrt(d_img)
    w_txt = rng.standard_normal((d_txt, d)) / math.sqrt(d_txt)
    return DualEncoderParams(w_img, w_txt, log_temp, featurizer)


def _normalize_rows(u: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(u, axis=1, keepdims=True)
    if not np.all(np.isfinite(u)):
        raise NumericError("投影结果含有非有限值")
    if np.any(norms == 0.0):
        raise NumericError("投影结果为零向量 (参数退化)")
    return u / norms, norms


def encode_image_toy(features, params: DualEncoderParams) -> np.ndarray:
    """normalize(features · W_img)"""
    x = np.asarray(features, dtype=np.float64).reshape(-1)
    if x.size != params.d_img:
        raise InputFormatError(f"图像特征维度 {x.size} 与 d_img {params.d_img} 不一致")
    if not np.all(np.isfinite(x)):
        raise NumericError("图像特征含有非有限值")
    return normalize(x @ params.w_img)


def encode_text_toy(token_seq: TokenSequence, params: DualEncoderParams,
                    featurizer: Callable[[TokenSequence], np.ndarray]) -> np.ndarray:
    """normalize(text_features(token_seq) · W_txt); 仅含 bos/eos 时报零向量错误"""
    t = featurizer(token_seq)
    if t.size != params.d_txt:
        raise InputFormatError(f"文本特征维度 {t.size} 与 d_txt {params.d_txt} 不一致")
    return normalize(t @ params.w_txt)


@dataclass
class ClipGradients:
    img: np.ndarray
    txt: np.ndarray
    log_temp: float


def clip_loss(img_embs: np.ndarray, txt_embs: np.ndarray,
              log_temp: float) -> Tuple[float, ClipGradients]:
    """对称 CLIP 损失及其对嵌入和对数温度的解析梯度

    logits = exp(τ)·I·Tᵀ; loss = ½[行交叉熵 + 列交叉熵], 目标为对角线, 按 N 平均。

    Args:
        img_embs: N × d 图像嵌入
        txt_embs: N × d 文本嵌入
        log_temp: τ

    Returns:
        (loss, ClipGradients)
    """
    i = np.asarray(img_embs, dtype=np.float64)
    t = np.asarray(txt_embs, dtype=np.float64)
    if i.shape != t.shape or i.ndim != 2:
        raise InputFormatError(f"批次形状不一致: {i.shape} vs {t.shape}")
    n = i.shape[0]
    if n < 2:
        raise InputFormatError(f"clip_loss 需要 N ≥ 2, 实际 {n}")
    scale = math.exp(log_temp)
    sims = i @ t.T
    logits = scale * sims
    if not np.all(np.isfinite(logits)):
        raise NumericError("logits 含有非有限值")

    diag = np.diag(logits)
    row_ce = logsumexp(logits, axis=1) - diag
    col_ce = logsumexp(logits, axis=0) - diag
    loss = 0.5 * (row_ce.mean() + col_ce.mean())

    eye = np.eye(n)
    g = (softmax(logits, axis=1) - eye + softmax(logits, axis=0) - eye) / (2.0 * n)
    d_sims = scale * g
    grads = ClipGradients(
        img=d_sims @ t,
        txt=d_sims.T @ i,
        log_temp=float(np.sum(g * logits)),
    )
    return float(loss), grads


def _project_grad(z: np.ndarray, norms: np.ndarray, dz: np.ndarray) -> np.ndarray:
    """z = u/|u| 的反向传播"""
    return (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norms


def loss_and_param_grads(params: DualEncoderParams, img_feats: np.ndarray,
                         txt_feats: np.ndarray) -> Tuple[float, DualEncoderParams]:
    """批次损失与对 W_img / W_txt / τ 的梯度 (梯度以 DualEncoderParams 形式返回)"""
    z_img, n_img = _normalize_rows(img_feats @ params.w_img)
    z_txt, n_txt = _normalize_rows(txt_feats @ params.w_txt)
    loss, grads = clip_loss(z_img, z_txt, params.log_temp)
    d_w_img = img_feats.T @ _project_grad(z_img, n_img, grads.img)
    d_w_txt = txt_feats.T @ _project_grad(z_txt, n_txt, grads.txt)
    return loss, DualEncoderParams(d_w_img, d_w_txt, grads.log_temp, params.featurizer)


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _central_difference(f: Callable[[], float], array: np.ndarray, eps: float) -> np.ndarray:
    numeric = np.zeros_like(array)
    for idx in np.ndindex(array.shape):
        orig = array[idx]
        array[idx] = orig + eps
        plus = f()
        array[idx] = orig - eps
        minus = f()
        array[idx] = orig
        numeric[idx] = (plus - minus) / (2.0 * eps)
    return numeric


def gradient_check(n: int = 4, d: int = 8, eps: float = 1e-5, seed: int = 0,
                   d_img: int = 6, d_txt: int = 5) -> Dict[str, float]:
    """解析梯度与中心差分的最大相对误差 (相对于梯度最大绝对值)

    同时校验 clip_loss 对嵌入/τ 的梯度和经过归一化后对 W_img/W_txt 的梯度。
    """
    rng = np.random.default_rng([seed, 11])
    img = rng.standard_normal((n, d))
    txt = rng.standard_normal((n, d))
    img /= np.linalg.norm(img, axis=1, keepdims=True)
    txt /= np.linalg.norm(txt, axis=1, keepdims=True)
    tau = np.array([rng.uniform(0.0, 2.0)])

    _, grads = clip_loss(img, txt, tau[0])
    errors = {
        "img": _relative_error(grads.img, _central_difference(
            lambda: clip_loss(img, txt, tau[0])[0], img, eps)),
        "txt": _relative_error(grads.txt, _central_difference(
            lambda: clip_loss(img, txt, tau[0])[0], txt, eps)),
        "log_temp": _relative_error(np.array([grads.log_temp]), _central_difference(
            lambda: clip_loss(img, txt, tau[0])[0], tau, eps)),
    }

    params = init_params(d_img, d_txt, d, seed, log_temp=float(tau[0]))
    x_img = rng.standard_normal((n, d_img))
    x_txt = rng.standard_normal((n, d_txt))
    _, pgrads = loss_and_param_grads(params, x_img, x_txt)
    errors["w_img"] = _relative_error(pgrads.w_img, _central_difference(
        lambda: loss_and_param_grads(params, x_img, x_txt)[0], params.w_img, eps))
    errors["w_txt"] = _relative_error(pgrads.w_txt, _central_difference(
        lambda: loss_and_param_grads(params, x_img, x_txt)[0], params.w_txt, eps))
    return errors


def lr_schedule(step: int, config: TrainConfig, total_steps: int) -> float:
    """线性预热到 lr_max, 之后余弦衰减到 0"""
    if not 0 <= step <= total_steps:
        raise UsageError(f"step {step} 超出范围 [0, {total_steps}]")
    warmup = config.warmup_steps
    if warmup >= total_steps:
        raise UsageError(f"warmup_steps ({warmup}) 必须小于总步数 ({total_steps})")
    if warmup > 0 and step <= warmup:
        return config.lr_max * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return config.lr_max * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainingPair:
    """一个视频 (帧特征) 与其报告的文本特征

    frame_ids 为训练时可抽取的帧下标; None 表示前 frames_per_video 帧。
    """

    report_id: str
    patient_id: str
    frames: np.ndarray = field(repr=False)
    text_features: np.ndarray = field(repr=False)
    frame_ids: Optional[Tuple[int, ...]] = None

    def frame_set(self, frames_per_video: int) -> np.ndarray:
        n_frames = self.frames.shape[0]
        if self.frame_ids is None:
            return np.arange(min(frames_per_video, n_frames))
        ids = np.asarray(self.frame_ids, dtype=np.int64)
        if ids.size == 0 or ids.min() < 0 or ids.max() >= n_frames:
            raise InputFormatError(
                f"{self.report_id} 的帧集合 {self.frame_ids} 超出 0..{n_frames - 1}"
            )
        return ids


def epoch_draws(config: TrainConfig, epoch: int,
                frame_sets: Sequence[np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    """第 epoch 轮的样本顺序与每个视频抽到的帧下标, 由 [seed, epoch] 决定"""
    rng = np.random.default_rng([config.seed, epoch])
    order = rng.permutation(len(frame_sets))
    picks = rng.integers(0, np.array([len(s) for s in frame_sets]))
    frames = np.array([s[k] for s, k in zip(frame_sets, picks)], dtype=np.int64)
    return order, frames


@dataclass
class Checkpoint:
    params: DualEncoderParams
    epoch: int
    val_mcmrr: float

    def save(self, directory: str) -> None:
        """写出 header.json + w_img.emb1 + w_txt.emb1"""
        os.makedirs(directory, exist_ok=True)
        header = {
            "version": CHECKPOINT_VERSION,
            "d_img": self.params.d_img,
            "d_txt": self.params.d_txt,
            "d": self.params.d,
            "log_temp": self.params.log_temp,
            "featurizer": self.params.featurizer,
            "epoch": self.epoch,
            "val_mcmrr": self.val_mcmrr,
        }
        with open(os.path.join(directory, "w_img.emb1"), "wb") as f:
            f.write(write_blob(self.params.w_img))
        with open(os.path.join(directory, "w_txt.emb1"), "wb") as f:
            f.write(write_blob(self.params.w_txt))
        with open(os.path.join(directory, "header.json"), "w", encoding="utf-8") as f:
            json.dump(header, f, indent=2, sort_keys=True)
        logger.info(f"检查点已保存到 {directory} (epoch {self.epoch}, MCMRR {self.val_mcmrr:.2f})")

    @classmethod
    def load(cls, directory: str) -> "Checkpoint":
        header_path = os.path.join(directory, "header.json")
        if not os.path.exists(header_path):
            raise UsageError(f"检查点不存在: {directory}")
        try:
            with open(header_path, "r", encoding="utf-8") as f:
                header = json.load(f)
            with open(os.path.join(directory, "w_img.emb1"), "rb") as f:
                w_img = read_blob(f.read())
            with open(os.path.join(directory, "w_txt.emb1"), "rb") as f:
                w_txt = read_blob(f.read())
        except (OSError, json.JSONDecodeError) as e:
            raise InputFormatError(f"无法读取检查点 {directory}: {e}") from e
        if header.get("version") != CHECKPOINT_VERSION:
            raise InputFormatError(f"不支持的检查点版本: {header.get('version')}")
        params = DualEncoderParams(w_img, w_txt, float(header["log_temp"]),
                                   header.get("featurizer", "bag"))
        if (params.d_img, params.d_txt, params.d) != (header["d_img"], header["d_txt"], header["d"]):
            raise InputFormatError("检查点矩阵形状与文件头不一致")
        return cls(params=params, epoch=int(header["epoch"]), val_mcmrr=float(header["val_mcmrr"]))


@dataclass
class TrainResult:
    best: Checkpoint
    final: DualEncoderParams
    history: List[Dict[str, float]] = field(default_factory=list)
    val_history: List[Tuple[int, float]] = field(default_factory=list)
    aborted: bool = False


def validation_mcmrr(params: DualEncoderParams, pairs: Sequence[TrainingPair]) -> float:
    """验证集 MCMRR, 图像使用每个视频的第 0 帧"""
    x_img = np.stack([p.frames[0] for p in pairs]).astype(np.float64)
    x_txt = np.stack([p.text_features for p in pairs]).astype(np.float64)
    z_img, _ = _normalize_rows(x_img @ params.w_img)
    z_txt, _ = _normalize_rows(x_txt @ params.w_txt)
    retrieval_pairs = [
        RetrievalPair(report_id=p.report_id, image_id=p.report_id, text_id=p.report_id,
                      image_emb=zi, text_emb=zt)
        for p, zi, zt in zip(pairs, z_img, z_txt)
    ]
    return mcmrr(retrieval_metrics(retrieval_pairs, "image_to_text"),
                 retrieval_metrics(retrieval_pairs, "text_to_image"))


def _abort(result: TrainResult, reason: str) -> TrainResult:
    """中止训练: final 退回到最后一个有限检查点"""
    logger.error(f"{reason}, 训练中止; 返回 epoch {result.best.epoch} 的检查点")
    result.aborted = True
    result.final = result.best.params.copy()
    return result


def train(train_pairs: Sequence[TrainingPair], val_pairs: Sequence[TrainingPair],
          config: TrainConfig, params: Optional[DualEncoderParams] = None,
          featurizer: str = "bag", show_progress: bool = False) -> TrainResult:
    """对比训练, 返回验证 MCMRR 最低的检查点

    每个 epoch: 按种子打乱; 每个视频从其帧集合 (TrainingPair.frame_set) 中重新随机抽一帧;
    丢弃不足一个批次的尾部; 梯度下降更新 W_img, W_txt, τ (exp(τ) 上限 max_logit_scale)。
    初始参数 (epoch 0) 也参与检查点选择。损失或参数出现非有限值时中止,
    返回 aborted=True 与此前最佳的有限检查点。
    """
    n = len(train_pairs)
    if n < config.batch_size:
        raise UsageError(f"训练对数 {n} 少于 batch_size {config.batch_size}")
    if len(val_pairs) < 2:
        raise UsageError("验证集至少需要2个图文对")
    overlap = {p.patient_id for p in train_pairs} & {p.patient_id for p in val_pairs}
    if overlap:
        raise UsageError(f"训练集与验证集存在共同患者: {sorted(overlap)[:5]}")
    config.check_schedule(n)
    total_steps = config.total_steps(n)
    steps_per_epoch = config.steps_per_epoch(n)

    d_img = train_pairs[0].frames.shape[1]
    d_txt = train_pairs[0].text_features.size
    if params is None:
        params = init_params(d_img, d_txt, config.d, config.seed,
                             config.log_temp_init, featurizer)
    else:
        params = params.copy()
    max_log_temp = math.log(config.max_logit_scale)
    text_matrix = np.stack([p.text_features for p in train_pairs]).astype(np.float64)
    frame_sets = [p.frame_set(config.frames_per_video) for p in train_pairs]

    initial = validation_mcmrr(params, val_pairs)
    best = Checkpoint(params.copy(), 0, initial)
    result = TrainResult(best=best, final=params, val_history=[(0, initial)])
    logger.info(
        f"开始训练: {n} 对, 验证 {len(val_pairs)} 对, d={config.d}, batch={config.batch_size}, "
        f"{config.epochs} 个epoch × {steps_per_epoch} 步, 初始验证 MCMRR {initial:.2f}"
    )

    step = 0
    epochs = range(1, config.epochs + 1)
    if show_progress:
        epochs = tqdm(epochs, desc="训练", unit="epoch")
    for epoch in epochs:
        order, frame_choice = epoch_draws(config, epoch, frame_sets)
        losses = []
        for s in range(steps_per_epoch):
            batch = order[s * config.batch_size:(s + 1) * config.batch_size]
            x_img = np.stack([train_pairs[i].frames[frame_choice[i]] for i in batch]).astype(np.float64)
            try:
                loss, grads = loss_and_param_grads(params, x_img, text_matrix[batch])
            except NumericError as e:
                logger.error(f"epoch {epoch} 第 {s} 步数值失败: {e}")
                loss = float("nan")
            if not math.isfinite(loss):
                return _abort(result, f"epoch {epoch} 第 {s} 步损失非有限")
            step += 1
            lr = lr_schedule(step, config, total_steps)
            params.w_img -= lr * grads.w_img
            params.w_txt -= lr * grads.w_txt
            params.log_temp = min(params.log_temp - lr * grads.log_temp, max_log_temp)
            losses.append(loss)

        if not params.is_finite():
            return _abort(result, f"epoch {epoch} 结束时参数含有非有限值")
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": lr,
                  "logit_scale": math.exp(params.log_temp)}
        if epoch % config.val_every == 0 or epoch == config.epochs:
            try:
                score = validation_mcmrr(params, val_pairs)
            except NumericError as e:
                return _abort(result, f"epoch {epoch} 验证失败: {e}")
            record["val_mcmrr"] = score
            result.val_history.append((epoch, score))
            if score < result.best.val_mcmrr:
                result.best = Checkpoint(params.copy(), epoch, score)
        result.history.append(record)
        logger.debug(f"epoch {epoch}: " + ", ".join(f"{k}={v:.4g}" for k, v in record.items()))

    result.final = params
    logger.info(
        f"训练完成: 最佳 epoch {result.best.epoch}, 验证 MCMRR {result.best.val_mcmrr:.2f} "
        f"(初始 {initial:.2f})"
    )
    return result


def build_training_pairs(studies, featurizer, tokenizer: TemplateTokenizer) -> List[TrainingPair]:
    """由合成检查构造训练对"""
    return [
        TrainingPair(
            report_id=s.report_id,
            patient_id=s.patient_id,
            frames=np.asarray(s.frames, dtype=np.float64),
            text_features=featurizer(tokenizer.encode(s.report_text)),
        )
        for s in studies
    ]


def text_encoder(params: DualEncoderParams, featurizer,
                 tokenizer: TemplateTokenizer) -> Callable[[str], np.ndarray]:
    """返回 文本 → 单位嵌入 的编码函数, 用于零样本提示"""
    def encode(text: str) -> np.ndarray:
        return encode_text_toy(tokenizer.encode(text), params, featurizer)
    return encode


def encode_frames(frames: np.ndarray, params: DualEncoderParams) -> np.ndarray:
    """逐帧编码, 返回 F × d 单位嵌入"""
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.d_img:
        raise InputFormatError(f"帧特征形状 {x.shape} 与 d_img {params.d_img} 不一致")
    z, _ = _normalize_rows(x @ params.w_img)
    return z.astype(np.float32)


def encode_corpus(studies, params: DualEncoderParams, featurizer,
                  tokenizer: TemplateTokenizer) -> EmbeddingStore:
    """把合成语料编码为嵌入存储: 每帧一条图像记录, 每份报告一条文本记录"""
    store = EmbeddingStore(params.d)
    for s in studies:
        for f_idx, emb in enumerate(encode_frames(s.frames, params)):
            store.add(EmbeddingRecord(
                id=f"{s.study_id}-F{f_idx:02d}", kind="image", patient_id=s.patient_id,
                study_id=s.study_id, report_id=s.report_id, acquired=s.acquired,
                frame_index=f_idx, embedding=emb,
            ))
        store.add(EmbeddingRecord(
            id=f"{s.report_id}-T", kind="text", patient_id=s.patient_id,
            study_id=s.study_id, report_id=s.report_id, acquired=s.acquired,
            frame_index=None,
            embedding=encode_text_toy(tokenizer.encode(s.report_text), params, featurizer),
        ))
    return store.seal()
