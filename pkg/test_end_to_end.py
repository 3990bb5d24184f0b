#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
端到端测试: 在 800 个合成图文对上分别用 bag 与 slot 文本特征训练玩具编码器,
在留出患者上做零样本 LVEF 回归和起搏器分类, 并与随机初始化编码器对照

bag (token 计数) 是默认文本特征: 起搏器分类达标, 但数字只以数字 token 计数出现,
EF 回归误差明显高于 slot; EF MAE < 10 的要求由 slot 特征满足。
"""

import os
import sys
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.core.config import desk_profile
from src.modules.metrics import bootstrap_ci, mae, roc_auc
from src.modules.report_tokenizer import TemplateTokenizer, load_starter_vocab
from src.modules.synth_corpus import generate_corpus, split_by_patient, task_truth
from src.modules.toy_dual_encoder import (FEATURIZERS, build_training_pairs, encode_frames,
                                          init_params, make_featurizer, text_encoder, train)
from src.modules.zeroshot_engine import classify_videos, load_prompt_set, regress_videos

SEED = 7
RANDOM_SEEDS = range(100, 110)
HELD_OUT_PATIENTS = 2500


def ef_predictions(params, studies, featurizer, tokenizer, n_jobs=1):
    """返回 (EF 预测, EF 真值), 按 report_id 排序"""
    encoder = text_encoder(params, featurizer, tokenizer)
    videos = {s.report_id: encode_frames(s.frames, params) for s in studies}
    ef = regress_videos(videos, load_prompt_set("lvef").grid().embed(encoder), n_jobs=n_jobs)
    ordered = sorted(studies, key=lambda s: s.report_id)
    return (np.array([ef[s.report_id] for s in ordered]),
            np.array([task_truth("lvef", s.latent) for s in ordered]))


def evaluate(params, studies, featurizer, tokenizer):
    """返回 (EF 预测, EF 真值, 起搏器得分, 起搏器标签), 均按 report_id 排序"""
    encoder = text_encoder(params, featurizer, tokenizer)
    videos = {s.report_id: encode_frames(s.frames, params) for s in studies}
    ordered = sorted(studies, key=lambda s: s.report_id)
    pacemaker = classify_videos(videos, load_prompt_set("pacemaker").class_prompts().embed(encoder))
    preds, truths = ef_predictions(params, studies, featurizer, tokenizer)
    return (preds, truths,
            np.array([pacemaker[s.report_id] for s in ordered]),
            np.array([task_truth("pacemaker", s.latent) for s in ordered]))


class TestEndToEnd(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.vocab = load_starter_vocab()
        cls.tokenizer = TemplateTokenizer(cls.vocab)
        studies = generate_corpus(250, 4, seed=SEED)
        cls.train_studies, cls.val_studies = split_by_patient(studies, 0.2, seed=SEED)
        cls.config = desk_profile(seed=SEED)
        d_img = cls.train_studies[0].frames.shape[1]

        cls.runs = {}
        for name in FEATURIZERS:
            featurizer = make_featurizer(name, cls.vocab)
            result = train(build_training_pairs(cls.train_studies, featurizer, cls.tokenizer),
                           build_training_pairs(cls.val_studies, featurizer, cls.tokenizer),
                           cls.config, featurizer=name)
            cls.runs[name] = {
                "featurizer": featurizer,
                "result": result,
                "trained": evaluate(result.best.params, cls.val_studies, featurizer,
                                    cls.tokenizer),
                "random": [
                    evaluate(init_params(d_img, featurizer.dim, cls.config.d, seed,
                                         featurizer=name),
                             cls.val_studies, featurizer, cls.tokenizer)
                    for seed in RANDOM_SEEDS
                ],
            }

    def test_01_split_sizes(self):
        """800 个训练对, 留出患者不参与训练"""
        self.assertEqual(len(self.train_studies), 800)
        self.assertEqual(len(self.val_studies), 200)
        self.assertFalse({s.patient_id for s in self.train_studies}
                         & {s.patient_id for s in self.val_studies})
        for name, run in self.runs.items():
            self.assertFalse(run["result"].aborted, name)

    def test_02_ef_regression_slot(self):
        """slot 特征: 训练后 EF MAE < 10, 且不到随机编码器的一半"""
        run = self.runs["slot"]
        preds, truths, _, _ = run["trained"]
        trained_mae = mae(preds, truths)
        random_mae = float(np.mean([mae(r[0], r[1]) for r in run["random"]]))
        self.assertLess(trained_mae, 10.0)
        self.assertLess(trained_mae, 0.5 * random_mae,
                        f"训练 {trained_mae:.2f} vs 随机 {random_mae:.2f}")
        self.assertTrue(np.all((preds >= 0) & (preds <= 100)))

    def test_03_ef_regression_bag(self):
        """bag 特征: 预测落在网格范围内, EF 误差高于 slot"""
        preds, truths, _, _ = self.runs["bag"]["trained"]
        self.assertTrue(np.all((preds >= 0) & (preds <= 100)))
        slot_preds, slot_truths, _, _ = self.runs["slot"]["trained"]
        self.assertGreater(mae(preds, truths), mae(slot_preds, slot_truths))

    def test_04_pacemaker_classification(self):
        """两种特征训练后起搏器 AUC > 0.9; 随机编码器 AUC 平均在 0.5 ± 0.1 内"""
        for name, run in self.runs.items():
            with self.subTest(name):
                _, _, scores, labels = run["trained"]
                self.assertGreater(labels.sum(), 0)
                self.assertLess(labels.sum(), len(labels))
                self.assertGreater(roc_auc(scores, labels), 0.9)
                random_auc = float(np.mean([roc_auc(r[2], r[3]) for r in run["random"]]))
                self.assertLess(abs(random_auc - 0.5), 0.1, f"随机编码器平均 AUC {random_auc:.3f}")

    def test_05_bootstrap_determinism(self):
        """同种子区间逐位一致 (与线程数无关); AUC 区间 n_boot 1000 → 4000 变化 < 0.02"""
        preds, truths, scores, labels = self.runs["slot"]["trained"]
        first = bootstrap_ci(mae, (preds, truths), n_boot=1000, seed=SEED)
        again = bootstrap_ci(mae, (preds, truths), n_boot=1000, seed=SEED, n_jobs=4)
        self.assertEqual(first, again)
        auc_1000 = bootstrap_ci(roc_auc, (scores, labels), n_boot=1000, seed=SEED)
        auc_4000 = bootstrap_ci(roc_auc, (scores, labels), n_boot=4000, seed=SEED)
        self.assertLess(abs(auc_1000.ci_low - auc_4000.ci_low), 0.02)
        self.assertLess(abs(auc_1000.ci_high - auc_4000.ci_high), 0.02)

    def test_06_bootstrap_mae_stability(self):
        """训练好的编码器在 10000 段新患者视频上: EF MAE 区间 n_boot 1000 → 4000 变化 < 0.02"""
        held_out = generate_corpus(HELD_OUT_PATIENTS, 4, seed=SEED + 1000)
        run = self.runs["slot"]
        preds, truths = ef_predictions(run["result"].best.params, held_out, run["featurizer"],
                                       self.tokenizer, n_jobs=4)
        self.assertEqual(len(preds), 4 * HELD_OUT_PATIENTS)
        narrow = bootstrap_ci(mae, (preds, truths), n_boot=1000, seed=SEED)
        wide = bootstrap_ci(mae, (preds, truths), n_boot=4000, seed=SEED)
        self.assertLess(narrow.value, 10.0)
        self.assertLess(abs(narrow.ci_low - wide.ci_low), 0.02)
        self.assertLess(abs(narrow.ci_high - wide.ci_high), 0.02)

    def test_07_best_checkpoint_beats_initial(self):
        """最佳检查点的验证 MCMRR 低于初始参数"""
        for name, run in self.runs.items():
            with self.subTest(name):
                result = run["result"]
                self.assertLess(result.best.val_mcmrr, result.val_history[0][1])
                self.assertGreater(result.best.epoch, 0)


if __name__ == "__main__":
    unittest.main(verbosity=2)
