#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
指标内核测试: MAE、ROC AUC、recall@K、bootstrap 置信区间
"""

import os
import sys
import json
import tempfile
import unittest
from itertools import product

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.core.errors import InputFormatError, NumericError
from src.modules.metrics import (EvalReport, MetricEstimate, bootstrap_ci, mae, recall_at_k,
                                 roc_auc)


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p, n in product(pos, neg):
        total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


class TestMetrics(unittest.TestCase):

    def test_01_mae(self):
        """MAE 精确算术"""
        self.assertAlmostEqual(mae([50, 60], [55, 55]), 5.0)
        self.assertAlmostEqual(mae([1.5], [1.5]), 0.0)
        with self.assertRaises(InputFormatError):
            mae([1, 2], [1])
        with self.assertRaises(InputFormatError):
            mae([], [])
        with self.assertRaises(NumericError):
            mae([np.nan], [1.0])

    def test_02_auc_examples(self):
        """完全分离、完全反转、全部并列"""
        self.assertEqual(roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]), 1.0)
        self.assertEqual(roc_auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]), 0.0)
        self.assertEqual(roc_auc([0.5, 0.5, 0.5, 0.5], [0, 1, 0, 1]), 0.5)

    def test_03_auc_single_class(self):
        """单一类别报错"""
        with self.assertRaises(NumericError):
            roc_auc([0.1, 0.2], [1, 1])
        with self.assertRaises(NumericError):
            roc_auc([0.1, 0.2], [0, 0])

    def test_04_auc_matches_brute_force(self):
        """随机带并列分数与两两比较结果一致"""
        rng = np.random.default_rng(3)
        for _ in range(100):
            n = int(rng.integers(4, 51))
            scores = rng.integers(0, 6, size=n).astype(float)
            labels = rng.integers(0, 2, size=n)
            labels[0], labels[1] = 0, 1
            self.assertAlmostEqual(roc_auc(scores, labels), brute_force_auc(scores, labels),
                                   places=12, msg="AUC 与暴力计算不一致")

    def test_05_auc_invariant_to_monotone_transform(self):
        """严格单调变换不改变 AUC"""
        rng = np.random.default_rng(5)
        scores = rng.normal(size=50)
        labels = rng.integers(0, 2, size=50)
        labels[:2] = [0, 1]
        self.assertAlmostEqual(roc_auc(scores, labels), roc_auc(np.exp(3 * scores) + 7, labels),
                               places=12)

    def test_06_recall_at_k(self):
        """排名 ≤ K 的比例"""
        self.assertAlmostEqual(recall_at_k([1, 2, 11, 30], 10), 0.5)
        self.assertAlmostEqual(recall_at_k([1, 1, 1], 1), 1.0)
        with self.assertRaises(InputFormatError):
            recall_at_k([], 5)

    def test_07_bootstrap_deterministic(self):
        """同种子结果逐位一致, 与线程数无关"""
        rng = np.random.default_rng(0)
        preds = rng.normal(50, 10, size=100)
        truths = preds + rng.normal(0, 5, size=100)
        first = bootstrap_ci(mae, (preds, truths), n_boot=200, seed=42)
        second = bootstrap_ci(mae, (preds, truths), n_boot=200, seed=42)
        threaded = bootstrap_ci(mae, (preds, truths), n_boot=200, seed=42, n_jobs=4)
        self.assertEqual(first, second, "同种子结果应一致")
        self.assertEqual(first, threaded, "线程数不应影响结果")
        self.assertLessEqual(first.ci_low, first.value)
        self.assertGreaterEqual(first.ci_high, first.value)

    def test_08_bootstrap_seed_matters(self):
        """不同种子的区间不同"""
        rng = np.random.default_rng(1)
        preds = rng.normal(size=60)
        truths = rng.normal(size=60)
        a = bootstrap_ci(mae, (preds, truths), n_boot=100, seed=1)
        b = bootstrap_ci(mae, (preds, truths), n_boot=100, seed=2)
        self.assertEqual(a.value, b.value)
        self.assertNotEqual((a.ci_low, a.ci_high), (b.ci_low, b.ci_high))

    def test_09_bootstrap_redraws_degenerate_auc(self):
        """单类别重采样被重抽, 记录重抽次数"""
        scores = np.array([0.1, 0.2, 0.3, 0.9])
        labels = np.array([0, 0, 0, 1])
        estimate = bootstrap_ci(roc_auc, (scores, labels), n_boot=200, seed=0)
        self.assertEqual(estimate.value, 1.0)
        self.assertGreater(estimate.redraws, 0, "少数类样本应触发重抽")

    def test_10_bootstrap_grouped(self):
        """按患者分组重采样"""
        preds = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
        truths = np.zeros(6)
        groups = ["a", "a", "b", "b", "c", "c"]
        estimate = bootstrap_ci(mae, (preds, truths), n_boot=100, seed=0, groups=groups)
        self.assertAlmostEqual(estimate.value, 3.5)
        self.assertGreaterEqual(estimate.ci_low, 1.5)
        self.assertLessEqual(estimate.ci_high, 5.5)
        with self.assertRaises(InputFormatError):
            bootstrap_ci(mae, (preds, truths), groups=["a"])

    def test_11_bootstrap_rejects_small_input(self):
        """样本不足或次数非法"""
        with self.assertRaises(InputFormatError):
            bootstrap_ci(mae, ([1.0], [1.0]))
        with self.assertRaises(InputFormatError):
            bootstrap_ci(mae, ([1.0, 2.0], [1.0, 2.0]), n_boot=0)

    def test_12_eval_report_json(self):
        """评估报告写出 JSON"""
        report = EvalReport(task="lvef", n=3)
        report.add_estimate("mae", MetricEstimate(4.0, 3.0, 5.0, 10, 0))
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "report.json")
            report.save(path)
            with open(path, "r", encoding="utf-8") as f:
                loaded = json.load(f)
        self.assertEqual(loaded["task"], "lvef")
        self.assertEqual(loaded["metrics"]["mae"]["ci_high"], 5.0)

    def test_13_bootstrap_independent_reimplementation(self):
        """与使用同一随机流的独立实现一致"""
        rng = np.random.default_rng(9)
        truths = rng.uniform(20, 70, size=50)
        preds = truths + rng.normal(0, 6, size=50)
        estimate = bootstrap_ci(mae, (preds, truths), n_boot=300, seed=17)
        values = []
        for b in range(300):
            idx = np.random.default_rng([17, b]).integers(0, 50, size=50)
            values.append(np.mean(np.abs(preds[idx] - truths[idx])))
        low, high = np.percentile(values, [2.5, 97.5])
        self.assertAlmostEqual(estimate.ci_low, low, places=12)
        self.assertAlmostEqual(estimate.ci_high, high, places=12)
        self.assertLess(estimate.ci_low, estimate.value)
        self.assertGreater(estimate.ci_high, estimate.value)

    def test_14_constant_metric_and_symmetries(self):
        """常数样本区间退化, AUC 标签翻转, MAE 平移不变"""
        constant = bootstrap_ci(mae, ([3.0] * 10, [1.0] * 10), n_boot=50, seed=0)
        self.assertEqual((constant.ci_low, constant.value, constant.ci_high), (2.0, 2.0, 2.0))
        rng = np.random.default_rng(11)
        scores = rng.normal(size=30)
        labels = rng.integers(0, 2, size=30)
        labels[:2] = [0, 1]
        self.assertAlmostEqual(roc_auc(scores, labels), 1.0 - roc_auc(scores, 1 - labels),
                               places=12)
        preds, truths = rng.normal(size=20), rng.normal(size=20)
        self.assertAlmostEqual(mae(preds, truths), mae(preds + 7.5, truths + 7.5), places=12)


if __name__ == "__main__":
    unittest.main(verbosity=2)
