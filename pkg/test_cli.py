#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
命令行测试: 各子命令的输出文件、退出码与失败时的部分输出清理
"""

import os
import sys
import json
import shutil
import tempfile
import unittest
from datetime import date
from pathlib import Path

import numpy as np
import pandas as pd

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from src.cli import main
from src.modules.embedding_store import EmbeddingRecord, write_blob


def files_in(directory):
    return sorted(str(p.relative_to(directory)) for p in Path(directory).rglob("*") if p.is_file())


class TestCli(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.mkdtemp(prefix="cardiolens_cli_")
        cls.corpus = os.path.join(cls.tmp, "corpus")
        cls.run_dir = os.path.join(cls.tmp, "run")
        assert main(["gen", "--out", cls.corpus, "--patients", "20", "--studies", "2",
                     "--seed", "3"]) == 0
        assert main(["train", cls.corpus, "--out", cls.run_dir, "--epochs", "2", "--batch-size", "8",
                     "--warmup-steps", "2", "--d", "8", "--seed", "3"]) == 0

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.tmp, ignore_errors=True)

    def out_dir(self, name):
        return os.path.join(self.tmp, name)

    def test_01_gen_outputs(self):
        """gen 写出特征、报告与运行清单"""
        produced = files_in(self.corpus)
        for name in ("features.jsonl", "features.emb1", "reports.jsonl", "run_manifest.json"):
            self.assertIn(name, produced)
        with open(os.path.join(self.corpus, "run_manifest.json"), "r", encoding="utf-8") as f:
            manifest = json.load(f)
        self.assertEqual(manifest["command"], "gen")
        self.assertEqual(manifest["seed"], 3)

    def test_02_train_outputs(self):
        """train 写出检查点、训练历史和按患者划分"""
        produced = files_in(self.run_dir)
        for name in ("checkpoint/header.json", "checkpoint/w_img.emb1", "checkpoint/w_txt.emb1",
                     "history.csv", "val_history.csv", "split.json", "run_manifest.json"):
            self.assertIn(name, produced)
        self.assertEqual(len(pd.read_csv(os.path.join(self.run_dir, "history.csv"))), 2)
        self.assertEqual(list(pd.read_csv(os.path.join(self.run_dir, "val_history.csv"))["epoch"]),
                         [0, 1, 2])
        with open(os.path.join(self.run_dir, "split.json"), "r", encoding="utf-8") as f:
            split = json.load(f)
        self.assertFalse(set(split["train"]) & set(split["val"]))

    def test_03_train_zero_lr_warns(self):
        """--lr-max 0 输出警告但正常完成"""
        with self.assertLogs("cardiolens", level="WARNING") as logs:
            code = main(["train", self.corpus, "--out", self.out_dir("zero_lr"), "--epochs", "1",
                         "--batch-size", "8", "--warmup-steps", "0", "--d", "4", "--lr-max", "0"])
        self.assertEqual(code, 0)
        self.assertTrue(any("lr_max" in line for line in logs.output))

    def test_04_train_usage_error(self):
        """预热步数超过总步数: 退出码 1, 不留下输出"""
        out = self.out_dir("bad_train")
        code = main(["train", self.corpus, "--out", out, "--epochs", "1", "--batch-size", "8",
                     "--warmup-steps", "500"])
        self.assertEqual(code, 1)
        self.assertEqual(files_in(out), [])
        self.assertEqual(main(["train", os.path.join(self.tmp, "nowhere"), "--out", out]), 1)
        self.assertEqual(main(["train", "--bogus-option"]), 1)

    def test_05_tokenize(self):
        """tokenize 输出 token 序列与压缩统计"""
        reports = os.path.join(self.tmp, "reports.txt")
        with open(reports, "w", encoding="utf-8") as f:
            f.write("moderate left ventricular hypertrophy. "
                    "left ventricular ejection fraction is 60%\n")
            f.write("severe aortic stenosis. peak aortic valve velocity is 4.5 m/s\n")
            f.write("no pericardial effusion\n")
        out = self.out_dir("tokens")
        self.assertEqual(main(["tokenize", reports, "--out", out, "--stats",
                               "--bpe-merges", "20"]), 0)
        with open(os.path.join(out, "tokens.jsonl"), "r", encoding="utf-8") as f:
            rows = [json.loads(line) for line in f]
        self.assertEqual([row["index"] for row in rows], [0, 1, 2])
        self.assertEqual(rows[0]["ids"][0], 2)
        self.assertEqual(rows[0]["ids"][-1], 3)
        with open(os.path.join(out, "stats.json"), "r", encoding="utf-8") as f:
            stats = json.load(f)
        self.assertIn("compression_ratio_vs_reference", stats)
        self.assertIn("bpe_vocab.json", files_in(out))

    def test_06_tokenize_errors(self):
        """空语料退出码 2, 缺失文件退出码 1"""
        empty = os.path.join(self.tmp, "empty.txt")
        open(empty, "w", encoding="utf-8").close()
        out = self.out_dir("tokens_empty")
        with self.assertLogs("cardiolens", level="ERROR") as logs:
            self.assertEqual(main(["tokenize", empty, "--out", out, "--stats"]), 2)
        self.assertTrue(any("empty corpus" in line for line in logs.output))
        self.assertEqual(files_in(out), [])
        self.assertEqual(main(["tokenize", os.path.join(self.tmp, "missing.txt"),
                               "--out", out]), 1)

    def test_07_encode_retrieval_cohort(self):
        """encode → retrieval → cohort 流水线"""
        emb = self.out_dir("emb")
        self.assertEqual(main(["encode", self.corpus, "--out", emb,
                               "--checkpoint", os.path.join(self.run_dir, "checkpoint"),
                               "--split-file", os.path.join(self.run_dir, "split.json"),
                               "--subset", "val"]), 0)
        manifest = os.path.join(emb, "embeddings.jsonl")
        blob = os.path.join(emb, "embeddings.emb1")
        self.assertTrue(os.path.exists(blob))

        ret = self.out_dir("retrieval")
        self.assertEqual(main(["retrieval", manifest, blob, "--out", ret, "--k", "1,5"]), 0)
        with open(os.path.join(ret, "retrieval_image_to_text.json"), "r", encoding="utf-8") as f:
            report = json.load(f)
        self.assertEqual(report["direction"], "image_to_text")
        self.assertGreaterEqual(report["mcmrr"], 1.0)
        self.assertEqual(len(pd.read_csv(os.path.join(ret, "ranks.csv"))), report["n"])

        cohort = self.out_dir("cohort")
        self.assertEqual(main(["cohort", manifest, blob, "--out", cohort, "--n-pairs", "50",
                               "--n-boot", "20"]), 0)
        with open(os.path.join(cohort, "cohort.json"), "r", encoding="utf-8") as f:
            metrics = json.load(f)["metrics"]
        self.assertIn("same_patient_auc", metrics)
        self.assertIn("mean_similarity_same_study", metrics)

    def test_08_cohort_timelines(self):
        """带事件表的 cohort 输出时间线与术前/术后 AUC"""
        corpus = self.out_dir("event_corpus")
        self.assertEqual(main(["gen", "--out", corpus, "--patients", "8", "--studies", "4",
                               "--event-fraction", "1.0", "--seed", "5"]), 0)
        self.assertIn("events.csv", files_in(corpus))
        emb = self.out_dir("event_emb")
        self.assertEqual(main(["encode", corpus, "--out", emb, "--random-init"]), 0)
        out = self.out_dir("event_cohort")
        self.assertEqual(main(["cohort", os.path.join(emb, "embeddings.jsonl"),
                               os.path.join(emb, "embeddings.emb1"), "--out", out,
                               "--events", os.path.join(corpus, "events.csv"),
                               "--window-days", "400", "--n-pairs", "30", "--n-boot", "20"]), 0)
        self.assertIn("timelines.csv", files_in(out))
        with open(os.path.join(out, "cohort.json"), "r", encoding="utf-8") as f:
            self.assertIn("pre_post_auc", json.load(f)["metrics"])

    def test_09_partial_outputs_removed(self):
        """写出部分文件后失败: 退出码 2, 新文件全部删除"""
        emb = self.out_dir("emb_partial")
        self.assertEqual(main(["encode", self.corpus, "--out", emb, "--random-init"]), 0)
        bad_events = os.path.join(self.tmp, "bad_events.csv")
        with open(bad_events, "w", encoding="utf-8") as f:
            f.write("foo,bar\n1,2\n")
        out = self.out_dir("cohort_partial")
        code = main(["cohort", os.path.join(emb, "embeddings.jsonl"),
                     os.path.join(emb, "embeddings.emb1"), "--out", out,
                     "--events", bad_events, "--n-pairs", "20", "--n-boot", "10"])
        self.assertEqual(code, 2)
        self.assertEqual(files_in(out), [])

    def test_10_zeroshot(self):
        """零样本回归与分类输出预测表和带置信区间的报告"""
        out = self.out_dir("zs_lvef")
        self.assertEqual(main(["zeroshot", "lvef", "--corpus", self.corpus, "--out", out,
                               "--checkpoint", os.path.join(self.run_dir, "checkpoint"),
                               "--n-boot", "20"]), 0)
        table = pd.read_csv(os.path.join(out, "predictions.csv"))
        self.assertEqual(len(table), 40)
        self.assertTrue(((table["prediction"] >= 0) & (table["prediction"] <= 100)).all())
        with open(os.path.join(out, "zeroshot.json"), "r", encoding="utf-8") as f:
            report = json.load(f)
        self.assertEqual(report["task"], "lvef")
        mae_entry = report["metrics"]["mae"]
        self.assertLessEqual(mae_entry["ci_low"], mae_entry["value"])
        self.assertEqual(main(["zeroshot", "lvef", "--corpus", self.corpus,
                               "--out", self.out_dir("zs_none")]), 1)
        self.assertEqual(main(["zeroshot", "no_such_task", "--corpus", self.corpus,
                               "--out", self.out_dir("zs_bad"), "--random-init"]), 1)

    def test_11_import(self):
        """import: 非单位向量被归一化; 零向量退出码 3; 损坏的 blob 退出码 2"""
        manifest = os.path.join(self.tmp, "ext.jsonl")
        records = [
            EmbeddingRecord(id=f"x{i}", kind="image", patient_id="P1", study_id="S1",
                            report_id="R1", acquired=date(2020, 1, 1), frame_index=i,
                            embedding=np.zeros(3, dtype=np.float32))
            for i in range(2)
        ]
        with open(manifest, "w", encoding="utf-8") as f:
            for record in records:
                f.write(json.dumps(record.manifest_line()) + "\n")

        good_blob = os.path.join(self.tmp, "ext_good.emb1")
        with open(good_blob, "wb") as f:
            f.write(write_blob(np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 1.0]])))
        out = self.out_dir("imported")
        self.assertEqual(main(["import", manifest, good_blob, "--out", out]), 0)
        with open(os.path.join(out, "import_report.json"), "r", encoding="utf-8") as f:
            report = json.load(f)
        self.assertEqual(report["renormalized"], ["x0"])
        self.assertEqual(report["dimension"], 3)

        zero_blob = os.path.join(self.tmp, "ext_zero.emb1")
        with open(zero_blob, "wb") as f:
            f.write(write_blob(np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0]])))
        self.assertEqual(main(["import", manifest, zero_blob, "--out",
                               self.out_dir("imported_zero")]), 3)

        broken_blob = os.path.join(self.tmp, "ext_broken.emb1")
        with open(broken_blob, "wb") as f:
            f.write(b"NOPE")
        self.assertEqual(main(["import", manifest, broken_blob, "--out",
                               self.out_dir("imported_broken")]), 2)

    def test_12_train_non_finite_exit_3(self):
        """参数发散: 退出码 3, 但保留此前最佳检查点与运行清单"""
        out = self.out_dir("diverged")
        code = main(["train", self.corpus, "--out", out, "--epochs", "2", "--batch-size", "8",
                     "--warmup-steps", "0", "--d", "4", "--lr-max", "inf"])
        self.assertEqual(code, 3)
        produced = files_in(out)
        for name in ("checkpoint/header.json", "checkpoint/w_img.emb1", "checkpoint/w_txt.emb1",
                     "split.json", "run_manifest.json"):
            self.assertIn(name, produced)
        with open(os.path.join(out, "checkpoint", "header.json"), "r", encoding="utf-8") as f:
            self.assertEqual(json.load(f)["epoch"], 0)
        with open(os.path.join(out, "run_manifest.json"), "r", encoding="utf-8") as f:
            self.assertTrue(json.load(f)["config"]["params"]["aborted"])

    def _write_config(self, name, payload):
        path = os.path.join(self.tmp, name)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f)
        return path

    def _manifest_params(self, out):
        with open(os.path.join(out, "run_manifest.json"), "r", encoding="utf-8") as f:
            manifest = json.load(f)
        return manifest["seed"], manifest["config"]["params"]

    def test_13_config_files(self):
        """各子命令从 JSON 配置文件读取参数, 命令行参数优先"""
        corpus = self.out_dir("cfg_corpus")
        gen_cfg = self._write_config("gen.json", {"patients": 6, "studies": 2, "seed": 4,
                                                  "noise": 0.3})
        self.assertEqual(main(["gen", "--out", corpus, "--config", gen_cfg, "--studies", "3"]), 0)
        with open(os.path.join(corpus, "reports.jsonl"), "r", encoding="utf-8") as f:
            self.assertEqual(sum(1 for line in f if line.strip()), 18)
        seed, params = self._manifest_params(corpus)
        self.assertEqual((seed, params["studies"], params["noise"]), (4, 3, 0.3))

        emb = self.out_dir("cfg_emb")
        enc_cfg = self._write_config("encode.json", {"random_init": True, "featurizer": "slot"})
        self.assertEqual(main(["encode", corpus, "--out", emb, "--config", enc_cfg]), 0)
        self.assertEqual(self._manifest_params(emb)[1]["featurizer"], "slot")
        manifest = os.path.join(emb, "embeddings.jsonl")
        blob = os.path.join(emb, "embeddings.emb1")

        ret = self.out_dir("cfg_retrieval")
        ret_cfg = self._write_config("retrieval.json", {"ks": "1,2", "image_mode": "mean_pool"})
        self.assertEqual(main(["retrieval", manifest, blob, "--out", ret, "--config", ret_cfg]), 0)
        params = self._manifest_params(ret)[1]
        self.assertEqual((params["ks"], params["image_mode"]), ("1,2", "mean_pool"))

        cohort = self.out_dir("cfg_cohort")
        cohort_cfg = self._write_config("cohort.json", {"n_pairs": 10, "n_boot": 5, "seed": 2})
        self.assertEqual(main(["cohort", manifest, blob, "--out", cohort, "--config", cohort_cfg,
                               "--seed", "3"]), 0)
        seed, params = self._manifest_params(cohort)
        self.assertEqual((seed, params["n_pairs"], params["n_boot"]), (3, 10, 5))

        zs = self.out_dir("cfg_zeroshot")
        zs_cfg = self._write_config("zeroshot.json", {
            "checkpoint": os.path.join(self.run_dir, "checkpoint"), "n_boot": 7, "subset": "val",
            "split_file": os.path.join(self.run_dir, "split.json"),
        })
        self.assertEqual(main(["zeroshot", "lvef", "--corpus", self.corpus, "--out", zs,
                               "--config", zs_cfg]), 0)
        params = self._manifest_params(zs)[1]
        self.assertEqual((params["n_boot"], params["subset"], params["featurizer"]),
                         (7, "val", "bag"))

        bad_cfg = self._write_config("bad.json", {"patient": 6})
        bad_out = self.out_dir("cfg_bad")
        self.assertEqual(main(["gen", "--out", bad_out, "--config", bad_cfg]), 1)
        self.assertEqual(files_in(bad_out), [])
        self.assertEqual(main(["cohort", manifest, blob, "--out", self.out_dir("cfg_bad_cohort"),
                               "--n-pairs", "0"]), 1)

    def test_14_featurizer_option(self):
        """--featurizer: 随机初始化时选择文本特征; 与检查点不一致时报用法错误"""
        checkpoint = os.path.join(self.run_dir, "checkpoint")
        with open(os.path.join(checkpoint, "header.json"), "r", encoding="utf-8") as f:
            self.assertEqual(json.load(f)["featurizer"], "bag")
        self.assertEqual(main(["encode", self.corpus, "--out", self.out_dir("feat_conflict"),
                               "--checkpoint", checkpoint, "--featurizer", "slot"]), 1)
        out = self.out_dir("feat_zs")
        self.assertEqual(main(["zeroshot", "lvef", "--corpus", self.corpus, "--out", out,
                               "--random-init", "--featurizer", "slot", "--n-boot", "5"]), 0)
        self.assertEqual(self._manifest_params(out)[1]["featurizer"], "slot")


if __name__ == "__main__":
    unittest.main(verbosity=2)
