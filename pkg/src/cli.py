#!/usr/bin/env python
# -*- coding: utf-8 -*-

"""
cardiolens 命令行入口

退出码: 0 成功, 1 用法错误, 2 输入格式错误, 3 数值失败
"""

import os
import json
import logging
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, List, Optional

import click
import numpy as np
import pandas as pd
import typer

from src.core.config import (CohortOptions, EncodeOptions, GenOptions, RetrievalOptions, RunConfig,
                             TokenizeOptions, ZeroshotOptions, build_options, build_train_config,
                             load_json_config, threads_from_env)
from src.core.errors import CardioLensError, InputFormatError, NumericError, UsageError
from src.core.logging_utils import setup_logging
from src.modules.cohort_analysis import (build_timelines, load_events, pre_post_auc,
                                         relation_summary, same_patient_auc, sample_pairs,
                                         timelines_to_frame)
from src.modules.embedding_store import load_store, save_store
from src.modules.metrics import EvalReport, bootstrap_ci, mae, roc_auc
from src.modules.report_tokenizer import (BpeTokenizer, BpeVocab, TemplateTokenizer,
                                          corpus_stats, load_starter_vocab, load_vocab_file,
                                          normalize_text, train_bpe)
from src.modules.retrieval_eval import retrieval_from_store, to_eval_report
from src.modules.synth_corpus import (SynthConfig, export_corpus, generate_corpus, load_corpus,
                                      split_by_patient, task_truth)
from src.modules.toy_dual_encoder import (Checkpoint, build_training_pairs, encode_corpus,
                                          encode_frames, init_params, make_featurizer,
                                          text_encoder, train)
from src.modules.zeroshot_engine import classify_videos, load_prompt_set, regress_videos

logger = logging.getLogger("cardiolens")

app = typer.Typer(
    name="cardiolens",
    help="超声心动图图文嵌入工具包: 分词、合成语料、玩具双塔训练与评估",
    add_completion=False,
    no_args_is_help=True,
)


@app.callback()
def _global_options(
    verbose: bool = typer.Option(False, "--verbose", "-v", help="输出 DEBUG 日志"),
    log_file: Optional[str] = typer.Option(None, "--log-file", help="同时写入日志文件"),
):
    setup_logging(verbose=verbose, log_file=log_file)


@contextmanager
def tracked_outputs(out_dir: str):
    """记录本次运行新建的文件, 失败时删除"""
    os.makedirs(out_dir, exist_ok=True)
    before = {str(p) for p in Path(out_dir).rglob("*")}
    try:
        yield Path(out_dir)
    except BaseException:
        created = sorted((p for p in Path(out_dir).rglob("*") if str(p) not in before),
                         key=lambda p: len(p.parts), reverse=True)
        for path in created:
            if path.is_dir():
                path.rmdir()
            else:
                path.unlink()
        if created:
            logger.warning(f"运行失败, 已删除 {len(created)} 个部分输出")
        raise


def _write_manifest(command: str, seed: int, out: Path, paths: Dict[str, str],
                    params: Dict) -> None:
    RunConfig(command=command, seed=seed, output_dir=out, paths=paths,
              params=params).write_manifest()


def _read_reports(path: str) -> List[str]:
    if not os.path.exists(path):
        raise UsageError(f"输入文件不存在: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = [line for line in f.read().splitlines() if line.strip()]
    if not path.endswith(".jsonl"):
        return lines
    texts = []
    for line_no, line in enumerate(lines, start=1):
        try:
            texts.append(json.loads(line)["text"])
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise InputFormatError(f"{path} 第 {line_no} 行缺少 text 字段: {e}") from e
    return texts


def _load_vocab(vocab: Optional[str]):
    return load_vocab_file(vocab) if vocab else load_starter_vocab()


def _parse_ks(ks: str) -> List[int]:
    try:
        values = sorted({int(k) for k in ks.split(",") if k.strip()})
    except ValueError as e:
        raise UsageError(f"K 列表格式错误: {ks!r}") from e
    if not values:
        raise UsageError("K 列表为空")
    return values

CONFIG_HELP = "JSON 配置文件, 命令行参数优先"
RANDOM_INIT_DIM = 32


@app.command("tokenize")
def cmd_tokenize(
    input_path: str = typer.Argument(..., help="报告文件: 每行一份报告, 或含 text 字段的 JSONL"),
    out: str = typer.Option(..., "--out", "-o", help="输出目录"),
    config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
    vocab: Optional[str] = typer.Option(None, "--vocab", help="模板词表 JSON, 默认入门词表"),
    tokenizer: Optional[str] = typer.Option(None, "--tokenizer",
                                            click_type=click.Choice(["template", "bpe"])),
    stats: bool = typer.Option(False, "--stats", help="输出两种分词器的长度统计与压缩比"),
    bpe_vocab: Optional[str] = typer.Option(None, "--bpe-vocab", help="已训练的 BPE 词表"),
    bpe_merges: Optional[int] = typer.Option(None, "--bpe-merges", help="默认 1000"),
    context_length: Optional[int] = typer.Option(None, "--context-length", help="默认 77"),
    seed: Optional[int] = typer.Option(None, "--seed"),
):
    """分词, 可选输出 corpus_stats 对比"""
    with tracked_outputs(out) as out_dir:
        options = build_options(TokenizeOptions, config, {
            "vocab": vocab, "tokenizer": tokenizer, "stats": stats, "bpe_vocab": bpe_vocab,
            "bpe_merges": bpe_merges, "context_length": context_length, "seed": seed,
        })
        texts = _read_reports(input_path)
        template = TemplateTokenizer(_load_vocab(options.vocab), options.context_length)
        bpe = None
        if options.tokenizer == "bpe" or options.stats:
            if options.bpe_vocab:
                with open(options.bpe_vocab, "r", encoding="utf-8") as f:
                    bpe_model = BpeVocab.from_json(f.read())
            else:
                if not texts:
                    raise InputFormatError("empty corpus")
                bpe_model = train_bpe([normalize_text(t) for t in texts], options.bpe_merges)
                with open(out_dir / "bpe_vocab.json", "w", encoding="utf-8") as f:
                    f.write(bpe_model.to_json())
            bpe = BpeTokenizer(bpe_model, options.context_length)

        active = template if options.tokenizer == "template" else bpe
        with open(out_dir / "tokens.jsonl", "w", encoding="utf-8") as f:
            for index, text in enumerate(texts):
                seq = active.encode(text)
                f.write(json.dumps({"index": index, "ids": seq.ids, "truncated": seq.truncated,
                                    "unmatched": seq.unmatched}) + "\n")
        logger.info(f"已分词 {len(texts)} 份报告 ({options.tokenizer})")

        if options.stats:
            stats_tokenizer = TemplateTokenizer(template.vocab, options.context_length)
            summary = corpus_stats(texts, stats_tokenizer, reference=bpe)
            summary["coverage"] = stats_tokenizer.coverage_report()
            with open(out_dir / "stats.json", "w", encoding="utf-8") as f:
                json.dump(summary, f, indent=2, sort_keys=True)
            logger.info(
                f"模板平均 {summary['mean_tokens']:.1f} token, BPE 平均 "
                f"{summary['reference_mean_tokens']:.1f} token, 压缩比 "
                f"{summary['compression_ratio_vs_reference']}"
            )
        _write_manifest("tokenize", options.seed, out_dir, {"input": input_path},
                        options.model_dump())


@app.command("gen")
def cmd_gen(
    out: str = typer.Option(..., "--out", "-o"),
    config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
    patients: Optional[int] = typer.Option(None, "--patients", help="默认 200"),
    studies: Optional[int] = typer.Option(None, "--studies", help="每位患者的检查数, 默认 4"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    noise: Optional[float] = typer.Option(None, "--noise", help="帧噪声范数, 默认 0.5"),
    event_fraction: Optional[float] = typer.Option(None, "--event-fraction"),
    geometry_seed: Optional[int] = typer.Option(None, "--geometry-seed"),
):
    """生成合成语料 (帧特征 + 报告)"""
    with tracked_outputs(out) as out_dir:
        options = build_options(GenOptions, config, {
            "patients": patients, "studies": studies, "seed": seed, "noise": noise,
            "event_fraction": event_fraction, "geometry_seed": geometry_seed,
        })
        synth = SynthConfig(event_fraction=options.event_fraction,
                            geometry_seed=options.geometry_seed)
        corpus = generate_corpus(options.patients, options.studies, options.seed,
                                 options.noise, synth)
        export_corpus(corpus, str(out_dir))
        events = sorted({(s.patient_id, s.event_date.isoformat())
                         for s in corpus if s.event_date is not None})
        if events:
            pd.DataFrame(events, columns=["patient_id", "event_date"]).to_csv(
                out_dir / "events.csv", index=False)
            logger.info(f"{len(events)} 位患者带有手术事件")
        _write_manifest("gen", options.seed, out_dir, {}, options.model_dump())


@app.command("train")
def cmd_train(
    corpus: str = typer.Argument(..., help="gen 输出目录"),
    out: str = typer.Option(..., "--out", "-o"),
    config: Optional[str] = typer.Option(None, "--config", help="JSON 训练配置, 命令行参数优先"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    epochs: Optional[int] = typer.Option(None, "--epochs"),
    lr_max: Optional[float] = typer.Option(None, "--lr-max"),
    batch_size: Optional[int] = typer.Option(None, "--batch-size"),
    warmup_steps: Optional[int] = typer.Option(None, "--warmup-steps"),
    d: Optional[int] = typer.Option(None, "--d", help="共享嵌入维度"),
    val_every: Optional[int] = typer.Option(None, "--val-every"),
    val_fraction: float = typer.Option(0.2, "--val-fraction", min=0.05, max=0.9),
    featurizer: str = typer.Option("bag", "--featurizer", click_type=click.Choice(["bag", "slot"]),
                                   help="文本特征: bag 为 token 计数, slot 为槽位+数值群体编码"),
    vocab: Optional[str] = typer.Option(None, "--vocab"),
    progress: bool = typer.Option(False, "--progress", help="显示 tqdm 进度条"),
):
    """训练玩具双塔编码器, 保存验证 MCMRR 最低的检查点

    损失或参数出现非有限值时仍写出此前最佳检查点, 退出码 3。
    """
    with tracked_outputs(out) as out_dir:
        train_config = build_train_config(load_json_config(config), {
            "seed": seed, "epochs": epochs, "lr_max": lr_max, "batch_size": batch_size,
            "warmup_steps": warmup_steps, "d": d, "val_every": val_every,
        })
        if train_config.lr_max == 0:
            logger.warning("lr_max 为 0, 参数不会更新")
        studies = load_corpus(corpus)
        train_studies, val_studies = split_by_patient(studies, val_fraction, train_config.seed)
        template_vocab = _load_vocab(vocab)
        features = make_featurizer(featurizer, template_vocab)
        tokenizer = TemplateTokenizer(template_vocab)
        result = train(build_training_pairs(train_studies, features, tokenizer),
                       build_training_pairs(val_studies, features, tokenizer),
                       train_config, featurizer=featurizer, show_progress=progress)
        result.best.save(str(out_dir / "checkpoint"))
        pd.DataFrame(result.history).to_csv(out_dir / "history.csv", index=False)
        pd.DataFrame(result.val_history, columns=["epoch", "val_mcmrr"]).to_csv(
            out_dir / "val_history.csv", index=False)
        with open(out_dir / "split.json", "w", encoding="utf-8") as f:
            json.dump({"train": sorted({s.patient_id for s in train_studies}),
                       "val": sorted({s.patient_id for s in val_studies})}, f, indent=2)
        _write_manifest("train", train_config.seed, out_dir, {"corpus": corpus},
                        {**train_config.model_dump(), "featurizer": featurizer,
                         "val_fraction": val_fraction, "aborted": result.aborted})
    if result.aborted:
        raise NumericError(
            f"训练因非有限值中止, 已保存 epoch {result.best.epoch} 的检查点到 {out}"
        )


def _select_studies(corpus: str, split_file: Optional[str], subset: str):
    studies = load_corpus(corpus)
    if subset == "all":
        return studies
    if not split_file:
        raise UsageError(f"--subset {subset} 需要 --split-file")
    try:
        with open(split_file, "r", encoding="utf-8") as f:
            patients = set(json.load(f)[subset])
    except (OSError, json.JSONDecodeError, KeyError) as e:
        raise UsageError(f"无法读取划分文件 {split_file}: {e}") from e
    selected = [s for s in studies if s.patient_id in patients]
    if not selected:
        raise InputFormatError(f"划分 {subset} 中没有检查")
    return selected


def _load_encoder(options: EncodeOptions, d_img: int, vocab):
    if options.checkpoint:
        params = Checkpoint.load(options.checkpoint).params
        if options.featurizer and options.featurizer != params.featurizer:
            raise UsageError(
                f"--featurizer {options.featurizer} 与检查点的文本特征 {params.featurizer} 不一致"
            )
    elif options.random_init:
        name = options.featurizer or "bag"
        params = init_params(d_img, make_featurizer(name, vocab).dim, RANDOM_INIT_DIM,
                             options.seed, featurizer=name)
        logger.info(f"使用随机初始化编码器 (对照基线, 文本特征 {name})")
    else:
        raise UsageError("需要 --checkpoint 或 --random-init")
    features = make_featurizer(params.featurizer, vocab)
    if features.dim != params.d_txt:
        raise InputFormatError(f"词表特征维度 {features.dim} 与检查点 d_txt {params.d_txt} 不一致")
    return params, features


@app.command("encode")
def cmd_encode(
    corpus: str = typer.Argument(...),
    out: str = typer.Option(..., "--out", "-o"),
    config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
    checkpoint: Optional[str] = typer.Option(None, "--checkpoint"),
    random_init: bool = typer.Option(False, "--random-init"),
    featurizer: Optional[str] = typer.Option(None, "--featurizer",
                                             click_type=click.Choice(["bag", "slot"]),
                                             help="随机初始化时的文本特征, 默认 bag"),
    split_file: Optional[str] = typer.Option(None, "--split-file"),
    subset: Optional[str] = typer.Option(None, "--subset",
                                         click_type=click.Choice(["all", "train", "val"])),
    seed: Optional[int] = typer.Option(None, "--seed"),
    vocab: Optional[str] = typer.Option(None, "--vocab"),
):
    """用编码器把语料编码为嵌入存储 (清单 + EMB1)"""
    with tracked_outputs(out) as out_dir:
        options = build_options(EncodeOptions, config, {
            "checkpoint": checkpoint, "random_init": random_init, "featurizer": featurizer,
            "split_file": split_file, "subset": subset, "seed": seed, "vocab": vocab,
        })
        studies = _select_studies(corpus, options.split_file, options.subset)
        template_vocab = _load_vocab(options.vocab)
        params, features = _load_encoder(options, studies[0].frames.shape[1], template_vocab)
        store = encode_corpus(studies, params, features, TemplateTokenizer(template_vocab))
        save_store(store, str(out_dir / "embeddings.jsonl"), str(out_dir / "embeddings.emb1"))
        _write_manifest("encode", options.seed, out_dir, {"corpus": corpus},
                        {**options.model_dump(), "featurizer": params.featurizer})


@app.command("import")
def cmd_import(
    manifest: str = typer.Argument(..., help="JSONL 清单"),
    blob: str = typer.Argument(..., help="EMB1 二进制"),
    out: str = typer.Option(..., "--out", "-o"),
):
    """导入外部嵌入: 校验, 必要时归一化, 写出规范化的存储"""
    with tracked_outputs(out) as out_dir:
        store, report = load_store(manifest, blob)
        save_store(store, str(out_dir / "embeddings.jsonl"), str(out_dir / "embeddings.emb1"))
        with open(out_dir / "import_report.json", "w", encoding="utf-8") as f:
            json.dump({"count": report.count, "dimension": report.dimension,
                       "renormalized": report.renormalized}, f, indent=2, sort_keys=True)
        _write_manifest("import", 0, out_dir, {"manifest": manifest, "blob": blob}, {})


@app.command("zeroshot")
def cmd_zeroshot(
    task: str = typer.Argument(..., help="内置任务名或提示集 JSON 路径"),
    corpus: str = typer.Option(..., "--corpus"),
    out: str = typer.Option(..., "--out", "-o"),
    config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
    checkpoint: Optional[str] = typer.Option(None, "--checkpoint"),
    random_init: bool = typer.Option(False, "--random-init"),
    featurizer: Optional[str] = typer.Option(None, "--featurizer",
                                             click_type=click.Choice(["bag", "slot"]),
                                             help="随机初始化时的文本特征, 默认 bag"),
    split_file: Optional[str] = typer.Option(None, "--split-file"),
    subset: Optional[str] = typer.Option(None, "--subset",
                                         click_type=click.Choice(["all", "train", "val"])),
    mode: Optional[str] = typer.Option(None, "--mode",
                                       click_type=click.Choice(["pooled", "averaged"])),
    top_fraction: Optional[float] = typer.Option(None, "--top-fraction", help="默认 0.2"),
    single_frame: bool = typer.Option(False, "--single-frame"),
    n_boot: Optional[int] = typer.Option(None, "--n-boot", help="默认 1000"),
    by_patient: bool = typer.Option(False, "--by-patient", help="bootstrap 按患者重采样"),
    seed: Optional[int] = typer.Option(None, "--seed"),
    vocab: Optional[str] = typer.Option(None, "--vocab"),
):
    """零样本分类 / 回归评估"""
    with tracked_outputs(out) as out_dir:
        options = build_options(ZeroshotOptions, config, {
            "checkpoint": checkpoint, "random_init": random_init, "featurizer": featurizer,
            "split_file": split_file, "subset": subset, "mode": mode,
            "top_fraction": top_fraction, "single_frame": single_frame, "n_boot": n_boot,
            "by_patient": by_patient, "seed": seed, "vocab": vocab,
        })
        prompt_set = load_prompt_set(task)
        studies = _select_studies(corpus, options.split_file, options.subset)
        template_vocab = _load_vocab(options.vocab)
        params, features = _load_encoder(options, studies[0].frames.shape[1], template_vocab)
        encoder = text_encoder(params, features, TemplateTokenizer(template_vocab))
        videos = {s.report_id: encode_frames(s.frames, params) for s in studies}
        n_jobs = threads_from_env()

        if prompt_set.type == "regression":
            preds = regress_videos(videos, prompt_set.grid().embed(encoder),
                                   options.top_fraction, options.mode, n_jobs)
            metric, metric_name, column = mae, "mae", "prediction"
        else:
            preds = classify_videos(videos, prompt_set.class_prompts().embed(encoder),
                                    options.single_frame, n_jobs)
            metric, metric_name, column = roc_auc, "auc", "score"

        table = pd.DataFrame([
            {"report_id": s.report_id, "patient_id": s.patient_id,
             "truth": task_truth(prompt_set.task, s.latent), column: preds[s.report_id]}
            for s in sorted(studies, key=lambda s: s.report_id)
        ])
        table.to_csv(out_dir / "predictions.csv", index=False)
        estimate = bootstrap_ci(metric, (table[column].to_numpy(), table["truth"].to_numpy()),
                                n_boot=options.n_boot, seed=options.seed,
                                groups=table["patient_id"].to_numpy() if options.by_patient else None,
                                n_jobs=n_jobs)
        report = EvalReport(task=prompt_set.task, n=len(table))
        report.add_estimate(metric_name, estimate)
        report.save(out_dir / "zeroshot.json")
        logger.info(
            f"{prompt_set.task} {metric_name} = {estimate.value:.3f} "
            f"[{estimate.ci_low:.3f}, {estimate.ci_high:.3f}]"
        )
        _write_manifest("zeroshot", options.seed, out_dir, {"corpus": corpus},
                        {**options.model_dump(), "task": prompt_set.task,
                         "featurizer": params.featurizer})


@app.command("retrieval")
def cmd_retrieval(
    manifest: str = typer.Argument(...),
    blob: str = typer.Argument(...),
    out: str = typer.Option(..., "--out", "-o"),
    config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
    image_mode: Optional[str] = typer.Option(None, "--image-mode",
                                             click_type=click.Choice(["first_frame", "mean_pool"])),
    ks: Optional[str] = typer.Option(None, "--k", help="逗号分隔的 K 值, 默认 1,5,10"),
):
    """双向检索评估与 MCMRR"""
    with tracked_outputs(out) as out_dir:
        options = build_options(RetrievalOptions, config, {"image_mode": image_mode, "ks": ks})
        store, _ = load_store(manifest, blob)
        i2t, t2i, score, dedup = retrieval_from_store(store, options.image_mode,
                                                      _parse_ks(options.ks))
        for result in (i2t, t2i):
            to_eval_report(result, score).save(out_dir / f"retrieval_{result.direction}.json")
        pd.DataFrame({
            "report_id": [p.report_id for p in dedup.pairs],
            "image_to_text_rank": i2t.ranks,
            "text_to_image_rank": t2i.ranks,
        }).to_csv(out_dir / "ranks.csv", index=False)
        _write_manifest("retrieval", 0, out_dir, {"manifest": manifest, "blob": blob},
                        {**options.model_dump(), "excluded": dedup.excluded})


@app.command("cohort")
def cmd_cohort(
    manifest: str = typer.Argument(...),
    blob: str = typer.Argument(...),
    out: str = typer.Option(..., "--out", "-o"),
    config: Optional[str] = typer.Option(None, "--config", help=CONFIG_HELP),
    n_pairs: Optional[int] = typer.Option(None, "--n-pairs", help="每个关系类别的图像对数, 默认 1000"),
    events: Optional[str] = typer.Option(None, "--events", help="事件表 CSV (patient_id, event_date)"),
    window_days: Optional[int] = typer.Option(None, "--window-days", help="默认 200"),
    n_boot: Optional[int] = typer.Option(None, "--n-boot", help="默认 1000"),
    seed: Optional[int] = typer.Option(None, "--seed"),
):
    """同一患者判别与术前/术后时间线"""
    with tracked_outputs(out) as out_dir:
        options = build_options(CohortOptions, config, {
            "n_pairs": n_pairs, "events": events, "window_days": window_days,
            "n_boot": n_boot, "seed": seed,
        })
        store, _ = load_store(manifest, blob)
        pairs = sample_pairs(store, options.n_pairs, options.seed)
        pd.DataFrame([
            {"id_a": p.a.id, "id_b": p.b.id, "relation": p.relation, "similarity": p.similarity}
            for p in pairs
        ]).to_csv(out_dir / "pairs.csv", index=False)

        report = EvalReport(task="cohort", n=len(pairs))
        for relation, estimate in relation_summary(pairs, options.n_boot, options.seed).items():
            report.add_estimate(f"mean_similarity_{relation}", estimate)
        report.add_estimate("same_patient_auc",
                            same_patient_auc(pairs, False, options.n_boot, options.seed))
        report.add_estimate("same_patient_auc_cross_study",
                            same_patient_auc(pairs, True, options.n_boot, options.seed))

        if options.events:
            timelines = build_timelines(store, load_events(options.events), options.window_days,
                                        threads_from_env())
            timelines_to_frame(timelines).to_csv(out_dir / "timelines.csv", index=False)
            report.add_estimate("pre_post_auc", pre_post_auc(timelines, options.n_boot,
                                                             options.seed))
        report.save(out_dir / "cohort.json")
        _write_manifest("cohort", options.seed, out_dir, {"manifest": manifest, "blob": blob},
                        options.model_dump())


def main(argv: Optional[List[str]] = None) -> int:
    """运行命令行, 返回退出码"""
    command = typer.main.get_command(app)
    try:
        command.main(args=argv, prog_name="cardiolens", standalone_mode=False)
    except click.exceptions.Exit as e:
        return e.exit_code
    except click.exceptions.Abort:
        return 1
    except click.exceptions.ClickException as e:
        e.show()
        return 1
    except CardioLensError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except (OSError, np.linalg.LinAlgError) as e:
        logger.error(f"运行失败: {e}", exc_info=True)
        return 1
    return 0
