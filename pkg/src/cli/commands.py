"""
命令实现：generate-data / train / eval / ablate

每个命令独占输出目录（.lock），写出 resolved_config.json 与 run.log
"""

import contextlib
import logging
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Union

import numpy as np

from config.settings import RunConfig, config_hash
from core.errors import ConfigurationError
from core.services.ablation import AblationRunner
from core.services.embedder import Embedder, EmbeddingResult, routing_fidelity
from core.services.trainer import Trainer, TrainResult
from core.types import DEFAULT_ABLATIONS, AblationVariant, Exclusion, Modality, pattern_label
from datakit.layout import export_dataset
from datakit.records import fingerprint, mask_dataset
from datakit.splits import build_splits, split_records
from datakit.synthetic import generate_synthetic
from evalkit.plots import plot_cmc, plot_weight_histogram
from evalkit.protocol import embed_and_evaluate, missing_modality_sweep
from evalkit.reports import export_embeddings, write_report
from evalkit.retrieval import TABLE_COLUMNS, Protocol
from infrastructure.artifacts import AuditWriter, write_csv, write_json
from infrastructure.checkpoint import load_checkpoint, restore_model
from infrastructure.run_lock import RunLock

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def check_config(config: RunConfig) -> None:
    """
    Raises:
        ConfigurationError: validate() 未通过
    """
    ok, errors = config.validate()
    if not ok:
        raise ConfigurationError("; ".join(errors))


@contextlib.contextmanager
def run_directory(config: RunConfig, output_dir: Union[str, Path]) -> Iterator[Path]:
    """
    获取输出目录锁，挂载 run.log 文件日志并写出 resolved_config.json
    """
    directory = Path(output_dir)
    with RunLock(directory):
        handler = logging.FileHandler(directory / "run.log", encoding="utf-8")
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root = logging.getLogger()
        root.addHandler(handler)
        try:
            write_json(directory / "resolved_config.json", config.resolved(), config_hash(config))
            yield directory
        finally:
            root.removeHandler(handler)
            handler.close()


def run_generate(config: RunConfig, output_dir: Union[str, Path]) -> Dict[str, int]:
    """
    生成合成数据集并按加载器的目录约定导出 train / query / gallery 三个划分

    Returns:
        Dict[str, int]: 各划分样本数
    """
    if config.data.synth.n_identities <= 0:
        raise ConfigurationError("data.synth.n_identities must be positive")
    with run_directory(config, output_dir) as directory:
        records = generate_synthetic(config.data.synth)
        splits = split_records(records, config.data)
        data = config.data
        counts = {}
        for name, part in ((data.train_split, splits.train), (data.query_split, splits.query),
                           (data.gallery_split, splits.gallery)):
            export_dataset(part, str(directory), name)
            counts[name] = len(part)
        logger.info(f"数据集指纹: {fingerprint(records)[:16]}, 划分: {counts}")
        return counts


def run_train(
    config: RunConfig,
    output_dir: Optional[Union[str, Path]] = None,
    resume: Optional[Union[str, Path]] = None,
) -> TrainResult:
    """
    训练到配置的 epoch 数，写出检查点、CSV 训练日志与曲线图

    Args:
        config: 运行配置
        output_dir: 输出目录，默认 config.output_dir
        resume: 续训检查点；缺失时抛出 CheckpointError（退出码 1）
    """
    check_config(config)
    output_dir = Path(output_dir or config.output_dir)
    with run_directory(config, output_dir) as directory:
        splits = build_splits(config.data, (config.encoder.image_height, config.encoder.image_width))
        logger.info(
            f"训练集: {len(splits.train)} samples / {splits.n_classes} identities, "
            f"query={len(splits.query)}, gallery={len(splits.gallery)}"
        )
        result = Trainer(config, directory).fit(splits, resume_from=resume)
        write_json(directory / "train_summary.json", {
            "variant": result.model.variant.value,
            "epochs": config.optim.epochs,
            "final_loss": result.final_loss,
            "trainable_params": result.model.trainable_parameters(),
            "final_beta": result.model.gate.value,
            "start_epoch": result.start_epoch,
        }, config_hash(config))
        return result


def _report_stem(pattern: Sequence[Modality]) -> str:
    if not pattern:
        return "report"
    return "report_missing_" + "_".join(m.value for m in pattern)


def _merge(query: EmbeddingResult, gallery: EmbeddingResult) -> EmbeddingResult:
    return EmbeddingResult(
        records=query.records + gallery.records,
        embeddings=np.concatenate([query.embeddings, gallery.embeddings]),
        audit=query.audit + gallery.audit,
    )


def run_eval(
    config: RunConfig,
    checkpoint: Union[str, Path],
    output_dir: Optional[Union[str, Path]] = None,
    exclusion: Optional[Union[Exclusion, str]] = None,
    missing: Sequence[Modality] = (),
    sweep: bool = False,
    audit: bool = False,
    embeddings: bool = False,
) -> Dict[str, object]:
    """
    评估检查点

    Args:
        config: 评估配置，其模型哈希必须与检查点一致
        checkpoint: 检查点路径
        output_dir: 输出目录
        exclusion: 覆盖配置中的排除规则
        missing: 查询与图库同时缺失的模态
        sweep: 额外运行 6 种缺失模式扫描，写出 sweep.csv
        audit: 写出逐样本审计流 audit.jsonl
        embeddings: 导出 embeddings.npy / embeddings.json

    Returns:
        dict: 主报告的 mAP 与 R-k，以及路由保真度摘要
    """
    check_config(config)
    bundle = load_checkpoint(checkpoint)
    model = restore_model(bundle, config)
    exclusion = Exclusion(exclusion or config.evaluation.exclusion)
    output_dir = Path(output_dir or config.output_dir)
    digest = config_hash(config)
    ks = config.evaluation.ks

    with run_directory(config, output_dir) as directory:
        splits = build_splits(config.data, (config.encoder.image_height, config.encoder.image_width))
        embedder = Embedder(model, config)
        missing = tuple(missing)
        query, gallery = splits.query, splits.gallery
        if missing:
            query, gallery = mask_dataset(query, missing), mask_dataset(gallery, missing)

        protocol = Protocol(exclusion=exclusion, missing=pattern_label(missing), config_hash=digest)
        evaluation = embed_and_evaluate(embedder, query, gallery, exclusion, ks, protocol)
        combined = _merge(evaluation.query, evaluation.gallery)
        fidelity = routing_fidelity(combined)
        write_report(
            evaluation.report, directory, _report_stem(missing), evaluation.subsets,
            extra={"routing_fidelity": fidelity, "checkpoint": str(checkpoint), "beta": model.gate.value},
        )

        curves = {pattern_label(missing): evaluation.report.cmc}
        curves.update({name: r.cmc for name, r in evaluation.subsets.items()})
        plot_cmc(curves, directory / "cmc_curve.png")
        plot_weight_histogram(combined.max_weights, combined.branches, model.gate.value, directory / "weight_hist.png")

        if audit:
            labels = ["query"] * len(evaluation.query.audit) + ["gallery"] * len(evaluation.gallery.audit)
            with AuditWriter(directory / "audit.jsonl", digest) as writer:
                writer.write_all({"split": split, **row} for split, row in zip(labels, combined.audit))

        if embeddings:
            labels = ["query"] * len(evaluation.query.records) + ["gallery"] * len(evaluation.gallery.records)
            export_embeddings(combined, directory / "embeddings", digest, labels)

        if sweep:
            table = missing_modality_sweep(embedder, splits.query, splits.gallery, exclusion, ks, config_hash=digest)
            write_csv(directory / "sweep.csv", table.table(), digest, ["setting", *TABLE_COLUMNS])

        return {**evaluation.report.row(), "skipped": evaluation.report.skipped, "routing_fidelity": fidelity}


def parse_variants(text: Optional[str]) -> List[AblationVariant]:
    """
    解析逗号分隔的变体列表，缺省为 5 个基本变体

    Raises:
        ConfigurationError: 未知变体
    """
    if not text:
        return list(DEFAULT_ABLATIONS)
    variants = []
    for name in (part.strip() for part in text.split(",")):
        if not name:
            continue
        try:
            variants.append(AblationVariant(name))
        except ValueError as exc:
            known = ", ".join(v.value for v in AblationVariant)
            raise ConfigurationError(f"unknown variant {name!r} (known: {known})") from exc
    if not variants:
        raise ConfigurationError("no ablation variant requested")
    return variants


def run_ablation(
    config: RunConfig,
    variants: Sequence[AblationVariant],
    output_dir: Optional[Union[str, Path]] = None,
) -> List[Dict[str, object]]:
    """
    在同一种子下逐个训练、评估变体，写出 ablation.csv
    """
    check_config(config)
    output_dir = Path(output_dir or config.output_dir)
    with run_directory(config, output_dir) as directory:
        splits = build_splits(config.data, (config.encoder.image_height, config.encoder.image_width))
        return AblationRunner(config, directory).run(variants, splits)
