"""
报告与嵌入导出
"""

import json
import logging
from pathlib import Path
from typing import Dict, Optional, Sequence, Union

import numpy as np

from core.services.embedder import EmbeddingResult
from evalkit.retrieval import EvalReport

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def export_embeddings(
    result: EmbeddingResult,
    path: PathLike,
    config_hash: str,
    split: Union[str, Sequence[str]] = "",
) -> Path:
    """
    写出 <path>.npy 嵌入矩阵与 <path>.json 附带文件（样本 id、身份、相机）

    Returns:
        Path: .npy 文件路径
    """
    path = Path(path)
    matrix_path = path.with_suffix(".npy")
    np.save(matrix_path, result.embeddings.astype(np.float32))
    sidecar = {
        "splits": [split] * len(result.records) if isinstance(split, str) else list(split),
        "shape": list(result.embeddings.shape),
        "sample_ids": [r.sample_id for r in result.records],
        "identities": result.identities.tolist(),
        "cameras": result.cameras.tolist(),
        "config_hash": config_hash,
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2), encoding="utf-8")
    logger.info(f"嵌入已导出: {matrix_path} {tuple(result.embeddings.shape)}")
    return matrix_path


def write_report(
    report: EvalReport,
    directory: PathLike,
    stem: str,
    subsets: Optional[Dict[str, EvalReport]] = None,
    extra: Optional[Dict[str, object]] = None,
) -> Path:
    """
    写出 <stem>.json（完整报告，含子集与附加信息）与 <stem>.csv（表格行）
    """
    directory = Path(directory)
    payload = json.loads(report.model_dump_json())
    payload["config_hash"] = report.protocol.config_hash
    if subsets:
        payload["subsets"] = {name: json.loads(r.model_dump_json()) for name, r in subsets.items()}
    if extra:
        payload.update(extra)
    json_path = directory / f"{stem}.json"
    json_path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
    report.to_csv(directory / f"{stem}.csv")
    logger.info(
        f"报告已写入: {json_path} (mAP={report.mAP:.4f}, R-1={report.rank(1):.4f}, skipped={report.skipped})"
    )
    return json_path
