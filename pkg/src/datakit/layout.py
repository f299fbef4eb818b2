"""
数据集目录读写

目录约定：<root>/<split>/<modality>/<identity>_<camera>_<index>.<ext>，modality 取 rgb / nir / tir。
根目录下的 layout.json 可覆盖模态目录名与文件名正则；manifest.json 记录计数、身份与退化元数据。
"""

import json
import logging
import os
import re
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from pydantic import BaseModel, Field
from tqdm import tqdm

from core.errors import InputError
from core.types import MODALITIES, DegradationKind, Modality
from datakit.records import Degradation, SampleRecord
from datakit.synthetic import degradation_histogram

logger = logging.getLogger(__name__)

DEFAULT_PATTERN = r"^(?P<identity>\d+)_(?P<camera>\d+)_(?P<index>\d+)\.(?P<ext>png|jpg|jpeg|bmp|tif|tiff)$"
MANIFEST_NAME = "manifest.json"
LAYOUT_NAME = "layout.json"

Key = Tuple[int, int, int]


class LayoutSpec(BaseModel):
    """
    目录布局，可由 layout.json 覆盖
    """
    modality_dirs: Dict[str, str] = Field(default_factory=lambda: {m.name: m.value for m in MODALITIES})
    filename_pattern: str = DEFAULT_PATTERN

    def directory(self, modality: Modality) -> str:
        return self.modality_dirs.get(modality.name, modality.value)

    @classmethod
    def for_root(cls, root: Path) -> "LayoutSpec":
        path = root / LAYOUT_NAME
        if path.is_file():
            with open(path, "r", encoding="utf-8") as f:
                return cls(**json.load(f))
        return cls()


class LoadReport(BaseModel):
    split: str
    records: int = 0
    skipped: int = 0
    skipped_files: List[str] = Field(default_factory=list)
    partial: int = 0


def _read_image(path: Path, modality: Modality) -> Optional[np.ndarray]:
    raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if raw is None:
        return None
    scale = 65535.0 if raw.dtype == np.uint16 else 255.0
    if raw.ndim == 3 and raw.shape[2] == 4:
        raw = raw[..., :3]
    if modality == Modality.R:
        image = cv2.cvtColor(raw, cv2.COLOR_BGR2RGB) if raw.ndim == 3 else np.repeat(raw[..., None], 3, axis=2)
    else:
        image = cv2.cvtColor(raw, cv2.COLOR_BGR2GRAY)[..., None] if raw.ndim == 3 else raw[..., None]
    return (image.astype(np.float32) / scale).astype(np.float32)


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    if image.shape[:2] == (height, width):
        return image
    resized = cv2.resize(image, (width, height), interpolation=cv2.INTER_LINEAR)
    return resized[..., None] if resized.ndim == 2 else resized


def _read_manifest_meta(root: Path, split: str) -> Dict[Key, Optional[Dict[Modality, Degradation]]]:
    """manifest 中登记的退化元数据；graded=false 的样本映射为 None"""
    path = root / MANIFEST_NAME
    if not path.is_file():
        return {}
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    meta: Dict[Key, Optional[Dict[Modality, Degradation]]] = {}
    for sample in manifest.get("splits", {}).get(split, {}).get("samples", []):
        key = (int(sample["identity"]), int(sample["camera"]), int(sample["index"]))
        if not sample.get("graded", True):
            meta[key] = None
            continue
        meta[key] = {
            Modality.parse(name): Degradation(DegradationKind(d["kind"]), float(d["severity"]))
            for name, d in sample.get("degradation", {}).items()
        }
    return meta


def load_dataset(
    root: str,
    split: str,
    layout: Optional[LayoutSpec] = None,
    image_size: Optional[Tuple[int, int]] = None,
) -> Tuple[List[SampleRecord], LoadReport]:
    """
    读取一个划分的多模态样本

    Args:
        root: 数据集根目录
        split: 划分名（train / query / gallery ...）
        layout: 目录布局，缺省读取 layout.json 或使用默认约定
        image_size: (H, W)，给定时统一缩放

    Returns:
        (样本列表, 读取报告)

    Raises:
        InputError: 划分目录不存在或没有任何有效样本
    """
    base = Path(root)
    layout = layout or LayoutSpec.for_root(base)
    pattern = re.compile(layout.filename_pattern)
    split_dir = base / split
    if not split_dir.is_dir():
        raise InputError(f"split directory not found: {split_dir}")

    report = LoadReport(split=split)
    grouped: Dict[Key, Dict[Modality, Path]] = {}
    for modality in MODALITIES:
        modality_dir = split_dir / layout.directory(modality)
        if not modality_dir.is_dir():
            continue
        for name in sorted(os.listdir(modality_dir)):
            match = pattern.match(name)
            if match is None:
                report.skipped += 1
                report.skipped_files.append(str(modality_dir / name))
                continue
            key = (int(match["identity"]), int(match["camera"]), int(match["index"]))
            grouped.setdefault(key, {})[modality] = modality_dir / name

    degradation = _read_manifest_meta(base, split)
    records: List[SampleRecord] = []
    for key in sorted(grouped):
        identity, camera, index = key
        images: Dict[Modality, np.ndarray] = {}
        for modality, path in grouped[key].items():
            image = _read_image(path, modality)
            if image is None:
                report.skipped += 1
                report.skipped_files.append(str(path))
                continue
            images[modality] = resize_image(image, *image_size) if image_size else image
        if not images:
            continue
        mask = tuple(m in images for m in MODALITIES)
        if not all(mask):
            report.partial += 1
        records.append(SampleRecord(
            sample_id=f"{split}/{identity}_{camera}_{index}",
            identity=identity,
            camera=camera,
            images=images,
            mask=mask,
            degradation=degradation.get(key) or {},
            index=index,
            graded=degradation.get(key) is not None,
        ))

    if not records:
        raise InputError(f"split {split!r} under {root} contains no readable samples")
    report.records = len(records)
    if report.skipped:
        logger.warning(f"{split}: 跳过 {report.skipped} 个无法解析的文件")
    logger.info(f"数据集已读取: split={split}, records={report.records}, partial={report.partial}")
    return records, report


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)


def export_dataset(records: Sequence[SampleRecord], root: str, split: str) -> Path:
    """
    按加载器的目录约定导出 PNG（无损），并更新 manifest.json

    Returns:
        Path: 划分目录
    """
    base = Path(root)
    layout = LayoutSpec.for_root(base)
    for modality in MODALITIES:
        (base / split / layout.directory(modality)).mkdir(parents=True, exist_ok=True)

    for record in tqdm(records, desc=f"export {split}", disable=not logger.isEnabledFor(logging.INFO)):
        name = f"{record.identity}_{record.camera}_{record.index}.png"
        for modality in record.present:
            image = _to_uint8(record.images[modality])
            if modality == Modality.R:
                image = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
            else:
                image = image[..., 0]
            cv2.imwrite(str(base / split / layout.directory(modality) / name), image)

    manifest_path = base / MANIFEST_NAME
    manifest = {"splits": {}}
    if manifest_path.is_file():
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = json.load(f)
    manifest.setdefault("splits", {})[split] = {
        "count": len(records),
        "identities": sorted({r.identity for r in records}),
        "degradation_histogram": degradation_histogram(list(records)),
        "samples": [r.meta() for r in records],
    }
    with open(manifest_path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)

    logger.info(f"数据集已导出: {base / split} ({len(records)} samples)")
    return base / split
