"""
样本记录

一个样本包含身份、相机、三个模态的图像、存在掩码和退化元数据
"""

import dataclasses
import hashlib
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from core.errors import InputError
from core.types import MODALITIES, DegradationKind, Modality


@dataclass(frozen=True)
class Degradation:
    kind: DegradationKind
    severity: float

    def to_dict(self) -> Dict[str, object]:
        return {"kind": self.kind.value, "severity": self.severity}


@dataclass(frozen=True, eq=False)
class SampleRecord:
    """
    多模态样本

    images 为 float32、取值 [0, 1] 的 H×W×C 栅格（RGB 三通道，NIR/TIR 单通道）

    graded 表示退化元数据可信：合成样本与 manifest 中登记过的样本为 True，
    此时 degradation 为空即平衡样本
    """
    sample_id: str
    identity: int
    camera: int
    images: Mapping[Modality, np.ndarray]
    mask: Tuple[bool, bool, bool] = (True, True, True)
    degradation: Mapping[Modality, Degradation] = field(default_factory=dict)
    index: int = 0
    graded: bool = True

    def __post_init__(self) -> None:
        if self.identity < 0:
            raise InputError(f"{self.sample_id}: identity must be non-negative")
        for modality in MODALITIES:
            if self.mask[modality.index] and modality not in self.images:
                raise InputError(f"{self.sample_id}: {modality.value} flagged present but has no image")

    @property
    def present(self) -> Tuple[Modality, ...]:
        return tuple(m for m in MODALITIES if self.mask[m.index])

    @property
    def degraded_modality(self) -> Optional[Modality]:
        return next(iter(self.degradation), None)

    @property
    def is_degraded(self) -> bool:
        return bool(self.degradation)

    @property
    def quality(self) -> Tuple[float, float, float]:
        """各模态质量：退化模态为 1 - severity，其余为 1"""
        return tuple(
            1.0 - self.degradation[m].severity if m in self.degradation else 1.0 for m in MODALITIES
        )

    def meta(self) -> Dict[str, object]:
        return {
            "sample_id": self.sample_id,
            "identity": self.identity,
            "camera": self.camera,
            "index": self.index,
            "mask": list(self.mask),
            "graded": self.graded,
            "degradation": {m.value: d.to_dict() for m, d in self.degradation.items()},
        }


def mask_modalities(sample: SampleRecord, pattern: Iterable[Modality]) -> SampleRecord:
    """
    清除 pattern 中模态的存在标记，图像保留

    Raises:
        InputError: 掩码后没有任何模态存在
    """
    hidden = set(pattern)
    if not hidden:
        return sample
    mask = tuple(sample.mask[m.index] and m not in hidden for m in MODALITIES)
    if not any(mask):
        raise InputError(f"{sample.sample_id}: masking {sorted(m.value for m in hidden)} leaves no modality")
    return dataclasses.replace(sample, mask=mask)


def mask_dataset(records: Sequence[SampleRecord], pattern: Iterable[Modality]) -> List[SampleRecord]:
    pattern = tuple(pattern)
    return [mask_modalities(r, pattern) for r in records]


def fingerprint(records: Sequence[SampleRecord]) -> str:
    """数据集内容摘要，用于判断两次生成是否逐字节一致"""
    digest = hashlib.sha256()
    for record in records:
        digest.update(repr(record.meta()).encode("utf-8"))
        for modality in MODALITIES:
            image = record.images.get(modality)
            if image is not None:
                digest.update(modality.value.encode("utf-8"))
                digest.update(str(image.shape).encode("utf-8"))
                digest.update(np.ascontiguousarray(image).tobytes())
    return digest.hexdigest()


def identity_labels(records: Sequence[SampleRecord]) -> Dict[int, int]:
    """原始身份到连续类别索引的映射"""
    return {identity: label for label, identity in enumerate(sorted({r.identity for r in records}))}
