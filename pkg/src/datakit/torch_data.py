"""
PyTorch 数据接口：多模态 Dataset、跨模态一致的数据增强、P×K 身份采样器
"""

import logging
import math
from typing import Dict, Iterator, List, Mapping, Optional, Sequence

import numpy as np
import torch
from torch.utils.data import Dataset, Sampler
from torchvision import tv_tensors
from torchvision.transforms import v2

from config.settings import AugmentConfig
from core.backbone import as_three_channels
from core.errors import SamplerError
from core.types import MODALITIES
from datakit.layout import resize_image
from datakit.records import SampleRecord

logger = logging.getLogger(__name__)


class JointAugment:
    """
    水平翻转、填充后随机裁剪、随机擦除；一次调用中三个模态共享同一组随机参数
    """

    def __init__(self, config: AugmentConfig, height: int, width: int):
        steps = [v2.RandomHorizontalFlip(p=config.flip_p)]
        if config.padding:
            steps += [v2.Pad(config.padding), v2.RandomCrop((height, width))]
        if config.erasing_p > 0:
            steps.append(v2.RandomErasing(p=config.erasing_p, value=0))
        self.transform = v2.Compose(steps)

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        """images: (3, C, H, W)"""
        outputs = self.transform(*[tv_tensors.Image(image) for image in images])
        return torch.stack([torch.as_tensor(out) for out in outputs])


class MultiModalDataset(Dataset):
    """
    把 SampleRecord 转为张量：images (3, 3, H, W)，present (3,)，label，camera，
    以及置信度监督用的 quality (3,) 与 graded
    """

    def __init__(
        self,
        records: Sequence[SampleRecord],
        height: int,
        width: int,
        label_map: Optional[Mapping[int, int]] = None,
        augment: Optional[JointAugment] = None,
    ):
        self.records = list(records)
        self.height = height
        self.width = width
        self.label_map = dict(label_map) if label_map is not None else None
        self.augment = augment

    def __len__(self) -> int:
        return len(self.records)

    def _image_tensor(self, record: SampleRecord, index: int) -> torch.Tensor:
        image = record.images.get(MODALITIES[index])
        if image is None:
            return torch.zeros(3, self.height, self.width)
        image = resize_image(image, self.height, self.width)
        tensor = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()
        return as_three_channels(tensor.unsqueeze(0))[0]

    def __getitem__(self, idx: int) -> Dict[str, torch.Tensor]:
        record = self.records[idx]
        images = torch.stack([self._image_tensor(record, m.index) for m in MODALITIES])
        if self.augment is not None:
            images = self.augment(images)
        label = self.label_map[record.identity] if self.label_map is not None else record.identity
        return {
            "images": images,
            "present": torch.tensor(record.mask, dtype=torch.bool),
            "label": torch.tensor(label, dtype=torch.long),
            "identity": torch.tensor(record.identity, dtype=torch.long),
            "camera": torch.tensor(record.camera, dtype=torch.long),
            "quality": torch.tensor(record.quality, dtype=torch.float32),
            "graded": torch.tensor(record.graded, dtype=torch.bool),
            "position": torch.tensor(idx, dtype=torch.long),
        }


class PKSampler(Sampler[int]):
    """
    每个批次 P 个身份 × 每身份 K 个样本

    每个身份的样本打乱后切成 ceil(n / K) 组，最后一组有放回补齐；每轮取剩余组数最多的
    P 个身份（同数时随机），于是每个 epoch 的批次数固定为 __len__ 给出的值。
    迭代顺序由 (seed, epoch) 决定
    """

    def __init__(self, labels: Sequence[int], identities_per_batch: int, instances_per_identity: int, seed: int = 0):
        self.labels = list(labels)
        self.p = identities_per_batch
        self.k = instances_per_identity
        self.seed = seed
        self.epoch = 0
        self.index_by_label: Dict[int, List[int]] = {}
        for idx, label in enumerate(self.labels):
            self.index_by_label.setdefault(label, []).append(idx)
        if len(self.index_by_label) < self.p:
            raise SamplerError(
                f"P x K sampler needs at least {self.p} identities, dataset has {len(self.index_by_label)}"
            )
        self.chunk_counts = {
            label: math.ceil(len(indices) / self.k) for label, indices in self.index_by_label.items()
        }
        self.batches = self._batch_count(list(self.chunk_counts.values()), self.p)

    @staticmethod
    def _batch_count(counts: Sequence[int], p: int) -> int:
        """
        每轮 P 个不同身份时可排出的批次数

        一个身份在 r 轮中最多出现 r 次，所以 r 满足 sum(min(c, r)) >= P * r
        """
        rounds = sum(counts) // p
        while True:
            feasible = sum(min(c, rounds) for c in counts) // p
            if feasible == rounds:
                return rounds
            rounds = feasible

    def set_epoch(self, epoch: int) -> None:
        self.epoch = epoch

    def _build(self, epoch: int) -> List[int]:
        rng = np.random.default_rng([self.seed, epoch])
        chunks: Dict[int, List[List[int]]] = {}
        for label in sorted(self.index_by_label):
            indices = self.index_by_label[label]
            size = self.chunk_counts[label] * self.k
            shuffled = rng.permutation(indices).tolist()
            if size > len(shuffled):
                shuffled += rng.choice(indices, size=size - len(shuffled), replace=True).tolist()
            chunks[label] = [shuffled[i:i + self.k] for i in range(0, size, self.k)]

        labels = sorted(chunks)
        order: List[int] = []
        for _ in range(self.batches):
            tiebreak = rng.permutation(len(labels))
            ranked = sorted(range(len(labels)), key=lambda i: (-len(chunks[labels[i]]), tiebreak[i]))
            for i in ranked[:self.p]:
                order.extend(chunks[labels[i]].pop())
        return order

    def __iter__(self) -> Iterator[int]:
        return iter(self._build(self.epoch))

    def __len__(self) -> int:
        return self.batches * self.p * self.k
