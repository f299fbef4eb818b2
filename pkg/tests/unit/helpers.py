"""
测试辅助：小尺寸配置与合成样本
"""

import os
import sys
from typing import Any, Dict, List, Optional

sys.path.insert(0, os.path.join(
    os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))),
    "src"
))

import numpy as np  # noqa: E402
import torch  # noqa: E402

from config.settings import RunConfig, _deep_merge  # noqa: E402
from core.backbone import TokenFeatures  # noqa: E402
from core.types import MODALITIES  # noqa: E402
from datakit.records import SampleRecord  # noqa: E402

TINY: Dict[str, Any] = {
    "encoder": {
        "image_height": 16, "image_width": 8, "patch_size": 4,
        "embed_dim": 16, "depth": 1, "heads": 2, "dropout_rate": 0.0,
    },
    "fusion": {"mc_passes": 4},
    "optim": {
        "epochs": 0, "identities_per_batch": 3, "instances_per_identity": 2,
        "lr_preset": "custom", "lr": 1e-3,
    },
    "data": {
        "synth": {
            "n_identities": 6, "samples_per_identity": 5,
            "image_height": 16, "image_width": 8, "n_cameras": 2,
        },
        "augment": {"padding": 2},
    },
    "evaluation": {"exclusion": "none", "batch_size": 16},
}


def tiny_config(overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """不读取环境变量的小尺寸配置"""
    return RunConfig.model_validate(_deep_merge(TINY, overrides or {}))


def random_features(batch: int, tokens: int, dim: int, seed: int = 0, dtype=torch.float32) -> List[TokenFeatures]:
    generator = torch.Generator().manual_seed(seed)
    return [
        TokenFeatures.from_tokens(torch.randn(batch, tokens, dim, generator=generator, dtype=dtype), m)
        for m in MODALITIES
    ]


def make_record(identity: int, camera: int = 0, index: int = 0, height: int = 16, width: int = 8,
                seed: int = 0, mask=(True, True, True)) -> SampleRecord:
    rng = np.random.default_rng([seed, identity, index])
    images = {
        MODALITIES[0]: rng.uniform(0, 1, (height, width, 3)).astype(np.float32),
        MODALITIES[1]: rng.uniform(0, 1, (height, width, 1)).astype(np.float32),
        MODALITIES[2]: rng.uniform(0, 1, (height, width, 1)).astype(np.float32),
    }
    return SampleRecord(
        sample_id=f"{identity:04d}_{camera}_{index:03d}",
        identity=identity,
        camera=camera,
        images=images,
        mask=tuple(mask),
        index=index,
    )
