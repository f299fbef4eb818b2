"""
图像退化算子：耀斑、低照度、噪声

输入输出均为 float32、取值 [0, 1] 的 H×W×C 栅格
"""

from typing import Optional, Union

import numpy as np

from core.errors import InputError
from core.types import DegradationKind


def _flare(image: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    height, width = image.shape[:2]
    cy = int(rng.integers(0, height))
    cx = int(rng.integers(0, width))
    sigma = max(height, width) * (0.1 + 0.2 * severity)
    yy, xx = np.mgrid[0:height, 0:width]
    blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2.0 * sigma ** 2))
    # 中心振幅 2·severity，severity >= 0.5 时中心像素饱和
    return image + (2.0 * severity * blob)[..., None]


def _low_light(image: np.ndarray, severity: float) -> np.ndarray:
    return np.power(image * (1.0 - 0.9 * severity), 1.0 + 2.0 * severity)


def _noise(image: np.ndarray, severity: float, rng: np.random.Generator) -> np.ndarray:
    return image + rng.normal(0.0, 0.25 * severity, size=image.shape)


def apply_degradation(
    image: np.ndarray,
    kind: Union[DegradationKind, str],
    severity: float,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    对单张图像施加退化

    Args:
        image: H×W×C 栅格，取值 [0, 1]
        kind: flare / low_light / noise
        severity: [0, 1]，0 时原样返回
        rng: 随机源（耀斑位置、噪声），缺省为固定种子

    Returns:
        np.ndarray: 截断到 [0, 1] 的 float32 栅格
    """
    if not 0.0 <= severity <= 1.0:
        raise InputError(f"severity must lie in [0, 1], got {severity}")
    kind = DegradationKind(kind)
    image = np.asarray(image, dtype=np.float32)
    if severity == 0.0:
        return image.copy()

    rng = rng if rng is not None else np.random.default_rng(0)
    if kind == DegradationKind.FLARE:
        out = _flare(image, severity, rng)
    elif kind == DegradationKind.LOW_LIGHT:
        out = _low_light(image, severity)
    else:
        out = _noise(image, severity, rng)
    return np.clip(out, 0.0, 1.0).astype(np.float32)
