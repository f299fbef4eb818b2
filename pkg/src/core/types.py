"""
核心类型定义

模态、融合分支、退化类型等枚举
"""

from enum import Enum
from typing import Iterable, Optional, Tuple


class Modality(str, Enum):
    """
    光谱模态

    顺序 R < N < T 即张量中的模态轴顺序
    """
    R = "rgb"
    N = "nir"
    T = "tir"

    @property
    def index(self) -> int:
        return MODALITIES.index(self)

    @property
    def short(self) -> str:
        return self.name

    @classmethod
    def parse(cls, text: str) -> "Modality":
        """
        解析模态名称，接受 rgb/nir/tir 或 R/N/T（大小写不敏感）
        """
        key = text.strip().lower()
        for modality in cls:
            if key in (modality.value, modality.name.lower()):
                return modality
        raise ValueError(f"unknown modality: {text!r}")

    @classmethod
    def parse_pattern(cls, text: str) -> Tuple["Modality", ...]:
        """
        解析缺失模式，例如 "rgb+nir"
        """
        if not text.strip():
            return ()
        parts = [p for p in text.replace(",", "+").split("+") if p.strip()]
        return tuple(sorted({cls.parse(p) for p in parts}, key=lambda m: m.index))


MODALITIES: Tuple[Modality, ...] = (Modality.R, Modality.N, Modality.T)

# 同权重时的优先级 N > T > R
TIE_PREFERENCE = {Modality.N: 2, Modality.T: 1, Modality.R: 0}


def pattern_label(pattern: Iterable[Modality]) -> str:
    """缺失模式的表格标签，如 M(RGB+NIR)"""
    names = [m.value.upper() for m in sorted(pattern, key=lambda m: m.index)]
    return f"M({'+'.join(names)})" if names else "full"


class Branch(str, Enum):
    """
    样本被路由到的融合分支
    """
    CFM = "CFM"
    GFM = "GFM"
    # feed_all 消融：两个分支都参与
    BOTH = "BOTH"
    # 仅一个模态存在，或 baseline 变体
    BYPASS = "BYPASS"


class DegradationKind(str, Enum):
    FLARE = "flare"
    LOW_LIGHT = "low_light"
    NOISE = "noise"


class Exclusion(str, Enum):
    """
    检索评估中的图库排除规则
    """
    SAME_CAMERA_SAME_ID = "same_camera_same_id"
    NONE = "none"


class DominantRule(str, Enum):
    """
    GFM 主导模态打分规则

    paper_literal 是 uncertainty_weighted 的别名
    """
    UNCERTAINTY_WEIGHTED = "uncertainty_weighted"
    INVERSE_UNCERTAINTY = "inverse_uncertainty"

    @classmethod
    def _missing_(cls, value: object) -> Optional["DominantRule"]:
        if isinstance(value, str):
            key = value.strip().lower()
            key = _DOMINANT_RULE_ALIASES.get(key, key)
            for member in cls:
                if member.value == key:
                    return member
        return None


_DOMINANT_RULE_ALIASES = {"paper_literal": DominantRule.UNCERTAINTY_WEIGHTED.value}


class ModalHead(str, Enum):
    """
    模态拼接特征的分类头形式
    """
    CONCAT = "concat"
    PER_MODALITY = "per_modality"


class AblationVariant(str, Enum):
    """
    消融实验变体
    """
    FULL = "full"
    NO_DCDW_RANDOM = "no_dcdw_random"
    FEED_ALL = "feed_all"
    NO_CFM_DROP = "no_cfm_drop"
    NO_GFM_AMPLIFY = "no_gfm_amplify"
    BASELINE = "baseline"
    CFM_ONLY = "cfm_only"
    GFM_ONLY = "gfm_only"

    @property
    def description(self) -> str:
        return _VARIANT_DESCRIPTIONS[self]


_VARIANT_DESCRIPTIONS = {
    AblationVariant.FULL: "DCDW routing + CFM + GFM",
    AblationVariant.NO_DCDW_RANDOM: "random routing (w/o DCDW)",
    AblationVariant.FEED_ALL: "both branches on all samples, averaged",
    AblationVariant.NO_CFM_DROP: "CFM without modality discard",
    AblationVariant.NO_GFM_AMPLIFY: "GFM with amplification frozen at zero",
    AblationVariant.BASELINE: "no DCDW, no fusion (mean of cls tokens)",
    AblationVariant.CFM_ONLY: "DCDW + CFM for every sample",
    AblationVariant.GFM_ONLY: "DCDW + GFM for every sample",
}

DEFAULT_ABLATIONS: Tuple[AblationVariant, ...] = (
    AblationVariant.NO_DCDW_RANDOM,
    AblationVariant.FEED_ALL,
    AblationVariant.NO_CFM_DROP,
    AblationVariant.NO_GFM_AMPLIFY,
    AblationVariant.FULL,
)


class DataSource(str, Enum):
    SYNTHETIC = "synthetic"
    DIRECTORY = "directory"


class SplitBy(str, Enum):
    """
    合成数据划分方式：按样本（闭集）或按身份（开集）
    """
    SAMPLE = "sample"
    IDENTITY = "identity"


class LrPreset(str, Enum):
    WMVEID863 = "wmveid863"
    RGBNT100 = "rgbnt100"
    MSVR310 = "msvr310"
    CUSTOM = "custom"
