"""
运行配置模块

集中管理编码器、融合模块、损失、优化器、数据与评估配置。
配置来源优先级：显式覆盖（命令行参数） > DCG_* 环境变量（.env 由入口通过 python-dotenv 载入） > TOML 配置文件 > 默认值
"""

import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import (
    BaseSettings,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
    TomlConfigSettingsSource,
)

from core.errors import ConfigurationError
from core.types import (
    AblationVariant,
    DataSource,
    DegradationKind,
    DominantRule,
    Exclusion,
    LrPreset,
    ModalHead,
    SplitBy,
)

logger = logging.getLogger(__name__)

# 各数据集的初始学习率
LR_PRESETS: Dict[LrPreset, float] = {
    LrPreset.WMVEID863: 2.5e-4,
    LrPreset.RGBNT100: 1e-5,
    LrPreset.MSVR310: 3.5e-3,
}

# 不影响数值结果的字段，不参与配置哈希
_HASH_EXCLUDE = {"output_dir", "log_level"}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class EncoderConfig(_Section):
    """
    共享视觉编码器配置
    """
    image_height: int = Field(64, ge=1)
    image_width: int = Field(32, ge=1)
    patch_size: int = Field(8, ge=1)
    embed_dim: int = Field(64, ge=8)
    depth: int = Field(2, ge=1)
    heads: int = Field(4, ge=1)
    mlp_ratio: float = Field(2.0, gt=0)
    dropout_rate: float = Field(0.1, ge=0.0, lt=1.0)
    freeze: bool = False

    @model_validator(mode="after")
    def _check_geometry(self) -> "EncoderConfig":
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValueError(
                f"image {self.image_height}x{self.image_width} is not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by heads {self.heads}")
        return self

    @property
    def grid(self) -> Tuple[int, int]:
        return self.image_height // self.patch_size, self.image_width // self.patch_size

    @property
    def num_patches(self) -> int:
        grid_h, grid_w = self.grid
        return grid_h * grid_w


class FusionConfig(_Section):
    """
    DCDW / CFM / GFM / 路由门控超参数
    """
    tau_init: float = Field(0.25, gt=0.0, lt=1.0)
    retention_hidden: int = Field(8, ge=1)
    retention_temperature: float = Field(0.05, gt=0.0)
    beta_init: float = Field(0.35, gt=0.0, lt=1.0)
    beta_min: float = Field(0.05, gt=0.0, lt=1.0)
    beta_max: float = Field(0.95, gt=0.0, lt=1.0)
    mc_passes: int = Field(8, ge=2)
    mc_dropout: float = Field(0.1, ge=0.0, lt=1.0)
    mc_seed: int = 0
    dominant_rule: DominantRule = DominantRule.UNCERTAINTY_WEIGHTED
    confidence_scale: float = Field(3.0, gt=0.0)

    @field_validator("dominant_rule", mode="before")
    @classmethod
    def _rule_alias(cls, value: Any) -> Any:
        # 别名在枚举的 _missing_ 中解析
        return DominantRule(value) if isinstance(value, str) else value

    @model_validator(mode="after")
    def _check_beta(self) -> "FusionConfig":
        if not self.beta_min < self.beta_init < self.beta_max:
            raise ValueError(
                f"beta_init {self.beta_init} must lie inside ({self.beta_min}, {self.beta_max})"
            )
        return self


class LossConfig(_Section):
    label_smoothing: float = Field(0.1, ge=0.0, lt=1.0)
    triplet_margin: float = Field(0.3, ge=0.0)
    modal_head: ModalHead = ModalHead.CONCAT
    confidence_weight: float = Field(1.0, ge=0.0)
    beta_weight: float = Field(1.0, ge=0.0)


class OptimConfig(_Section):
    """
    优化器配置（Adam），学习率可取数据集预设

    学习率按 step 线性预热 warmup_epochs 轮后余弦衰减到 min_lr_ratio 倍；
    分类头与置信度头使用 head_lr_factor 倍学习率，门控 beta 单独使用 beta_lr 且不做权重衰减
    """
    lr_preset: LrPreset = LrPreset.WMVEID863
    lr: float = Field(1e-3, gt=0.0)
    weight_decay: float = Field(1e-4, ge=0.0)
    epochs: int = Field(30, ge=0)
    warmup_epochs: int = Field(1, ge=0)
    min_lr_ratio: float = Field(0.01, ge=0.0, le=1.0)
    head_lr_factor: float = Field(10.0, gt=0.0)
    beta_lr: float = Field(1e-2, gt=0.0)
    identities_per_batch: int = Field(8, ge=2)
    instances_per_identity: int = Field(4, ge=2)

    @property
    def learning_rate(self) -> float:
        if self.lr_preset == LrPreset.CUSTOM:
            return self.lr
        return LR_PRESETS[self.lr_preset]

    @property
    def batch_size(self) -> int:
        return self.identities_per_batch * self.instances_per_identity


class SynthConfig(_Section):
    """
    合成多模态数据集配置
    """
    n_identities: int = Field(20, ge=0)
    samples_per_identity: int = Field(10, ge=1)
    image_height: int = Field(64, ge=8)
    image_width: int = Field(32, ge=8)
    n_cameras: int = Field(4, ge=1)
    balanced_fraction: float = Field(0.5, ge=0.0, le=1.0)
    degradation_kinds: List[DegradationKind] = Field(
        default_factory=lambda: [DegradationKind.FLARE, DegradationKind.LOW_LIGHT, DegradationKind.NOISE]
    )
    severity_min: float = Field(0.7, ge=0.0, le=1.0)
    severity_max: float = Field(1.0, ge=0.0, le=1.0)
    seed: int = 0

    @field_validator("degradation_kinds")
    @classmethod
    def _non_empty_menu(cls, value: List[DegradationKind]) -> List[DegradationKind]:
        if not value:
            raise ValueError("degradation menu must not be empty")
        return value

    @model_validator(mode="after")
    def _check_severity(self) -> "SynthConfig":
        if self.severity_min > self.severity_max:
            raise ValueError("severity_min must not exceed severity_max")
        return self


class AugmentConfig(_Section):
    enabled: bool = True
    flip_p: float = Field(0.5, ge=0.0, le=1.0)
    padding: int = Field(10, ge=0)
    erasing_p: float = Field(0.5, ge=0.0, le=1.0)


class DataConfig(_Section):
    source: DataSource = DataSource.SYNTHETIC
    root: Optional[str] = None
    train_split: str = "train"
    query_split: str = "query"
    gallery_split: str = "gallery"
    split_by: SplitBy = SplitBy.SAMPLE
    train_fraction: float = Field(0.6, gt=0.0, lt=1.0)
    query_per_identity: int = Field(1, ge=1)
    synth: SynthConfig = Field(default_factory=SynthConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)


class EvalConfig(_Section):
    exclusion: Exclusion = Exclusion.SAME_CAMERA_SAME_ID
    ks: List[int] = Field(default_factory=lambda: [1, 5, 10])
    batch_size: int = Field(64, ge=1)

    @field_validator("ks")
    @classmethod
    def _sorted_ks(cls, value: List[int]) -> List[int]:
        if not value or any(k < 1 for k in value):
            raise ValueError("ks must be a non-empty list of positive ranks")
        return sorted(set(value))


# load_settings 设置，settings_customise_sources 读取
_config_file: Optional[Path] = None


class RunConfig(BaseSettings):
    """
    一次运行的完整配置
    """

    model_config = SettingsConfigDict(
        env_prefix="DCG_",
        env_nested_delimiter="__",
        extra="forbid",
    )

    seed: int = 0
    device: str = "cpu"
    output_dir: str = "runs/default"
    log_level: str = "INFO"
    variant: AblationVariant = AblationVariant.FULL

    encoder: EncoderConfig = Field(default_factory=EncoderConfig)
    fusion: FusionConfig = Field(default_factory=FusionConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: Type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> Tuple[PydanticBaseSettingsSource, ...]:
        sources: List[PydanticBaseSettingsSource] = [init_settings, env_settings, dotenv_settings]
        if _config_file is not None:
            sources.append(TomlConfigSettingsSource(settings_cls, toml_file=_config_file))
        return tuple(sources)

    def validate(self) -> tuple:
        """
        跨字段的语义校验

        Returns:
            tuple: (是否有效, 错误消息列表)
        """
        errors = []

        if self.data.source == DataSource.DIRECTORY:
            if not self.data.root:
                errors.append("data.root is required when data.source = directory")
            elif not os.path.isdir(self.data.root):
                errors.append(f"data.root does not exist: {self.data.root}")
        else:
            synth = self.data.synth
            if synth.n_identities == 0:
                errors.append("data.synth.n_identities must be positive")
            elif self.optim.identities_per_batch > synth.n_identities:
                errors.append(
                    f"optim.identities_per_batch ({self.optim.identities_per_batch}) exceeds "
                    f"identity count ({synth.n_identities})"
                )

        if self.fusion.beta_min >= self.fusion.beta_max:
            errors.append("fusion.beta_min must be below fusion.beta_max")

        if not isinstance(logging.getLevelName(self.log_level.upper()), int):
            errors.append(f"unknown log_level: {self.log_level}")

        return (len(errors) == 0, errors)

    def resolved(self) -> Dict[str, Any]:
        """JSON 形式的完整配置"""
        return self.model_dump(mode="json")


def _canonical_hash(payload: Dict[str, Any]) -> str:
    text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def config_hash(config: RunConfig) -> str:
    """
    配置哈希，写入每个输出文件
    """
    payload = {k: v for k, v in config.resolved().items() if k not in _HASH_EXCLUDE}
    return _canonical_hash(payload)


def model_hash(config: RunConfig, n_classes: int) -> str:
    """
    只覆盖结构相关字段的哈希，用于检查点兼容性检查
    """
    payload = {
        "encoder": config.encoder.model_dump(mode="json"),
        "fusion": config.fusion.model_dump(mode="json"),
        "modal_head": config.loss.modal_head.value,
        "n_classes": n_classes,
    }
    return _canonical_hash(payload)


def _nest(overrides: Dict[str, Any]) -> Dict[str, Any]:
    """把 "optim.epochs" 形式的键展开为嵌套字典"""
    nested: Dict[str, Any] = {}
    for dotted, value in overrides.items():
        if value is None:
            continue
        node = nested
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
    return nested


def _deep_merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def apply_overrides(config: RunConfig, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    在已有配置上应用点号键覆盖，不读取环境变量与配置文件

    Raises:
        ConfigurationError: 覆盖后的配置不合法
    """
    nested = _nest(overrides or {})
    if not nested:
        return config
    try:
        return RunConfig.model_validate(_deep_merge(config.resolved(), nested))
    except ValueError as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from exc


# 全局配置单例
_settings: Optional[RunConfig] = None


def load_settings(config_path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    从 TOML 文件、环境变量和显式覆盖加载配置，并替换全局单例

    Args:
        config_path: TOML 配置文件路径，可为空
        overrides: 点号分隔键到值的映射，例如 {"optim.epochs": 0}

    Returns:
        RunConfig: 配置实例
    """
    global _config_file, _settings

    path = Path(config_path) if config_path else None
    if path is not None and not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")

    _config_file = path
    try:
        _settings = RunConfig(**_nest(overrides or {}))
    except ValueError as exc:
        # tomllib.TOMLDecodeError 与 pydantic.ValidationError 都是 ValueError
        raise ConfigurationError(f"invalid configuration: {exc}") from exc
    finally:
        _config_file = None

    logger.debug(f"配置已加载: file={path}, hash={config_hash(_settings)}")
    return _settings


def get_settings() -> RunConfig:
    """
    获取全局配置单例

    Returns:
        RunConfig: 配置实例
    """
    global _settings

    if _settings is None:
        _settings = load_settings()

    return _settings


def reload_settings() -> RunConfig:
    """
    重新加载配置（仅环境变量与默认值）

    Returns:
        RunConfig: 配置实例
    """
    global _settings
    _settings = None
    return get_settings()
