"""
检查点存储

检查点 = 模型参数 + 清单（模型哈希、配置哈希、类别数、变体、身份映射、完整配置）
+ 续训状态（epoch、优化器与学习率调度器状态、随机数状态、已完成 epoch 的日志行）。
编码器权重可单独导出，附带列出参数名、形状与 dtype 的 JSON 清单。
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import torch
import torch.nn as nn

from config.settings import RunConfig, config_hash, model_hash
from core.errors import CheckpointError, ConsistencyError
from core.model import DCGModel, build_model
from core.types import AblationVariant

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


@dataclass
class TrainingState:
    """续训所需的优化状态"""
    epoch: int = 0
    optimizer: Optional[Dict[str, Any]] = None
    scheduler: Optional[Dict[str, Any]] = None
    rng: Dict[str, torch.Tensor] = field(default_factory=dict)
    history: List[Dict[str, float]] = field(default_factory=list)

    def to_payload(self) -> Dict[str, Any]:
        return {
            "epoch": self.epoch,
            "optimizer": self.optimizer,
            "scheduler": self.scheduler,
            "rng": self.rng,
            "history": self.history,
        }


@dataclass
class CheckpointBundle:
    state_dict: Dict[str, torch.Tensor]
    manifest: Dict[str, Any]
    training: TrainingState = field(default_factory=TrainingState)

    @property
    def n_classes(self) -> int:
        return int(self.manifest["n_classes"])

    @property
    def variant(self) -> AblationVariant:
        return AblationVariant(self.manifest["variant"])

    @property
    def label_map(self) -> Dict[int, int]:
        return {int(k): int(v) for k, v in self.manifest.get("label_map", {}).items()}

    @property
    def epoch(self) -> int:
        return self.training.epoch

    def config(self) -> RunConfig:
        """检查点保存时的配置（不读取环境变量与配置文件）"""
        return RunConfig.model_validate(self.manifest["config"])


def save_checkpoint(
    model: DCGModel,
    path: PathLike,
    config: RunConfig,
    label_map: Optional[Dict[int, int]] = None,
    extra: Optional[Dict[str, Any]] = None,
    training: Optional[TrainingState] = None,
) -> Path:
    """
    保存检查点

    Args:
        model: 模型
        path: 输出路径
        config: 训练使用的配置
        label_map: 原始身份到类别下标的映射
        extra: 附加到清单的字段（例如最终损失）
        training: 续训状态；缺省时记为 epoch 0、无优化器状态

    Returns:
        Path: 检查点路径
    """
    path = Path(path)
    training = training or TrainingState()
    manifest = {
        "model_hash": model_hash(config, model.n_classes),
        "config_hash": config_hash(config),
        "n_classes": model.n_classes,
        "variant": model.variant.value,
        "label_map": {str(k): v for k, v in (label_map or {}).items()},
        "config": config.resolved(),
        "epoch": training.epoch,
        **(extra or {}),
    }
    state = {k: v.detach().cpu() for k, v in model.state_dict().items()}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save({"state_dict": state, "manifest": manifest, "training": training.to_payload()}, tmp)
    tmp.replace(path)
    logger.info(f"检查点已保存: {path} (epoch={training.epoch}, model_hash={manifest['model_hash']})")
    return path


def load_checkpoint(path: PathLike) -> CheckpointBundle:
    """
    读取检查点

    Raises:
        CheckpointError: 文件不存在或格式不对
    """
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "state_dict" not in payload or "manifest" not in payload:
        raise CheckpointError(f"{path} is not a model checkpoint")
    try:
        training = TrainingState(**(payload.get("training") or {}))
    except TypeError as exc:
        raise CheckpointError(f"{path} has a malformed training state: {exc}") from exc
    return CheckpointBundle(state_dict=payload["state_dict"], manifest=payload["manifest"], training=training)


def restore_model(bundle: CheckpointBundle, config: Optional[RunConfig] = None) -> DCGModel:
    """
    按配置重建模型并载入参数

    Args:
        bundle: 已读取的检查点
        config: 评估使用的配置，缺省使用检查点内的配置

    Raises:
        CheckpointError: 配置的模型哈希与检查点不一致（mismatch=True）
    """
    config = config or bundle.config()
    expected = model_hash(config, bundle.n_classes)
    if expected != bundle.manifest.get("model_hash"):
        raise CheckpointError(
            f"checkpoint model hash {bundle.manifest.get('model_hash')} does not match config ({expected})",
            mismatch=True,
        )
    model = build_model(config, bundle.n_classes, bundle.variant)
    model.load_state_dict(bundle.state_dict)
    model.eval()
    return model


def export_encoder(encoder: nn.Module, path: PathLike) -> Path:
    """
    导出编码器权重与清单 <path>.json
    """
    path = Path(path)
    state = {k: v.detach().cpu() for k, v in encoder.state_dict().items()}
    torch.save(state, path)
    manifest = {
        "parameters": {k: {"shape": list(v.shape), "dtype": str(v.dtype).replace("torch.", "")} for k, v in state.items()},
    }
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    logger.info(f"编码器权重已导出: {path} ({len(state)} tensors)")
    return path


def import_encoder(encoder: nn.Module, path: PathLike) -> nn.Module:
    """
    载入编码器权重；清单与编码器结构不一致时报错

    Raises:
        CheckpointError: 权重或清单缺失
        ConsistencyError: 参数名、形状或 dtype 不一致
    """
    path = Path(path)
    manifest_path = path.with_suffix(".json")
    if not path.is_file() or not manifest_path.is_file():
        raise CheckpointError(f"encoder weights or manifest missing: {path}")
    declared = json.loads(manifest_path.read_text(encoding="utf-8"))["parameters"]
    own = encoder.state_dict()
    if set(declared) != set(own):
        missing = sorted(set(own) - set(declared))
        unexpected = sorted(set(declared) - set(own))
        raise ConsistencyError(f"encoder manifest mismatch: missing={missing}, unexpected={unexpected}")
    for name, tensor in own.items():
        meta = declared[name]
        if list(tensor.shape) != meta["shape"] or str(tensor.dtype).replace("torch.", "") != meta["dtype"]:
            raise ConsistencyError(f"encoder parameter {name}: expected {tuple(tensor.shape)}, manifest {meta}")
    state = torch.load(path, map_location="cpu", weights_only=True)
    encoder.load_state_dict(state)
    logger.info(f"编码器权重已载入: {path}")
    return encoder
