"""
训练服务

每个 epoch 按 P×K 取批次，优化
total_loss + confidence_weight * (tcp + confidence) + beta_weight * beta_loss。
学习率先线性预热、再余弦衰减，逐步更新；每个 epoch 结束都会覆盖写一次检查点，
可以从检查点续训。
"""

import logging
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union

import numpy as np
import torch
from torch.optim.lr_scheduler import LambdaLR
from torch.utils.data import DataLoader
from tqdm import tqdm

from config.settings import RunConfig, config_hash, model_hash
from core.errors import CheckpointError, SamplerError
from core.losses import confidence_loss, total_loss
from core.model import DCGModel, build_model
from core.types import AblationVariant, Branch
from datakit.splits import DatasetSplits
from datakit.torch_data import JointAugment, MultiModalDataset, PKSampler
from evalkit.plots import plot_loss_curve, plot_routing_fraction
from infrastructure.artifacts import CsvLog
from infrastructure.checkpoint import CheckpointBundle, TrainingState, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

LOG_COLUMNS = [
    "epoch", "loss", "id_fused", "triplet_fused", "id_modal", "triplet_modal",
    "tcp", "confidence", "beta_loss", "frac_cfm", "frac_gfm", "beta", "lr",
]

PathLike = Union[str, Path]


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def warmup_cosine(total_steps: int, warmup_steps: int, min_ratio: float) -> Callable[[int], float]:
    """
    LambdaLR 的倍率函数：前 warmup_steps 步线性升到 1，之后余弦降到 min_ratio

    Args:
        total_steps: 总步数
        warmup_steps: 预热步数，0 表示不预热
        min_ratio: 最终学习率与初始学习率之比

    Returns:
        Callable[[int], float]: step -> 倍率
    """
    def factor(step: int) -> float:
        if step < warmup_steps:
            return (step + 1) / warmup_steps
        span = max(1, total_steps - warmup_steps)
        progress = min(1.0, (step - warmup_steps) / span)
        return min_ratio + (1.0 - min_ratio) * 0.5 * (1.0 + math.cos(math.pi * progress))

    return factor


@dataclass
class TrainResult:
    model: DCGModel
    label_map: Dict[int, int]
    rows: List[Dict[str, float]] = field(default_factory=list)
    checkpoint: Optional[Path] = None
    start_epoch: int = 1

    @property
    def final_loss(self) -> Optional[float]:
        return self.rows[-1]["loss"] if self.rows else None


class Trainer:
    """
    训练服务

    Adam 的参数分三组：主体用 learning_rate；分类头与置信度头放大 head_lr_factor 倍；
    beta 单独使用 beta_lr 且不做权重衰减。每次更新后截断 beta，
    每个 epoch 向 CSV 日志追加一行并保存带优化器状态的检查点。
    """

    def __init__(self, config: RunConfig, output_dir: PathLike, variant: Optional[AblationVariant] = None):
        self.config = config
        self.output_dir = Path(output_dir)
        self.variant = variant or config.variant
        self.config_hash = config_hash(config)
        self.device = torch.device(config.device)

    def _loader(self, splits: DatasetSplits) -> DataLoader:
        enc = self.config.encoder
        augment_cfg = self.config.data.augment
        augment = JointAugment(augment_cfg, enc.image_height, enc.image_width) if augment_cfg.enabled else None
        label_map = splits.label_map
        dataset = MultiModalDataset(splits.train, enc.image_height, enc.image_width, label_map, augment)
        optim = self.config.optim
        self.sampler = PKSampler(
            [label_map[r.identity] for r in splits.train],
            optim.identities_per_batch,
            optim.instances_per_identity,
            seed=self.config.seed,
        )
        return DataLoader(dataset, batch_size=optim.batch_size, sampler=self.sampler, num_workers=0, drop_last=True)

    def build_optimizer(self, model: DCGModel) -> torch.optim.Optimizer:
        optim = self.config.optim
        groups = model.parameter_groups()
        param_groups = [
            {"params": groups["body"], "lr": optim.learning_rate, "weight_decay": optim.weight_decay},
            {"params": groups["heads"], "lr": optim.learning_rate * optim.head_lr_factor,
             "weight_decay": optim.weight_decay},
            {"params": groups["gate"], "lr": optim.beta_lr, "weight_decay": 0.0},
        ]
        return torch.optim.Adam([g for g in param_groups if g["params"]])

    def build_scheduler(self, optimizer: torch.optim.Optimizer, steps_per_epoch: int) -> LambdaLR:
        optim = self.config.optim
        total = max(1, optim.epochs * steps_per_epoch)
        warmup = min(total, optim.warmup_epochs * steps_per_epoch)
        return LambdaLR(optimizer, warmup_cosine(total, warmup, optim.min_lr_ratio))

    def _step(
        self,
        model: DCGModel,
        optimizer: torch.optim.Optimizer,
        scheduler: LambdaLR,
        batch: Dict[str, torch.Tensor],
    ) -> Dict[str, float]:
        loss_cfg = self.config.loss
        images = batch["images"].to(self.device)
        present = batch["present"].to(self.device)
        labels = batch["label"].to(self.device)
        quality = batch["quality"].to(self.device)
        graded = batch["graded"].to(self.device)

        bundle, outcomes = model(images, present)
        breakdown = total_loss(bundle, labels, loss_cfg.label_smoothing, loss_cfg.triplet_margin)
        confidence = confidence_loss(bundle, labels, self.config.fusion.confidence_scale, quality, graded)
        degraded = (quality < 1.0).any(dim=-1)
        beta_loss = model.gate.surrogate_loss(bundle.confidence.weights, present.to(torch.bool), degraded, graded)
        objective = (
            breakdown.total
            + loss_cfg.confidence_weight * (confidence["tcp"] + confidence["confidence"])
            + loss_cfg.beta_weight * beta_loss
        )

        optimizer.zero_grad()
        objective.backward()
        optimizer.step()
        scheduler.step()
        model.after_step()

        stats = breakdown.scalars()
        stats.update({name: float(value.detach()) for name, value in confidence.items()})
        stats["beta_loss"] = float(beta_loss.detach())
        stats["loss"] = float(objective.detach())
        stats["frac_cfm"] = sum(o.branch in (Branch.CFM, Branch.BOTH) for o in outcomes) / len(outcomes)
        stats["frac_gfm"] = sum(o.branch in (Branch.GFM, Branch.BOTH) for o in outcomes) / len(outcomes)
        return stats

    def _resume(
        self,
        bundle: CheckpointBundle,
        splits: DatasetSplits,
        model: DCGModel,
        optimizer: torch.optim.Optimizer,
        scheduler: LambdaLR,
    ) -> Tuple[int, List[Dict[str, float]]]:
        """
        从检查点恢复模型、优化器、调度器与随机数状态

        Returns:
            (已完成的 epoch 数, 已完成 epoch 的日志行)

        Raises:
            CheckpointError: 模型结构、变体或身份映射与当前运行不一致（mismatch=True）
        """
        expected = model_hash(self.config, splits.n_classes)
        if bundle.manifest.get("model_hash") != expected:
            raise CheckpointError(
                f"checkpoint model hash {bundle.manifest.get('model_hash')} does not match config ({expected})",
                mismatch=True,
            )
        if bundle.variant != self.variant or bundle.label_map != splits.label_map:
            raise CheckpointError("checkpoint variant or identity map differs from this run", mismatch=True)

        state = bundle.training
        model.load_state_dict(bundle.state_dict)
        if state.optimizer is not None:
            optimizer.load_state_dict(state.optimizer)
        if state.scheduler is not None:
            scheduler.load_state_dict(state.scheduler)
        if "torch" in state.rng:
            torch.set_rng_state(state.rng["torch"])
        if "route" in state.rng:
            model.set_route_rng_state(state.rng["route"])
        logger.info(f"从检查点续训: epoch={state.epoch}, beta={model.gate.value:.3f}")
        return state.epoch, [dict(row) for row in state.history]

    def _save(
        self,
        model: DCGModel,
        optimizer: torch.optim.Optimizer,
        scheduler: LambdaLR,
        label_map: Dict[int, int],
        epoch: int,
        rows: List[Dict[str, float]],
    ) -> Path:
        training = TrainingState(
            epoch=epoch,
            optimizer=optimizer.state_dict(),
            scheduler=scheduler.state_dict(),
            rng={"torch": torch.get_rng_state(), "route": model.route_rng_state()},
            history=rows,
        )
        extra = {"final_loss": rows[-1]["loss"] if rows else None, "trainable_params": model.trainable_parameters()}
        return save_checkpoint(model, self.output_dir / "checkpoint.pt", self.config, label_map, extra, training)

    def fit(self, splits: DatasetSplits, resume_from: Optional[PathLike] = None) -> TrainResult:
        """
        在 splits.train 上训练，向输出目录写 checkpoint.pt、train_log.csv 与损失/路由曲线

        Args:
            splits: 数据划分
            resume_from: 续训的检查点；从其记录的 epoch 之后继续，日志保留已完成的行

        Returns:
            TrainResult

        Raises:
            SamplerError: 一个完整的 P×K 批次都取不出
            CheckpointError: 续训检查点缺失或与当前运行不一致
        """
        seed_everything(self.config.seed)
        self.output_dir.mkdir(parents=True, exist_ok=True)
        optim = self.config.optim

        model = build_model(self.config, splits.n_classes, self.variant).to(self.device)
        loader = self._loader(splits)
        if optim.epochs > 0 and len(loader) == 0:
            raise SamplerError(
                f"no complete P x K batch can be drawn (P={optim.identities_per_batch}, K={optim.instances_per_identity})"
            )

        optimizer = self.build_optimizer(model)
        scheduler = self.build_scheduler(optimizer, len(loader))
        label_map = splits.label_map

        done, rows = 0, []
        if resume_from is not None:
            done, rows = self._resume(load_checkpoint(resume_from), splits, model, optimizer, scheduler)
            if done >= optim.epochs:
                logger.warning(f"检查点已完成 {done} 个 epoch，不少于配置的 {optim.epochs}，不再训练")

        log = CsvLog(self.output_dir / "train_log.csv", LOG_COLUMNS, self.config_hash)
        for row in rows:
            log.append(row)

        checkpoint: Optional[Path] = None
        for epoch in range(done + 1, optim.epochs + 1):
            self.sampler.set_epoch(epoch)
            model.train()
            totals: Dict[str, float] = {}
            steps = 0
            progress = tqdm(loader, desc=f"epoch {epoch}/{optim.epochs}", leave=False,
                            disable=not logger.isEnabledFor(logging.INFO))
            for batch in progress:
                stats = self._step(model, optimizer, scheduler, batch)
                for key, value in stats.items():
                    totals[key] = totals.get(key, 0.0) + value
                steps += 1
                progress.set_postfix(loss=f"{stats['loss']:.4f}", beta=f"{model.gate.value:.3f}")

            row = {key: value / steps for key, value in totals.items()}
            row.update({"epoch": epoch, "beta": model.gate.value, "lr": optimizer.param_groups[0]["lr"]})
            rows.append(row)
            log.append(row)
            checkpoint = self._save(model, optimizer, scheduler, label_map, epoch, rows)
            logger.info(
                f"epoch {epoch} 完成: loss={row['loss']:.4f}, CFM={row['frac_cfm']:.2f}, "
                f"GFM={row['frac_gfm']:.2f}, beta={row['beta']:.3f}"
            )

        if checkpoint is None:
            checkpoint = self._save(model, optimizer, scheduler, label_map, done, rows)
        if rows:
            plot_loss_curve(rows, self.output_dir / "loss_curve.png")
            plot_routing_fraction(rows, self.output_dir / "routing_fraction.png")
        return TrainResult(model=model, label_map=label_map, rows=rows, checkpoint=checkpoint, start_epoch=done + 1)
