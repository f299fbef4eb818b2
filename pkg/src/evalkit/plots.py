"""
静态图表：损失曲线、路由比例曲线、CMC 曲线、权重分布直方图
"""

import logging
from pathlib import Path
from typing import Dict, List, Mapping, Sequence, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

LOSS_KEYS = ("loss", "id_fused", "triplet_fused", "id_modal", "triplet_modal", "confidence")


def _save(fig, path: PathLike) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
    logger.debug(f"图表已保存: {path}")
    return path


def plot_loss_curve(rows: Sequence[Mapping[str, float]], path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [row["epoch"] for row in rows]
    for key in LOSS_KEYS:
        if rows and key in rows[0]:
            ax.plot(epochs, [row[key] for row in rows], label=key, marker="o" if len(rows) < 20 else None)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_routing_fraction(rows: Sequence[Mapping[str, float]], path: PathLike) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [row["epoch"] for row in rows]
    ax.plot(epochs, [row["frac_cfm"] for row in rows], label="CFM")
    ax.plot(epochs, [row["frac_gfm"] for row in rows], label="GFM")
    ax.plot(epochs, [row["beta"] for row in rows], label="beta", linestyle="--")
    ax.set_xlabel("epoch")
    ax.set_ylim(0.0, 1.0)
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_cmc(curves: Dict[str, Mapping[int, float]], path: PathLike) -> Path:
    """
    Args:
        curves: 标签 → {K: CMC@K}
    """
    fig, ax = plt.subplots(figsize=(5, 4))
    for label, cmc in curves.items():
        ks = sorted(cmc)
        ax.plot(ks, [cmc[k] for k in ks], marker="o", label=label)
    ax.set_xlabel("rank K")
    ax.set_ylabel("CMC@K")
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_weight_histogram(max_weights: Sequence[float], branches: Sequence[str], beta: float, path: PathLike) -> Path:
    """每个样本最大模态权重的分布，按路由分支着色，竖线为 beta"""
    fig, ax = plt.subplots(figsize=(6, 4))
    weights = np.asarray(max_weights, dtype=np.float64)
    labels: List[str] = sorted(set(branches))
    bins = np.linspace(1.0 / 3.0, 1.0, 21)
    for label in labels:
        picked = weights[[b == label for b in branches]]
        ax.hist(picked, bins=bins, alpha=0.6, label=label)
    ax.axvline(beta, color="black", linestyle="--", label=f"beta={beta:.3f}")
    ax.set_xlabel("max modality weight")
    ax.set_ylabel("samples")
    ax.legend()
    return _save(fig, path)
