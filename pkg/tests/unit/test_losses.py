"""
训练目标单元测试
"""

import math
import unittest
from types import SimpleNamespace

import pytest
import torch

from tests.unit.helpers import tiny_config

from core.errors import InputError, SamplerError
from core.losses import (
    confidence_loss,
    hard_example_hinge,
    id_loss,
    pairwise_distances,
    total_loss,
    triplet_loss,
)
from core.model import build_model


class TestIdLoss(unittest.TestCase):
    """
    标签平滑交叉熵测试类
    """

    def test_confident_logits(self):
        """
        测试 logits [10, -10]、ε=0 时损失约为 2.06e-9
        """
        logits = torch.tensor([[10.0, -10.0]], dtype=torch.float64)
        loss = id_loss(logits, torch.tensor([0]), smoothing=0.0)
        self.assertAlmostEqual(loss.item(), math.log1p(math.exp(-20.0)), delta=1e-13)

    def test_smoothing(self):
        logits = torch.tensor([[10.0, -10.0]], dtype=torch.float64)
        loss = id_loss(logits, torch.tensor([0]), smoothing=0.1)
        expected = 0.95 * math.log1p(math.exp(-20.0)) + 0.05 * (20.0 + math.log1p(math.exp(-20.0)))
        self.assertAlmostEqual(loss.item(), expected, places=10)

    def test_per_head_logits_averaged(self):
        logits = torch.randn(4, 3, 5)
        labels = torch.tensor([0, 1, 2, 3])
        expected = sum(id_loss(logits[:, h], labels) for h in range(3)) / 3
        torch.testing.assert_close(id_loss(logits, labels), expected)

    def test_label_out_of_range(self):
        with self.assertRaises(InputError):
            id_loss(torch.randn(2, 3), torch.tensor([0, 3]))


class TestTripletLoss(unittest.TestCase):
    """
    三元组损失测试类
    """

    def test_hand_example(self):
        """
        测试一维手算样例
        """
        embeddings = torch.tensor([[0.0], [1.0], [3.0], [5.0]], dtype=torch.float64)
        labels = torch.tensor([0, 0, 1, 1])
        loss = triplet_loss(embeddings, labels, margin=0.3)
        self.assertAlmostEqual(loss.item(), 0.075, places=12)

    def test_identical_embeddings_give_margin(self):
        embeddings = torch.ones(4, 8, dtype=torch.float64)
        loss = triplet_loss(embeddings, torch.tensor([0, 0, 1, 1]), margin=0.3)
        self.assertAlmostEqual(loss.item(), 0.3, places=12)

    def test_identical_embeddings_finite_gradient(self):
        embeddings = torch.ones(4, 8, dtype=torch.float64, requires_grad=True)
        triplet_loss(embeddings, torch.tensor([0, 0, 1, 1])).backward()
        self.assertTrue(torch.isfinite(embeddings.grad).all())

    def test_single_identity_batch(self):
        """
        测试只有一个身份的批次
        """
        with self.assertRaises(SamplerError):
            triplet_loss(torch.randn(4, 8), torch.tensor([1, 1, 1, 1]))

    def test_no_repeated_identity(self):
        with self.assertRaises(SamplerError):
            triplet_loss(torch.randn(3, 8), torch.tensor([0, 1, 2]))

    def test_distances(self):
        dist = pairwise_distances(torch.tensor([[0.0, 0.0], [3.0, 4.0]], dtype=torch.float64))
        self.assertAlmostEqual(dist[0, 1].item(), 5.0, places=12)
        self.assertAlmostEqual(dist[0, 0].item(), 1e-6, places=12)

    def test_hinge(self):
        out = hard_example_hinge(torch.tensor([1.0, 3.0]), torch.tensor([2.0, 1.0]), 0.3)
        torch.testing.assert_close(out, torch.tensor([0.0, 2.3]))


class TestTotalLoss(unittest.TestCase):
    """
    总损失测试类
    """

    def setUp(self):
        torch.manual_seed(0)
        self.model = build_model(tiny_config(), n_classes=3).train()
        generator = torch.Generator().manual_seed(0)
        self.images = torch.rand(6, 3, 3, 16, 8, generator=generator)
        self.present = torch.ones(6, 3, dtype=torch.bool)
        self.labels = torch.tensor([0, 0, 1, 1, 2, 2])

    def test_components(self):
        """
        测试总损失等于四个分量之和
        """
        embedding, _ = self.model(self.images, self.present)
        breakdown = total_loss(embedding, self.labels)

        self.assertEqual(set(breakdown.components), {"id_fused", "triplet_fused", "id_modal", "triplet_modal"})
        torch.testing.assert_close(breakdown.total, sum(breakdown.components.values()))
        scalars = breakdown.scalars()
        self.assertIn("total", scalars)
        self.assertIsInstance(scalars["id_fused"], float)

    def test_backward_reaches_confidence_heads(self):
        embedding, _ = self.model(self.images, self.present)
        terms = confidence_loss(embedding, self.labels)
        (total_loss(embedding, self.labels).total + terms["tcp"] + terms["confidence"]).backward()

        head = self.model.dcdw.heads["R"]
        self.assertIsNotNone(head.fc2.weight.grad)
        self.assertIsNotNone(self.model.tcp_head.weight.grad)
        self.assertIsNotNone(self.model.encoder.cls_token.grad)


def test_confidence_loss_ignores_absent_modalities():
    tcp_logits = torch.zeros(2, 3, 4)
    mono = torch.tensor([[0.5, 0.5, 9.0], [0.5, 0.5, 0.5]])
    present = torch.tensor([[True, True, False], [True, True, True]])
    bundle = SimpleNamespace(
        tcp_logits=tcp_logits,
        confidence=SimpleNamespace(mono=mono, present=present),
    )
    terms = confidence_loss(bundle, torch.tensor([0, 1]), scale=2.0)

    # 均匀分类头：真实类别概率 0.25，目标 0.5
    assert terms["confidence"].item() == pytest.approx(0.0)
    assert terms["tcp"].item() == pytest.approx(math.log(4.0))


def test_confidence_target_follows_quality_for_graded_samples():
    """已知退化元数据的样本回归 scale × 模态质量，其余样本回归真实类别概率"""
    tcp_logits = torch.zeros(2, 3, 4)
    present = torch.ones(2, 3, dtype=torch.bool)
    quality = torch.tensor([[1.0, 0.2, 1.0], [1.0, 0.2, 1.0]])
    graded = torch.tensor([True, False])
    mono = torch.tensor([[3.0, 0.6, 3.0], [0.75, 0.75, 0.75]])
    bundle = SimpleNamespace(
        tcp_logits=tcp_logits,
        confidence=SimpleNamespace(mono=mono, present=present),
    )
    terms = confidence_loss(bundle, torch.tensor([0, 1]), scale=3.0, quality=quality, graded=graded)
    assert terms["confidence"].item() == pytest.approx(0.0, abs=1e-6)

    # 第二个样本若按质量监督，误差不为零
    everyone = confidence_loss(bundle, torch.tensor([0, 1]), scale=3.0, quality=quality)
    assert everyone["confidence"].item() > 0.1


def test_confidence_target_has_no_gradient_path():
    tcp_logits = torch.randn(3, 3, 5, requires_grad=True)
    mono = torch.rand(3, 3, requires_grad=True)
    bundle = SimpleNamespace(
        tcp_logits=tcp_logits,
        confidence=SimpleNamespace(mono=mono, present=torch.ones(3, 3, dtype=torch.bool)),
    )
    confidence_loss(bundle, torch.tensor([0, 1, 2]))["confidence"].backward()
    assert tcp_logits.grad is None
    assert mono.grad is not None


if __name__ == '__main__':
    unittest.main()
