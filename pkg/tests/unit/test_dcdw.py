"""
动态置信度加权单元测试
"""

import math
import unittest

import numpy as np
import pytest
import torch

from tests.unit.helpers import random_features

from core.backbone import TokenFeatures
from core.dcdw import (
    DynamicConfidenceWeighting,
    co_belief_weights,
    holo_confidence,
    safe_holo_confidence,
    uniform_holo,
)
from core.errors import DegenerateInputError, InputError


def closed_form(mono: np.ndarray) -> np.ndarray:
    total = mono.sum()
    co_belief = mono + (total - mono) / total
    exp = np.exp(co_belief - co_belief.max())
    return exp / exp.sum()


class TestConfidenceWeights(unittest.TestCase):
    """
    置信度公式测试类
    """

    def test_worked_example(self):
        """
        测试 M=[2,1,1] 的手算结果
        """
        mono = torch.tensor([[2.0, 1.0, 1.0]], dtype=torch.float64)
        holo = holo_confidence(mono)
        bundle = co_belief_weights(mono, holo)

        torch.testing.assert_close(holo, torch.tensor([[0.5, 0.75, 0.75]], dtype=torch.float64))
        torch.testing.assert_close(bundle.co_belief, torch.tensor([[2.5, 1.75, 1.75]], dtype=torch.float64))
        np.testing.assert_allclose(bundle.weights[0].numpy(), [0.5142, 0.2429, 0.2429], atol=1e-4)

    def test_closed_form_on_random_triples(self):
        """
        测试 1000 组随机单置信度与闭式解一致
        """
        rng = np.random.default_rng(0)
        mono = rng.uniform(0.01, 10.0, (1000, 3))
        tensor = torch.from_numpy(mono)
        weights = co_belief_weights(tensor, holo_confidence(tensor)).weights.numpy()

        expected = np.stack([closed_form(row) for row in mono])
        np.testing.assert_allclose(weights, expected, atol=1e-9)
        np.testing.assert_allclose(weights.sum(axis=1), 1.0, atol=1e-12)
        self.assertTrue((weights > 0).all())

    def test_weight_monotone_in_own_mono(self):
        """
        测试在 [1, 5] 区间内提高某模态单置信度会提高其权重
        """
        rng = np.random.default_rng(1)
        for _ in range(200):
            mono = rng.uniform(1.0, 5.0, 3)
            i = int(rng.integers(3))
            bumped = mono.copy()
            bumped[i] = min(5.0, bumped[i] + rng.uniform(0.01, 1.0))
            if bumped[i] <= mono[i]:
                continue
            self.assertGreater(closed_form(bumped)[i], closed_form(mono)[i])

    def test_degenerate_mono(self):
        """
        测试单置信度全零
        """
        with self.assertRaises(DegenerateInputError):
            holo_confidence(torch.zeros(1, 3))

        present = torch.ones(1, 3, dtype=torch.bool)
        holo = safe_holo_confidence(torch.zeros(1, 3), present)
        torch.testing.assert_close(holo, torch.full((1, 3), 2.0 / 3.0))

    def test_absent_modality(self):
        """
        测试缺失模态的权重为零，其余模态之间归一化
        """
        mono = torch.tensor([[2.0, 1.0, 7.0]], dtype=torch.float64)
        present = torch.tensor([[True, True, False]])
        holo = holo_confidence(mono, present)
        bundle = co_belief_weights(mono, holo, present)

        torch.testing.assert_close(holo, torch.tensor([[1.0 / 3.0, 2.0 / 3.0, 0.0]], dtype=torch.float64))
        self.assertEqual(bundle.weights[0, 2].item(), 0.0)
        self.assertAlmostEqual(bundle.weights.sum().item(), 1.0, places=12)

    def test_single_present_modality(self):
        mono = torch.tensor([[0.0, 3.0, 0.0]])
        present = torch.tensor([[False, True, False]])
        holo = safe_holo_confidence(mono, present)
        bundle = co_belief_weights(mono, holo, present)

        torch.testing.assert_close(bundle.weights, torch.tensor([[0.0, 1.0, 0.0]]))

    def test_no_present_modality(self):
        with self.assertRaises(InputError):
            co_belief_weights(torch.ones(1, 3), torch.ones(1, 3), torch.zeros(1, 3, dtype=torch.bool))

    def test_uniform_holo(self):
        present = torch.tensor([[True, True, True], [True, False, True]])
        torch.testing.assert_close(uniform_holo(present), torch.tensor([[2 / 3, 2 / 3, 2 / 3], [0.5, 0.0, 0.5]]))


class TestDynamicConfidenceWeighting(unittest.TestCase):
    """
    置信度模块测试类
    """

    def setUp(self):
        torch.manual_seed(0)
        self.module = DynamicConfidenceWeighting(16, 2)

    def test_forward_shapes(self):
        features = random_features(4, 9, 16)
        bundle = self.module(features, torch.ones(4, 3, dtype=torch.bool))

        self.assertEqual(len(bundle), 4)
        self.assertEqual(tuple(bundle.weights.shape), (4, 3))
        self.assertTrue((bundle.mono > 0).all())
        torch.testing.assert_close(bundle.weights.sum(dim=-1), torch.ones(4))
        self.assertEqual(set(bundle.row(0)), {"mono", "holo", "co_belief", "weights"})

    def test_zeroed_heads_give_ln2_and_uniform_weights(self):
        """
        测试置信度头参数全零时 M = ln 2、权重均匀
        """
        for head in self.module.heads.values():
            for param in head.parameters():
                torch.nn.init.zeros_(param)
        bundle = self.module(random_features(2, 9, 16), torch.ones(2, 3, dtype=torch.bool))

        torch.testing.assert_close(bundle.mono, torch.full((2, 3), math.log(2.0)))
        torch.testing.assert_close(bundle.weights, torch.full((2, 3), 1.0 / 3.0))

    def test_separate_heads_per_modality(self):
        self.assertEqual(set(self.module.heads.keys()), {"R", "N", "T"})
        self.assertIsNot(self.module.heads["R"], self.module.heads["N"])

    def test_empty_patches(self):
        features = random_features(1, 1, 16)
        with self.assertRaises(InputError):
            self.module(features, torch.ones(1, 3, dtype=torch.bool))


def test_weights_gradcheck():
    mono = torch.rand(3, 3, dtype=torch.float64) + 0.5
    mono.requires_grad_(True)

    def weights(m):
        return co_belief_weights(m, holo_confidence(m)).weights

    assert torch.autograd.gradcheck(weights, (mono,))


@pytest.mark.parametrize("mono, expected", [
    ([1.0, 1.0, 1.0], [1 / 3, 1 / 3, 1 / 3]),
    ([4.0, 0.0, 0.0], None),
])
def test_weights_examples(mono, expected):
    tensor = torch.tensor([mono], dtype=torch.float64)
    weights = co_belief_weights(tensor, holo_confidence(tensor)).weights[0].numpy()
    if expected is None:
        expected = closed_form(np.array(mono))
    np.testing.assert_allclose(weights, expected, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_weights_invariant_to_co_belief_shift(seed):
    """co-belief 整体平移不改变 softmax 权重"""
    generator = torch.Generator().manual_seed(seed)
    mono = torch.rand(8, 3, generator=generator, dtype=torch.float64) * 5 + 0.1
    holo = holo_confidence(mono)
    shift = float(torch.randn(1, generator=generator, dtype=torch.float64)) * 10
    base = co_belief_weights(mono, holo).weights
    shifted = co_belief_weights(mono + shift, holo).weights
    torch.testing.assert_close(base, shifted, rtol=0, atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_holo_sums_to_present_count_minus_one(seed):
    """三个模态存在时 holo 之和为 2，两个存在时为 1"""
    generator = torch.Generator().manual_seed(seed)
    mono = torch.rand(16, 3, generator=generator, dtype=torch.float64) * 5 + 0.01
    full = holo_confidence(mono)
    torch.testing.assert_close(full.sum(dim=-1), torch.full((16,), 2.0, dtype=torch.float64))

    present = torch.ones(16, 3, dtype=torch.bool)
    present[:, seed % 3] = False
    partial = holo_confidence(mono, present)
    torch.testing.assert_close(partial.sum(dim=-1), torch.ones(16, dtype=torch.float64))


def test_module_gradcheck_through_attention_and_heads():
    """token -> cls 对 patch 的注意力 -> mono 头 -> holo -> 权重 的整条链路"""
    torch.manual_seed(0)
    module = DynamicConfidenceWeighting(8, 2).double()
    features = random_features(2, 5, 8, seed=1, dtype=torch.float64)
    inputs = tuple(f.tokens.detach().clone().requires_grad_(True) for f in features)
    present = torch.ones(2, 3, dtype=torch.bool)

    def weights(*tokens):
        rebuilt = [TokenFeatures.from_tokens(t, f.modality) for t, f in zip(tokens, features)]
        return module(rebuilt, present).weights

    assert torch.autograd.gradcheck(weights, inputs)


if __name__ == '__main__':
    unittest.main()
