"""
引导融合模块单元测试
"""

import unittest

import pytest
import torch

from tests.unit.helpers import random_features

from config.settings import FusionConfig
from core.backbone import TokenFeatures
from core.dcdw import ConfidenceBundle, DynamicConfidenceWeighting
from core.errors import ConfigurationError, InputError
from core.gfm import (
    AmplificationFactors,
    DiscrepancyProcessor,
    GuidanceFusion,
    GuidanceFusionModule,
    MCDropoutEstimator,
    amplify_dominant,
    epistemic_uncertainty,
    guidance_attention,
    guide_auxiliary,
    select_dominant,
    uncertainty_from_passes,
)
from core.types import DominantRule, Modality

R, N, T = Modality.R, Modality.N, Modality.T


def fixed_bundle(weights, present=None) -> ConfidenceBundle:
    w = torch.tensor(weights, dtype=torch.float32)
    present = torch.ones_like(w, dtype=torch.bool) if present is None else torch.tensor(present)
    zeros = torch.zeros_like(w)
    return ConfidenceBundle(mono=zeros, holo=zeros, co_belief=zeros, weights=w, present=present)


class TestUncertainty(unittest.TestCase):
    """
    MC dropout 不确定性测试类
    """

    def setUp(self):
        torch.manual_seed(0)
        self.path = DynamicConfidenceWeighting(16, 2).eval()
        self.features = random_features(5, 9, 16, seed=3)

    def test_two_passes_example(self):
        """
        测试两次前向 [0] 与 [2] 的总体方差为 1
        """
        passes = torch.tensor([[[0.0]], [[2.0]]])
        self.assertEqual(uncertainty_from_passes(passes).tolist(), [1.0])

    def test_requires_two_passes(self):
        with self.assertRaises(ConfigurationError):
            MCDropoutEstimator(passes=1)
        with self.assertRaises(ConfigurationError):
            MCDropoutEstimator(passes=4, dropout_rate=1.0)

    def test_deterministic(self):
        """
        测试同一输入两次估计完全一致，不同模态使用不同掩码
        """
        estimator = MCDropoutEstimator(passes=8, dropout_rate=0.3, seed=5)
        rgb, nir = self.features[0], self.features[1]
        self.assertTrue(torch.equal(estimator(self.path, nir), estimator(self.path, nir)))
        relabelled = TokenFeatures(nir.cls, nir.patches, Modality.T)
        self.assertFalse(torch.equal(estimator(self.path, nir), estimator(self.path, relabelled)))
        self.assertEqual(tuple(estimator(self.path, rgb).shape), (5,))

    def test_independent_of_batch(self):
        """
        测试样本的估计不依赖同批次的其他样本
        """
        estimator = MCDropoutEstimator(passes=6, dropout_rate=0.2, seed=0)
        full = self.features[0]
        single = TokenFeatures(full.cls[2:3], full.patches[2:3], full.modality)
        torch.testing.assert_close(estimator(self.path, full)[2:3], estimator(self.path, single))

    def test_zero_dropout_zero_uncertainty(self):
        estimator = MCDropoutEstimator(passes=4, dropout_rate=0.0)
        torch.testing.assert_close(estimator(self.path, self.features[0]), torch.zeros(5), atol=1e-12, rtol=0)

    def test_variance_comes_from_learned_path(self):
        """
        测试不确定性由置信度头决定：头的输出与输入无关时方差为零
        """
        estimator = MCDropoutEstimator(passes=8, dropout_rate=0.3, seed=1)
        self.assertTrue((estimator(self.path, self.features[0]) > 0).all())

        with torch.no_grad():
            self.path.heads["R"].fc1.weight.zero_()
        torch.testing.assert_close(estimator(self.path, self.features[0]), torch.zeros(5), atol=1e-12, rtol=0)
        self.assertTrue((estimator(self.path, self.features[1]) > 0).all())

    def test_does_not_touch_gradients(self):
        features = random_features(2, 9, 16, seed=4)
        estimator = MCDropoutEstimator(passes=4, dropout_rate=0.2)
        out = estimator(self.path, features[2])
        self.assertFalse(out.requires_grad)

    def test_epistemic_uncertainty_uses_modality_offset(self):
        tokens = torch.randn(2, 9, 16)
        rgb = epistemic_uncertainty(TokenFeatures.from_tokens(tokens, R), self.path, passes=8, dropout_rate=0.3)
        nir = epistemic_uncertainty(TokenFeatures.from_tokens(tokens, N), self.path, passes=8, dropout_rate=0.3)
        self.assertEqual(tuple(rgb.shape), (2,))
        self.assertTrue((rgb >= 0).all())
        self.assertFalse(torch.equal(rgb, nir))


class TestDominantSelection(unittest.TestCase):
    """
    主导模态选择测试类
    """

    def test_worked_example(self):
        """
        测试 U=[0.2,0.4,0.1]、W=[0.5,0.3,0.2] 时主导为 N
        """
        selection = select_dominant([0.2, 0.4, 0.1], [0.5, 0.3, 0.2])

        self.assertEqual(selection.dominant, N)
        self.assertEqual(selection.auxiliaries, (R, T))
        self.assertAlmostEqual(selection.score[1], 0.12)

    def test_inverse_uncertainty_rule(self):
        selection = select_dominant([0.2, 0.4, 0.1], [0.5, 0.3, 0.2], rule=DominantRule.INVERSE_UNCERTAINTY)
        self.assertEqual(selection.dominant, R)

    def test_ties(self):
        """
        测试同分时先比较权重，再按 N > T > R
        """
        self.assertEqual(select_dominant([0.0, 0.0, 0.0], [0.5, 0.3, 0.2]).dominant, R)
        self.assertEqual(select_dominant([0.0, 0.0, 0.0], [0.2, 0.4, 0.4]).dominant, N)
        self.assertEqual(select_dominant([1.0, 0.0, 1.0], [0.4, 0.2, 0.4]).dominant, T)

    def test_absent_modalities_not_selected(self):
        selection = select_dominant([0.2, 0.4, 0.1], [0.5, 0.3, 0.2], present=[True, False, True])
        self.assertEqual(selection.dominant, R)
        self.assertEqual(selection.auxiliaries, (T,))

        with self.assertRaises(InputError):
            select_dominant([0.0] * 3, [0.0] * 3, present=[False] * 3)

    def test_to_dict(self):
        payload = select_dominant([0.2, 0.4, 0.1], [0.5, 0.3, 0.2]).to_dict()
        self.assertEqual(payload["dominant"], "nir")
        self.assertEqual(payload["auxiliaries"], ["rgb", "tir"])


class TestDiscrepancyAndGuidance(unittest.TestCase):
    """
    差异处理与引导测试类
    """

    def setUp(self):
        torch.manual_seed(0)
        self.processor = DiscrepancyProcessor(8, (2, 2)).double()

    def test_identical_inputs_zero_discrepancy(self):
        """
        测试主导与辅助相同时差异为零
        """
        tokens = torch.randn(2, 5, 8, dtype=torch.float64)
        discrepancy = self.processor(tokens, tokens.clone())

        self.assertTrue(torch.equal(discrepancy.raw, torch.zeros_like(tokens)))
        self.assertTrue(torch.equal(discrepancy.processed, torch.zeros_like(tokens)))

    def test_shape_mismatch(self):
        with self.assertRaises(InputError):
            self.processor(torch.randn(1, 5, 8, dtype=torch.float64), torch.randn(1, 5, 4, dtype=torch.float64))

    def test_amplify_example(self):
        out = amplify_dominant(
            torch.tensor([1.0, 2.0]), torch.tensor([1.0, 2.0]), torch.tensor([9.0, 9.0]),
            torch.tensor(0.5), torch.tensor(0.0),
        )
        self.assertEqual(out.tolist(), [1.5, 3.0])

    def test_guidance_attention_example(self):
        """
        测试余弦 [1, -1]、D=4 时注意力为 [0.7311, 0.2689]
        """
        dom = torch.tensor([[[1.0, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0]]])
        aux = torch.tensor([[[2.0, 0.0, 0.0, 0.0], [-3.0, 0.0, 0.0, 0.0]]])
        attn = guidance_attention(dom, aux)

        torch.testing.assert_close(attn, torch.tensor([[0.7311, 0.2689]]), atol=1e-4, rtol=0)

    def test_guidance_zero_norm(self):
        dom = torch.zeros(1, 3, 4)
        attn = guidance_attention(dom, torch.randn(1, 3, 4))
        torch.testing.assert_close(attn, torch.full((1, 3), 1.0 / 3.0))

    def test_guide_auxiliary_zero_discrepancy(self):
        aux = torch.randn(2, 5, 8)
        guided = guide_auxiliary(torch.randn(2, 5, 8), aux, torch.zeros(2, 5, 8))
        self.assertTrue(torch.equal(guided, aux))

    def test_discrepancy_gradcheck(self):
        f_dom = torch.randn(1, 5, 8, dtype=torch.float64, requires_grad=True)
        f_aux = torch.randn(1, 5, 8, dtype=torch.float64, requires_grad=True)
        self.assertTrue(torch.autograd.gradcheck(lambda a, b: self.processor(a, b).processed, (f_dom, f_aux)))


class TestGuidanceFusionModule(unittest.TestCase):
    """
    引导融合模块测试类
    """

    def setUp(self):
        torch.manual_seed(0)
        self.module = GuidanceFusionModule(16, (4, 2), FusionConfig(mc_passes=4)).eval()
        self.path = DynamicConfidenceWeighting(16, 2).eval()

    def test_amplification_starts_at_zero(self):
        factors = AmplificationFactors(4)
        self.assertTrue(torch.equal(factors.alpha_1, torch.zeros(4)))
        factors.freeze_at_zero()
        self.assertFalse(factors.alpha_1.requires_grad)
        self.assertFalse(factors.alpha_2.requires_grad)

    def test_forward(self):
        features = random_features(3, 9, 16)
        fused, selections = self.module(features, fixed_bundle([[0.6, 0.3, 0.1]] * 3), self.path)

        self.assertEqual(tuple(fused.shape), (3, 16))
        self.assertEqual(len(selections), 3)
        self.assertTrue(all(len(s.auxiliaries) == 2 for s in selections))

    def test_absent_auxiliary_has_no_effect(self):
        """
        测试缺失的辅助模态不影响输出
        """
        features = random_features(2, 9, 16, seed=1)
        bundle = fixed_bundle([[0.6, 0.4, 0.0]] * 2, present=[[True, True, False]] * 2)
        fused, selections = self.module(features, bundle, self.path)

        altered = list(features)
        altered[2] = TokenFeatures.from_tokens(torch.randn(2, 9, 16) * 10, T)
        fused_altered, _ = self.module(altered, bundle, self.path)

        torch.testing.assert_close(fused, fused_altered)
        self.assertTrue(all(T not in (s.dominant, *s.auxiliaries) for s in selections))

    def test_fusion_identity_path(self):
        """
        测试交互卷积为零、投影只取主导分量时输出主导类别 token
        """
        fusion = GuidanceFusion(4)
        with torch.no_grad():
            for param in fusion.inter.parameters():
                param.zero_()
            fusion.projection.weight.zero_()
            fusion.projection.weight[:, 8:] = torch.eye(4)
            fusion.projection.bias.zero_()
        dom = torch.randn(2, 3, 4)
        out = fusion(dom, torch.randn(2, 3, 4), torch.randn(2, 3, 4))
        torch.testing.assert_close(out, dom[:, 0])

    def test_fusion_gradcheck(self):
        fusion = GuidanceFusion(4).double()
        inputs = tuple(torch.randn(1, 3, 4, dtype=torch.float64, requires_grad=True) for _ in range(3))
        self.assertTrue(torch.autograd.gradcheck(fusion, inputs))

    def test_amplification_and_guidance_gradcheck(self):
        """
        测试差异处理、放大、引导与聚合串联后的梯度
        """
        torch.manual_seed(2)
        processor = DiscrepancyProcessor(4, (2, 2)).double()
        factors = AmplificationFactors(4).double()
        fusion = GuidanceFusion(4).double()
        with torch.no_grad():
            factors.alpha_1.uniform_(0.5, 1.0)
            factors.alpha_2.uniform_(-1.0, -0.5)

        def pipeline(dom, aux_1, aux_2):
            d_1, d_2 = processor(dom, aux_1), processor(dom, aux_2)
            dom_en = factors(dom, d_1, d_2)
            return fusion(dom_en, guide_auxiliary(dom_en, aux_1, d_1.processed),
                          guide_auxiliary(dom_en, aux_2, d_2.processed))

        inputs = tuple(torch.randn(2, 5, 4, dtype=torch.float64, requires_grad=True) for _ in range(3))
        self.assertTrue(torch.autograd.gradcheck(pipeline, inputs))
        params = [factors.alpha_1, factors.alpha_2]
        pipeline(*inputs).sum().backward()
        self.assertTrue(all(p.grad is not None and p.grad.abs().sum() > 0 for p in params))


@pytest.mark.parametrize("rule", list(DominantRule))
def test_dominant_always_present(rule):
    selection = select_dominant([0.9, 0.1, 0.5], [0.1, 0.1, 0.8], rule=rule, present=[False, True, True])
    assert selection.dominant in (N, T)
    assert R not in selection.auxiliaries


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("factor", [1e-3, 0.5, 7.0, 1e4])
def test_dominant_invariant_to_uncertainty_scale(seed, factor):
    generator = torch.Generator().manual_seed(seed)
    uncertainty = torch.rand(3, generator=generator).tolist()
    weights = torch.rand(3, generator=generator).softmax(dim=0).tolist()
    scaled = [u * factor for u in uncertainty]
    assert select_dominant(scaled, weights).dominant == select_dominant(uncertainty, weights).dominant


def test_dominant_rule_alias():
    assert DominantRule("paper_literal") is DominantRule.UNCERTAINTY_WEIGHTED
    assert FusionConfig(dominant_rule="paper_literal").dominant_rule is DominantRule.UNCERTAINTY_WEIGHTED
    assert FusionConfig(dominant_rule="Inverse_Uncertainty").dominant_rule is DominantRule.INVERSE_UNCERTAINTY
    with pytest.raises(ValueError):
        FusionConfig(dominant_rule="literal")


if __name__ == '__main__':
    unittest.main()
