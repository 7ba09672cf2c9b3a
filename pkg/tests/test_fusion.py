import math

import pytest
import torch

from fssuw.errors import IndivisibleInput, ShapeMismatch
from fssuw.fusion import AlignmentModule, FeatureFusion, FusionConfig


def gelu_exact(x: float) -> float:
    return 0.5 * x * (1.0 + math.erf(x / math.sqrt(2.0)))


def make_fusion(c_prime=8, use_fee=True, use_fam=True, swap_roles=False,
                sfe_high=12, sfe_low=6, fee_high=4, fee_low=2):
    cfg = FusionConfig(c_prime=c_prime, use_fee=use_fee, use_fam=use_fam,
                       swap_roles=swap_roles)
    return FeatureFusion(cfg, sfe_high_ch=sfe_high, sfe_low_ch=sfe_low,
                         fee_high_ch=fee_high, fee_low_ch=fee_low)


class TestFuseHigh:
    def test_concat_arithmetic(self):
        fusion = make_fusion(c_prime=16, sfe_high=512, fee_high=256, sfe_low=6, fee_low=2)
        assert fusion.project_high.in_channels == 768
        fs, es = torch.rand(512, 4, 4), torch.rand(256, 4, 4)
        fq, eq = torch.rand(512, 4, 4), torch.rand(256, 4, 4)
        out = fusion.fuse_high(fs, es, fq, eq)
        assert tuple(out.shape) == (2, 16, 4, 4)

    def test_identity_projection(self):
        fusion = make_fusion(c_prime=8, use_fee=False, sfe_high=8, sfe_low=4)
        with torch.no_grad():
            fusion.project_high.weight.copy_(torch.eye(8).view(8, 8, 1, 1))
            fusion.project_high.bias.zero_()
        fs, fq = torch.rand(8, 4, 4), torch.rand(8, 4, 4)
        out = fusion.fuse_high(fs, None, fq, None)
        assert torch.allclose(out[0], fs) and torch.allclose(out[1], fq)

    def test_spatial_mismatch(self):
        fusion = make_fusion(sfe_high=12, fee_high=4)
        with pytest.raises(ShapeMismatch):
            fusion.fuse_high(torch.rand(12, 8, 8), torch.rand(4, 4, 4),
                             torch.rand(12, 8, 8), torch.rand(4, 8, 8))


class TestFuseLowRaw:
    def test_output_at_low_grid(self):
        fusion = make_fusion(c_prime=8, sfe_low=6, fee_low=2)
        ls, es = torch.rand(6, 32, 32), torch.rand(2, 32, 32)
        lq, eq = torch.rand(6, 32, 32), torch.rand(2, 32, 32)
        out = fusion.fuse_low_raw(ls, es, lq, eq)
        assert tuple(out.shape) == (2, 8, 32, 32)

    def test_without_fee_consumes_sfe_only(self):
        fusion = make_fusion(use_fee=False, sfe_low=6)
        assert fusion.project_low.in_channels == 6
        out = fusion.fuse_low_raw(torch.rand(6, 8, 8), None, torch.rand(6, 8, 8), None)
        assert tuple(out.shape) == (2, 8, 8, 8)

    def test_zero_inputs_bias_free(self):
        fusion = make_fusion()
        with torch.no_grad():
            fusion.project_low.bias.zero_()
        out = fusion.fuse_low_raw(torch.zeros(6, 8, 8), torch.zeros(2, 8, 8),
                                  torch.zeros(6, 8, 8), torch.zeros(2, 8, 8))
        assert not out.any()


class TestAlignmentModule:
    def test_shape_chain(self):
        fam = AlignmentModule(256)
        x = torch.rand(2, 256, 128, 128)
        stage1 = fam.pool(fam.conv1_a(torch.nn.functional.gelu(fam.conv3_a(x))))
        assert tuple(stage1.shape) == (2, 128, 64, 64)
        out = fam(x)
        assert tuple(out.shape) == (2, 256, 32, 32)

    def test_indivisible(self):
        fam = AlignmentModule(8)
        with pytest.raises(IndivisibleInput):
            fam(torch.rand(1, 8, 6, 6))

    def test_constant_input_closed_form(self):
        """Channel-preserving kernels reduce the two stages to a scalar chain
        of conv/GELU evaluations computable by hand."""
        c = 8
        fam = AlignmentModule(c).double()
        b1, b2, b3, b4 = 0.3, -0.2, 0.15, 0.4
        cval = 0.7
        with torch.no_grad():
            fam.conv3_a.weight.zero_()
            for i in range(c):
                fam.conv3_a.weight[i, i, 1, 1] = 1.0
            fam.conv3_a.bias.fill_(b1)
            fam.conv1_a.weight.fill_(1.0 / c)
            fam.conv1_a.bias.fill_(b2)
            fam.conv3_b.weight.zero_()
            for i in range(c // 2):
                fam.conv3_b.weight[i, i, 1, 1] = 1.0
            fam.conv3_b.bias.fill_(b3)
            fam.conv1_b.weight.fill_(1.0 / (c // 2))
            fam.conv1_b.bias.fill_(b4)

        # interior pixels see the full window, so constants propagate exactly
        v1 = gelu_exact(cval + b1)          # conv3_a + GELU
        v2 = v1 + b2                        # mean over channels of equal values
        v3 = gelu_exact(v2 + b3)
        v4 = v3 + b4
        out = fam(torch.full((1, c, 16, 16), cval, dtype=torch.float64))
        interior = out[0, :, 1:-1, 1:-1]
        assert interior.min().item() == pytest.approx(v4, abs=1e-12)
        assert interior.max().item() == pytest.approx(v4, abs=1e-12)

    def test_gradcheck_wrt_input(self):
        torch.manual_seed(5)
        fam = AlignmentModule(4).double()
        x = torch.randn(1, 4, 8, 8, dtype=torch.float64, requires_grad=True)
        fam(x).mean().backward()
        analytic = x.grad.clone()
        h = 1e-5
        rng = torch.Generator().manual_seed(6)
        flat = x.detach().reshape(-1)
        for idx in torch.randperm(flat.numel(), generator=rng)[:12].tolist():
            orig = flat[idx].item()
            with torch.no_grad():
                flat[idx] = orig + h
                up = fam(x.detach()).mean().item()
                flat[idx] = orig - h
                down = fam(x.detach()).mean().item()
                flat[idx] = orig
            fd = (up - down) / (2 * h)
            a = analytic.reshape(-1)[idx].item()
            assert abs(a - fd) / max(abs(a), abs(fd), 1e-8) < 1e-3

    def test_translation_covariance_interior(self):
        torch.manual_seed(8)
        fam = AlignmentModule(4)
        x = torch.rand(1, 4, 32, 32)
        shifted = torch.roll(x, shifts=(4, 4), dims=(2, 3))
        with torch.no_grad():
            a = fam(x)
            b = fam(shifted)
        # 4-pixel input shift = 1-pixel output shift; compare interiors
        assert torch.allclose(b[..., 2:-2, 2:-2], torch.roll(a, (1, 1), (2, 3))[..., 2:-2, 2:-2],
                              atol=1e-5)


class TestCombineAndSplit:
    def test_zero_low_is_identity(self):
        fusion = make_fusion()
        f_high = torch.rand(2, 8, 4, 4)
        pair = fusion.combine_and_split(f_high, torch.zeros_like(f_high))
        assert torch.equal(pair.f_support, f_high[0])
        assert torch.equal(pair.f_query, f_high[1])

    def test_definition(self):
        fusion = make_fusion()
        a, b = torch.rand(8, 4, 4), torch.rand(8, 4, 4)
        c = torch.rand(2, 8, 4, 4)
        pair = fusion.combine_and_split(torch.stack([a, b]), c)
        assert torch.allclose(pair.f_support, a + c[0])
        assert torch.allclose(pair.f_query, b + c[1])

    def test_absent_low(self):
        fusion = make_fusion()
        f_high = torch.rand(2, 8, 4, 4)
        pair = fusion.combine_and_split(f_high, None)
        assert torch.equal(pair.f_support, f_high[0])

    def test_channel_mismatch(self):
        fusion = make_fusion()
        with pytest.raises(ShapeMismatch):
            fusion.combine_and_split(torch.rand(2, 8, 4, 4), torch.rand(2, 4, 4, 4))

    def test_mismatched_spatial_resized(self):
        fusion = make_fusion()
        pair = fusion.combine_and_split(torch.rand(2, 8, 4, 4), torch.rand(2, 8, 16, 16))
        assert tuple(pair.f_support.shape) == (8, 4, 4)


class TestPipelineShapes:
    @pytest.mark.parametrize("use_fee", [True, False])
    @pytest.mark.parametrize("use_fam", [True, False])
    def test_ablation_grid(self, use_fee, use_fam):
        fusion = make_fusion(use_fee=use_fee, use_fam=use_fam)
        hs, hq = torch.rand(2, 12 + (4 if use_fee else 0), 4, 4)
        ls, lq = torch.rand(2, 6 + (2 if use_fee else 0), 16, 16)
        pair = fusion(hs, ls if fusion.config.use_low else None,
                      hq, lq if fusion.config.use_low else None)
        assert tuple(pair.f_support.shape) == (8, 4, 4)
        assert tuple(pair.f_query.shape) == (8, 4, 4)

    def test_swap_roles_shape_trace(self):
        fusion = make_fusion(swap_roles=True)
        hs, hq = torch.rand(2, 16, 4, 4)
        ls, lq = torch.rand(2, 8, 16, 16)
        pair = fusion(hs, ls, hq, lq)
        assert tuple(pair.f_support.shape) == (8, 4, 4)
        assert tuple(pair.f_query.shape) == (8, 4, 4)

    def test_baseline_reduces_to_projected_high(self):
        fusion = make_fusion(use_fee=False, use_fam=False, sfe_high=12, sfe_low=6)
        assert fusion.project_low is None and fusion.align is None
        hs, hq = torch.rand(12, 4, 4), torch.rand(12, 4, 4)
        pair = fusion(hs, None, hq, None)
        expected = fusion.project_high(torch.stack([hs, hq]))
        assert torch.equal(pair.f_support, expected[0])
        assert torch.equal(pair.f_query, expected[1])

    def test_without_fam_uses_average_pooled_raw(self):
        fusion = make_fusion(use_fam=True)
        ablated = make_fusion(use_fam=False)
        with torch.no_grad():
            ablated.project_high.weight.copy_(fusion.project_high.weight)
            ablated.project_high.bias.copy_(fusion.project_high.bias)
            ablated.project_low.weight.copy_(fusion.project_low.weight)
            ablated.project_low.bias.copy_(fusion.project_low.bias)
        hs, hq = torch.rand(2, 16, 4, 4)
        ls, lq = torch.rand(2, 8, 16, 16)
        got = ablated(hs, ls, hq, lq)
        # reconstruct expectation: projected high + 4x4-average-pooled raw low
        high = ablated.project_high(torch.stack([hs, hq]))
        low = ablated.project_low(torch.stack([ls, lq]))
        pooled = torch.nn.functional.avg_pool2d(low, 4)
        assert torch.allclose(got.f_support, (high + pooled)[0], atol=1e-6)
        assert torch.allclose(got.f_query, (high + pooled)[1], atol=1e-6)

    def test_gradients_reach_every_parameter(self):
        torch.manual_seed(12)
        fusion = make_fusion()
        hs, hq = torch.rand(2, 16, 4, 4)
        ls, lq = torch.rand(2, 8, 16, 16)
        pair = fusion(hs, ls, hq, lq)
        (pair.f_support.square().mean() + pair.f_query.square().mean()).backward()
        for name, p in fusion.named_parameters():
            assert p.grad is not None, name
            assert p.grad.abs().max().item() > 0.0, name
