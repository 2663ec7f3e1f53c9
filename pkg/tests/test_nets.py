import numpy as np
import pytest
import torch
from helpers import finite_difference_check, tiny_batch, tiny_model
from hypothesis import given, settings, strategies as st

from jointdudo.errors import ConfigurationError, NumericalError, ShapeError
from jointdudo.nets import (
    ADC,
    AttentionUNet3d,
    ChannelRecalibration,
    ImgNet,
    ModelVariant,
    ProjectionUNet,
    adc_fuse,
    build_pcomb,
    compute_losses,
    normal_dc_fuse,
)
from jointdudo.nets.blocks import angle_padding

DELTA = torch.tensor([0.0] * 5 + [1.0] * 9 + [0.0] * 5, dtype=torch.float64)


def _proj(seed, shape=(2, 1, 4, 4, 19)):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(shape, generator=g, dtype=torch.float64)


class TestFusionIdentities:
    def test_full_trust_in_aux(self):
        aux, pri = _proj(0), _proj(1)
        out = adc_fuse(aux, pri, DELTA, torch.ones_like(aux), torch.ones(2, 3, dtype=torch.float64))
        assert torch.equal(out[..., 5:14], aux[..., 5:14])
        assert torch.equal(out[..., :5], pri[..., :5]) and torch.equal(out[..., 14:], pri[..., 14:])

    def test_zero_gamma_keeps_primary(self):
        aux, pri = _proj(0), _proj(1)
        out = adc_fuse(aux, pri, DELTA, torch.zeros_like(aux), torch.ones(2, 3, dtype=torch.float64))
        assert torch.equal(out, pri)

    def test_half_gamma_averages(self):
        aux, pri = _proj(7), _proj(8)
        out = adc_fuse(aux, pri, DELTA, torch.full_like(aux, 0.5), torch.ones(2, 3, dtype=torch.float64))
        assert torch.equal(out[..., 5:14], 0.5 * aux[..., 5:14] + 0.5 * pri[..., 5:14])

    def test_zero_recalibration_zeroes(self):
        aux, pri = _proj(9), _proj(10)
        assert not adc_fuse(aux, pri, DELTA, _proj(11), torch.zeros(2, 3, dtype=torch.float64)).any()

    def test_normal_dc_is_special_case(self):
        aux, pri = _proj(2), _proj(3)
        a = adc_fuse(aux, pri, DELTA, torch.ones_like(aux), torch.ones(2, 3, dtype=torch.float64))
        assert torch.equal(a, normal_dc_fuse(aux, pri, DELTA))

    def test_all_outer_mask(self):
        aux, pri = _proj(4), _proj(5)
        r = torch.tensor([[0.3, 0.6, 0.9]] * 2, dtype=torch.float64)
        out = adc_fuse(aux, pri, torch.zeros(19, dtype=torch.float64), _proj(6), r)
        torch.testing.assert_close(out, 0.9 * pri, rtol=0, atol=0)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_convex_when_r_is_one(self, seed):
        aux, pri, gamma = _proj(seed), _proj(seed + 1), _proj(seed + 2)
        out = adc_fuse(aux, pri, DELTA, gamma, torch.ones(2, 3, dtype=torch.float64))
        lo, hi = torch.minimum(aux, pri), torch.maximum(aux, pri)
        assert torch.all(out[..., 5:14] >= lo[..., 5:14] - 1e-12) and torch.all(out[..., 5:14] <= hi[..., 5:14] + 1e-12)

    def test_equal_inputs_pass_through(self):
        x = _proj(12)
        assert torch.equal(normal_dc_fuse(x, x, DELTA), x)

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
    def test_linear_in_inputs(self, seed, a, b):
        x1, x2, y1, y2, gamma = (_proj(seed + k) for k in range(5))
        r = torch.rand(2, 3, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        for fuse in (lambda u, v: adc_fuse(u, v, DELTA, gamma, r), lambda u, v: normal_dc_fuse(u, v, DELTA)):
            lhs = fuse(a * x1 + b * x2, a * y1 + b * y2)
            torch.testing.assert_close(lhs, a * fuse(x1, y1) + b * fuse(x2, y2), rtol=1e-12, atol=1e-12)

    def test_shape_errors(self):
        aux = _proj(0)
        with pytest.raises(ShapeError):
            adc_fuse(aux, _proj(1, (2, 1, 4, 4, 18)), DELTA, aux, torch.ones(2, 3))
        with pytest.raises(ShapeError):
            normal_dc_fuse(aux, aux, DELTA[:18])


class TestAdc:
    def test_bounds(self):
        adc = ADC(4, 2).double()
        _, gamma, r = adc(_proj(0), _proj(1), DELTA)
        assert torch.all((gamma > 0) & (gamma < 1))
        assert r.shape == (2, 3) and torch.all((r > 0) & (r < 1))

    def test_initial_recalibration_near_pass_through(self):
        se = ChannelRecalibration(4).double()
        r = se(_proj(0), _proj(1), _proj(2))
        assert torch.all(r > 0.9)


class TestBlocks:
    def test_angle_padding(self):
        assert angle_padding(19, 2) == 1
        assert angle_padding(20, 2) == 0
        assert angle_padding(19, 1) == 1

    def test_projection_unet_shape(self):
        net = ProjectionUNet(3, 4, 2).double()
        assert net(_proj(0, (1, 3, 8, 8, 19))).shape == (1, 1, 8, 8, 19)

    def test_unet_indivisible(self):
        with pytest.raises(ShapeError):
            AttentionUNet3d(1, 4, 2)(torch.zeros(1, 1, 6, 8, 8))

    def test_imgnet_starts_as_identity(self):
        x = torch.rand(1, 1, 8, 8, 8)
        assert torch.equal(ImgNet(4)(x), x)


class TestJointDuDo:
    @pytest.mark.parametrize("kind", ["joint_dudo", "joint_dudo_no_adc", "joint_dudo_no_prior"])
    @pytest.mark.parametrize("n", [1, 3])
    def test_trace_shapes(self, small_op, kind, n):
        model = tiny_model(small_op, kind, n)
        b = tiny_batch(small_op)
        tr = model(b["p_ld_9a"], b["i_ld_9a"])
        assert len(tr.fused) == len(tr.aux) == len(tr.primary) == n
        assert tr.output.shape == b["p_fd_19a"].shape
        assert (tr.prior is not None) == (kind != "joint_dudo_no_prior")
        assert len(tr.gammas) == (n if kind != "joint_dudo_no_adc" else 0)

    def test_channel_counts(self, small_op):
        model = tiny_model(small_op, "joint_dudo", 3)
        assert [m.in_channels for m in model.dn_nets] == [2, 2, 2]
        assert [m.in_channels for m in model.joint_nets] == [2, 3, 4]
        nop = tiny_model(small_op, "joint_dudo_no_prior", 3)
        assert [m.in_channels for m in nop.joint_nets] == [1, 2, 3]

    def test_no_adc_keeps_acquired_aux(self, small_op):
        model = tiny_model(small_op, "joint_dudo_no_adc", 2)
        b = tiny_batch(small_op)
        tr = model(b["p_ld_9a"], b["i_ld_9a"])
        for a, s in zip(tr.aux, tr.fused):
            assert torch.equal(s[..., 5:14], a[..., 5:14])

    def test_batch_permutation_equivariance(self, small_op):
        model = tiny_model(small_op, "joint_dudo", 2).eval()
        b = tiny_batch(small_op, batch=3)
        perm = torch.tensor([2, 0, 1])
        with torch.no_grad():
            out = model(b["p_ld_9a"], b["i_ld_9a"]).output
            outp = model(b["p_ld_9a"][perm], b["i_ld_9a"][perm]).output
        torch.testing.assert_close(outp, out[perm], rtol=1e-10, atol=1e-12)

    def test_samples_independent(self, small_op):
        model = tiny_model(small_op, "joint_dudo", 2)
        b = tiny_batch(small_op, batch=2)
        p = b["p_ld_9a"].clone().requires_grad_(True)
        out = model(p, b["i_ld_9a"]).output
        (g,) = torch.autograd.grad(out[0].sum(), p)
        assert torch.all(g[1] == 0) and torch.any(g[0] != 0)

    def test_untrained_blocks_pass_anchor_through(self, small_op):
        model = tiny_model(small_op, "joint_dudo_no_adc", 2)
        b = tiny_batch(small_op)
        tr = model(b["p_ld_9a"], b["i_ld_9a"])
        torch.testing.assert_close(tr.primary[0], tr.prior, rtol=0, atol=0)
        torch.testing.assert_close(tr.aux[0], b["p_ld_9a"], rtol=0, atol=0)
        torch.testing.assert_close(tr.aux[1], tr.aux[0], rtol=0, atol=0)
        torch.testing.assert_close(tr.primary[1], tr.fused[0], rtol=0, atol=0)

    @pytest.mark.parametrize("kind", ["unet_proj", "attnunet_proj"])
    def test_untrained_projection_baseline_is_identity(self, small_op, kind):
        model = tiny_model(small_op, kind)
        b = tiny_batch(small_op)
        assert torch.equal(model(b["p_ld_9a"]).output, b["p_ld_9a"])

    def test_anchor_out_of_range(self):
        with pytest.raises(ShapeError):
            ProjectionUNet(2, 4, 1, anchor=2)

    def test_prior_required(self, small_op):
        model = tiny_model(small_op, "joint_dudo", 1)
        b = tiny_batch(small_op)
        with pytest.raises(ConfigurationError):
            model(b["p_ld_9a"], None)

    @pytest.mark.parametrize("kind", ["joint_dudo", "joint_dudo_no_adc"])
    def test_gradient_matches_finite_differences(self, small_op, kind):
        model = tiny_model(small_op, kind, 2, jitter=0.05)
        worst = finite_difference_check(model, tiny_batch(small_op, target_offset=10.0), eps=1e-3, n_probe=2)
        assert worst < 1e-3


class TestVariantsAndLosses:
    def test_unknown_kind(self):
        with pytest.raises(ConfigurationError):
            ModelVariant("resnet")
        with pytest.raises(ConfigurationError):
            ModelVariant(iterations=0)

    def test_unet_proj_has_no_attention(self):
        assert ModelVariant("unet_proj").attention is False

    def test_pcomb(self):
        p = _proj(0)
        assert build_pcomb(None, p, ModelVariant("joint_dudo_no_prior")) is p
        assert build_pcomb(p, p, ModelVariant()).shape[1] == 2
        with pytest.raises(ShapeError):
            build_pcomb(p[..., :18], p, ModelVariant())

    def test_loss_values(self, small_op):
        model = tiny_model(small_op, "joint_dudo", 2)
        b = tiny_batch(small_op)
        tr = model(b["p_ld_9a"], b["i_ld_9a"])
        lb = compute_losses(tr, b, model.delta.double(), 0.5, 0.5)
        expect_img = (tr.image - b["i_fd_19a"]).abs().mean()
        mask = model.delta.double().expand_as(b["p_fd_19a"]).bool()
        expect_aux = sum((a - b["p_fd_9a"]).abs()[mask].mean() for a in tr.aux)
        expect_fused = sum((s - b["p_fd_19a"]).abs().mean() for s in tr.fused)
        torch.testing.assert_close(lb.l_image, expect_img)
        torch.testing.assert_close(lb.l_projection, expect_aux + expect_fused)
        torch.testing.assert_close(lb.l_total, 0.5 * expect_img + 0.5 * (expect_aux + expect_fused))

    def test_projection_loss_sums_terms(self):
        from jointdudo.nets import ForwardTrace

        shape = (1, 1, 4, 4, 19)
        target = torch.zeros(shape, dtype=torch.float64)
        aux = [torch.ones(shape, dtype=torch.float64)] * 2
        fused = [torch.full(shape, 2.0, dtype=torch.float64)] * 2
        tr = ForwardTrace(aux=aux, primary=fused, fused=fused)
        lb = compute_losses(tr, {"p_fd_19a": target, "p_fd_9a": target, "i_fd_19a": None}, DELTA)
        assert lb.l_projection.item() == 6.0
        assert lb.l_image.item() == 0.0

    def test_nonfinite_loss_named(self, small_op):
        model = tiny_model(small_op, "joint_dudo", 1)
        b = tiny_batch(small_op)
        b["i_fd_19a"] = b["i_fd_19a"] * np.nan
        tr = model(b["p_ld_9a"], b["i_ld_9a"])
        with pytest.raises(NumericalError, match="l_image"):
            compute_losses(tr, b, model.delta.double())
