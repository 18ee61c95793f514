import pytest
import torch

from bgvae.blocks import (
    BConvNeXt,
    ChannelLayerNorm,
    CrossAttention,
    LambdaEmbedding,
    dc_hc_split,
)
from bgvae.exceptions import DimensionError, DomainError
from conftest import max_rel_grad_err


class TestDcHcSplit:
    def test_constant_input_is_all_dc(self):
        x = torch.arange(1.0, 4.0)[None, :, None, None].expand(1, 3, 5, 5)
        dc, hc = dc_hc_split(x)
        assert torch.equal(dc, x)
        assert hc.abs().max() == 0

    def test_zero_mean_input_is_all_hc(self):
        x = torch.randn(2, 4, 8, 8, dtype=torch.float64)
        x = x - x.mean(dim=(-2, -1), keepdim=True)
        dc, hc = dc_hc_split(x)
        assert dc.abs().max().item() < 1e-14
        assert torch.allclose(hc, x)

    def test_additive_decomposition_within_rounding(self):
        x = torch.randn(3, 7, 6, 10)
        dc, hc = dc_hc_split(x)
        assert (dc + hc - x).abs().max().item() <= 1e-6
        # hc is defined as x - dc, so that residual is bitwise exact.
        assert torch.equal(hc, x - dc)


class TestLambdaEmbedding:
    def test_output_dim(self):
        emb = LambdaEmbedding(256)
        assert emb(512.0).shape == (256,)

    def test_deterministic(self):
        emb = LambdaEmbedding(64)
        assert torch.equal(emb(512.0), emb(512.0))

    def test_endpoints_distinct(self):
        emb = LambdaEmbedding(64)
        assert (emb(64.0) - emb(8192.0)).norm() > 0

    def test_finite_over_grid(self):
        emb = LambdaEmbedding(64)
        for lam in torch.logspace(6, 13, 1000, base=2.0).tolist():
            assert torch.isfinite(emb(lam)).all()

    def test_nonpositive_rejected(self):
        emb = LambdaEmbedding(64)
        with pytest.raises(DomainError):
            emb(0.0)
        with pytest.raises(DomainError):
            emb(-5.0)

    def test_out_of_range_warns(self):
        emb = LambdaEmbedding(64)
        with pytest.warns(UserWarning, match="extrapolating"):
            emb(10.0)


class TestBConvNeXt:
    def _embed(self, d=16):
        return torch.randn(d)

    def test_shape_preserved(self):
        blk = BConvNeXt(96, 16)
        x = torch.randn(2, 96, 16, 16)
        assert blk(x, self._embed()).shape == x.shape

    def test_identity_at_init(self):
        # Final projection is zero-initialized, so a fresh block is identity.
        blk = BConvNeXt(8, 16)
        x = torch.randn(1, 8, 4, 4)
        assert torch.equal(blk(x, self._embed()), x)

    def test_neutral_balance_matches_plain_convnext(self):
        # With alpha = beta = 1 the dc/hc recombination is the depthwise
        # output itself; compare against the same layers composed manually.
        torch.manual_seed(3)
        blk = BConvNeXt(8, 16)
        with torch.no_grad():
            torch.nn.init.normal_(blk.pw2.weight, std=0.2)
            torch.nn.init.normal_(blk.pw2.bias, std=0.2)
        x = torch.randn(1, 8, 6, 6)
        e = self._embed()
        scale = 1.0 + blk.cond(torch.nn.functional.gelu(e))
        f = blk.norm(blk.dwconv(x)) * scale[:, None, None]
        want = x + blk.pw2(torch.nn.functional.gelu(blk.pw1(f)))
        assert torch.allclose(blk(x, e), want, atol=1e-6)

    def test_alpha_zero_removes_spatial_mean(self):
        blk = BConvNeXt(8, 16)
        with torch.no_grad():
            blk.alpha.zero_()
        x = torch.randn(1, 8, 4, 4)
        y = blk.dwconv(x)
        _, hc = dc_hc_split(y)
        f = blk.alpha[:, None, None] * 0 + blk.beta[:, None, None] * hc
        assert f.mean(dim=(-2, -1)).abs().max().item() < 1e-6

    def test_channel_mismatch_rejected(self):
        blk = BConvNeXt(8, 16)
        with pytest.raises(DimensionError):
            blk(torch.randn(1, 9, 4, 4), self._embed())

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(5)
        blk = BConvNeXt(8, 16).double()
        with torch.no_grad():
            torch.nn.init.normal_(blk.pw2.weight, std=0.1)
            torch.nn.init.uniform_(blk.cond.weight, -0.1, 0.1)
        e = torch.randn(16, dtype=torch.float64)
        x = torch.randn(1, 8, 4, 4, dtype=torch.float64)
        err = max_rel_grad_err(lambda t: blk(t, e).pow(2).sum(), [x])
        assert err <= 1e-3


class TestChannelLayerNorm:
    def test_normalizes_channels(self):
        norm = ChannelLayerNorm(16)
        x = torch.randn(2, 16, 4, 4)
        y = norm(x)
        assert y.mean(dim=1).abs().max().item() < 1e-5
        assert (y.var(dim=1, unbiased=False) - 1).abs().max().item() < 1e-3


class TestCrossAttention:
    def test_output_shape(self):
        attn = CrossAttention(96, 192)
        out = attn(torch.randn(1, 96, 16, 16), torch.randn(1, 192, 8, 8))
        assert out.shape == (1, 96, 16, 16)

    def test_residual_identity_with_zero_projections(self):
        attn = CrossAttention(16, 8)
        with torch.no_grad():
            attn.to_v.weight.zero_()
            attn.to_v.bias.zero_()
            attn.proj.weight.zero_()
            attn.proj.bias.zero_()
        f_high = torch.randn(2, 16, 8, 8)
        out = attn(f_high, torch.randn(2, 8, 4, 4))
        assert torch.equal(out, f_high)

    def test_attention_rows_normalized(self):
        attn = CrossAttention(16, 8)
        _, weights = attn(
            torch.randn(1, 16, 8, 8), torch.randn(1, 8, 4, 4), return_weights=True
        )
        assert (weights >= 0).all()
        assert (weights.sum(dim=-1) - 1).abs().max().item() <= 1e-5

    def test_resolution_mismatch_rejected(self):
        attn = CrossAttention(16, 8)
        with pytest.raises(DimensionError):
            attn(torch.randn(1, 16, 8, 8), torch.randn(1, 8, 3, 4))

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(2)
        attn = CrossAttention(8, 8).double()
        with torch.no_grad():
            torch.nn.init.normal_(attn.proj.weight, std=0.1)
        f_high = torch.randn(1, 8, 4, 4, dtype=torch.float64)
        f_low = torch.randn(1, 8, 2, 2, dtype=torch.float64)
        err = max_rel_grad_err(
            lambda a, b: attn(a, b).pow(2).sum(), [f_high, f_low]
        )
        assert err <= 1e-3
