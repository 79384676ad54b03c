from __future__ import annotations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from famh.errors import ConfigError, OddDim, ShapeMismatch
from famh.model import (
    Attention,
    MaskedAutoencoder,
    ModelConfig,
    RMSNorm,
    SwiGLU,
    count_parameters,
    num_masked,
    random_mask,
    rmsnorm,
    rope_rotate,
    silu,
)
from famh.spectral import LossWeights, masked_aggregate
from famh.training.autodiff import backward


def tiny_model(cfg, seed=0):
    return MaskedAutoencoder(cfg, seed=seed).double()


def params_np(model):
    return {n: p.detach().numpy().astype(np.float64) for n, p in model.named_parameters()}


class TestParameterCount:
    def test_default_exact(self):
        # 12*(4*256^2 + 3*256*683 + 2*256) + (900*256 + 256) + 256 + 256 + (256*900 + 900) + (256*6 + 6)
        assert count_parameters(ModelConfig()) == 9_910_410

    def test_within_ten_million_budget(self):
        assert 9.4e6 <= count_parameters(ModelConfig()) <= 10.6e6

    @pytest.mark.parametrize("kw", [{}, dict(n_blocks=0), dict(n_blocks=4, embed_dim=64, n_heads=4, n_classes=4),
                                    dict(n_blocks=2, embed_dim=8, n_heads=2, patch_len=32)])
    def test_matches_module(self, kw):
        cfg = ModelConfig(**kw)
        model = MaskedAutoencoder(cfg)
        assert count_parameters(cfg) == sum(p.numel() for p in model.parameters())

    def test_zero_blocks(self):
        d, p, c = 256, 900, 6
        assert count_parameters(ModelConfig(n_blocks=0)) == (p * d + d) + d + d + (d * p + p) + (d * c + c)

    def test_ffn_hidden(self):
        assert ModelConfig().ffn_hidden == 683


class TestConfig:
    def test_odd_head_dim(self):
        with pytest.raises(OddDim):
            ModelConfig(embed_dim=12, n_heads=4)

    def test_indivisible_heads(self):
        with pytest.raises(ConfigError):
            ModelConfig(embed_dim=10, n_heads=4)

    @pytest.mark.parametrize("rate", [-0.1, 1.0])
    def test_mask_rate_range(self, rate):
        with pytest.raises(ConfigError):
            ModelConfig(mask_rate=rate)


class TestInit:
    def test_distribution(self):
        model = MaskedAutoencoder(ModelConfig(n_blocks=2, embed_dim=64, n_heads=4))
        for name, p in model.named_parameters():
            if name.endswith("gain"):
                assert torch.all(p == 1)
            elif name.endswith("bias"):
                assert torch.all(p == 0)
            elif p.numel() > 1000:
                assert p.std().item() == pytest.approx(0.02, rel=0.1)
                assert abs(p.mean().item()) < 0.002
        assert torch.any(model.mask_token != 0)

    def test_seeded(self, tiny_cfg):
        a, b, c = MaskedAutoencoder(tiny_cfg, 3), MaskedAutoencoder(tiny_cfg, 3), MaskedAutoencoder(tiny_cfg, 4)
        for (n, pa), pb, pc in zip(a.named_parameters(), b.parameters(), c.parameters()):
            assert torch.equal(pa, pb)
        assert not torch.equal(a.embed.weight, c.embed.weight)


class TestMasking:
    def test_default_count(self):
        assert num_masked(0.6, 300) == 180
        mask = random_mask(4, 300, 0.6, np.random.default_rng(0))
        assert mask.sum(dim=1).tolist() == [180] * 4

    @pytest.mark.parametrize("rate,n,k", [(0.6, 20, 12), (0.6, 4, 3), (0.5, 7, 4), (0.0, 10, 0), (0.75, 4, 3)])
    def test_ceil(self, rate, n, k):
        assert num_masked(rate, n) == k == int(random_mask(1, n, rate, np.random.default_rng(1)).sum())

    def test_rate_zero_leaves_tokens(self, tiny_cfg):
        model = tiny_model(tiny_cfg)
        tokens = torch.randn(2, 5, 8, dtype=torch.float64)
        out, mask = model.apply_mask(tokens, 0.0, np.random.default_rng(0))
        assert torch.equal(out, tokens) and not mask.any()

    def test_deterministic_and_uniform(self):
        a = random_mask(3, 10, 0.6, np.random.default_rng(5))
        b = random_mask(3, 10, 0.6, np.random.default_rng(5))
        assert torch.equal(a, b)
        freq = random_mask(4000, 10, 0.6, np.random.default_rng(6)).double().mean(dim=0)
        assert torch.all((freq - 0.6).abs() < 0.04)

    def test_masked_positions_get_token(self, tiny_cfg):
        model = tiny_model(tiny_cfg)
        tokens = torch.randn(2, 5, 8, dtype=torch.float64)
        out, mask = model.apply_mask(tokens, 0.6, np.random.default_rng(0))
        assert torch.equal(out[mask], model.mask_token.detach().expand(int(mask.sum()), 8))
        assert torch.equal(out[~mask], tokens[~mask])


class TestRope:
    def test_position_zero_identity(self, rng):
        v = torch.as_tensor(rng.standard_normal((5, 16)))
        assert torch.equal(rope_rotate(v, torch.zeros(5)), v)

    def test_matches_complex_oracle(self, rng):
        v = rng.standard_normal((6, 8))
        pos = np.arange(6) * 3.0
        got = rope_rotate(torch.as_tensor(v), torch.as_tensor(pos)).numpy()
        z = v[:, 0::2] + 1j * v[:, 1::2]
        theta = 10000.0 ** (-2 * np.arange(4) / 8)
        zr = z * np.exp(1j * pos[:, None] * theta)
        want = np.stack([zr.real, zr.imag], axis=-1).reshape(6, 8)
        assert np.max(np.abs(got - want)) < 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 500), st.integers(0, 500), st.integers(-200, 200))
    def test_relative_shift(self, seed, m, n, s):
        r = np.random.default_rng(seed)
        q, k = torch.as_tensor(r.standard_normal(32)), torch.as_tensor(r.standard_normal(32))
        if m + s < 0 or n + s < 0:
            s = -s
        a = rope_rotate(q, torch.tensor(float(m))) @ rope_rotate(k, torch.tensor(float(n)))
        b = rope_rotate(q, torch.tensor(float(m + s))) @ rope_rotate(k, torch.tensor(float(n + s)))
        assert abs(a.item() - b.item()) <= 1e-9

    def test_isometry(self, rng):
        v = torch.as_tensor(rng.standard_normal((10, 32)))
        out = rope_rotate(v, torch.arange(10) * 37.0)
        assert torch.allclose(out.norm(dim=-1), v.norm(dim=-1), rtol=0, atol=1e-12)

    def test_odd_dim(self):
        with pytest.raises(OddDim):
            rope_rotate(torch.zeros(3, 5), torch.arange(3))


class TestLayers:
    def test_rmsnorm(self, rng):
        assert torch.allclose(rmsnorm(torch.ones(8, dtype=torch.float64), torch.ones(8, dtype=torch.float64)),
                              torch.ones(8, dtype=torch.float64), atol=1e-6)
        x, g = rng.standard_normal(16), rng.standard_normal(16)
        want = x * g / np.sqrt(np.mean(x * x) + 1e-6)
        assert np.max(np.abs(rmsnorm(torch.as_tensor(x), torch.as_tensor(g)).numpy() - want)) < 1e-12
        xt = torch.as_tensor(x)
        norm = RMSNorm(16).double()
        assert torch.allclose(norm(7.5 * xt), norm(xt), atol=1e-6)

    def test_silu(self):
        assert silu(torch.tensor(0.0)).item() == 0.0
        assert silu(torch.tensor(1.0, dtype=torch.float64)).item() == pytest.approx(0.731059, abs=1e-6)

    def test_swiglu_oracle(self, rng):
        ffn = SwiGLU(8, 21).double()
        assert torch.all(ffn(torch.zeros(3, 8, dtype=torch.float64)) == 0)
        x = rng.standard_normal((3, 8))
        wg, wu, wd = (m.weight.detach().numpy() for m in (ffn.w_gate, ffn.w_up, ffn.w_down))
        g = x @ wg.T
        want = (g / (1 + np.exp(-g)) * (x @ wu.T)) @ wd.T
        assert np.max(np.abs(ffn(torch.as_tensor(x)).detach().numpy() - want)) < 1e-12

    def test_attention_single_token(self, tiny_cfg):
        attn = Attention(tiny_cfg).double()
        x = torch.randn(1, 1, 8, dtype=torch.float64)
        want = attn.wo(attn.wv(x))
        assert torch.allclose(attn(x, torch.arange(1)), want, atol=1e-14)

    def test_attention_weights_normalised(self, tiny_cfg):
        attn = Attention(tiny_cfg).double()
        _, w = attn(torch.randn(2, 5, 8, dtype=torch.float64), torch.arange(5), return_weights=True)
        assert torch.allclose(w.sum(dim=-1), torch.ones(2, 2, 5, dtype=torch.float64), atol=1e-12)

    def test_embed_oracle(self, tiny_cfg, rng):
        model = tiny_model(tiny_cfg)
        with torch.no_grad():
            model.embed.bias.copy_(torch.as_tensor(rng.standard_normal(8)))
        x = rng.standard_normal((3, 4 * 32))
        tokens = model.embed_patches(torch.as_tensor(x)).detach().numpy()
        w, b = model.embed.weight.detach().numpy(), model.embed.bias.detach().numpy()
        for i in range(4):
            flat = x[:, 32 * i:32 * (i + 1)].reshape(-1)  # axis-major flattening of one patch
            assert np.max(np.abs(tokens[i] - (w @ flat + b))) < 1e-12

    def test_embed_shape_mismatch(self, tiny_cfg):
        with pytest.raises(ShapeMismatch):
            tiny_model(tiny_cfg).embed_patches(torch.zeros(2, 4 * 32, dtype=torch.float64))

    def test_heads_zero_in_zero_out(self, tiny_cfg):
        model = tiny_model(tiny_cfg)
        z = torch.zeros(1, 4, 8, dtype=torch.float64)
        assert torch.all(model.reconstruct(z) == 0)
        assert torch.all(model.classify(z) == 0)
        assert model.reconstruct(z).shape == (1, 3, 128)

    def test_recon_head_layout(self, tiny_cfg, rng):
        model = tiny_model(tiny_cfg)
        t = rng.standard_normal((1, 4, 8))
        out = model.reconstruct(torch.as_tensor(t)).detach().numpy()[0]
        w, b = model.recon_head.weight.detach().numpy(), model.recon_head.bias.detach().numpy()
        for i in range(4):
            assert np.max(np.abs(out[:, 32 * i:32 * (i + 1)] - (w @ t[0, i] + b).reshape(3, 32))) < 1e-12


class TestEncoder:
    def test_matches_loop_oracle(self, tiny_cfg, rng):
        model = tiny_model(tiny_cfg, seed=2)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(0.3 * torch.randn_like(p))
        tokens = rng.standard_normal((5, 8))
        got = model.encode(torch.as_tensor(tokens)[None]).detach().numpy()[0]
        want = oracles.encoder_forward(tokens, params_np(model), 2, 2)
        assert np.max(np.abs(got - want)) < 1e-10

    def test_zero_projections_is_final_norm(self, tiny_cfg):
        model = tiny_model(tiny_cfg)
        with torch.no_grad():
            for blk in model.blocks:
                blk.attn.wo.weight.zero_()
                blk.ffn.w_down.weight.zero_()
        tokens = torch.randn(2, 4, 8, dtype=torch.float64)
        assert torch.allclose(model.encode(tokens), model.final_norm(tokens), atol=1e-14)

    def test_permutation_equivariance(self, tiny_cfg):
        model = tiny_model(tiny_cfg)
        with torch.no_grad():
            for p in model.parameters():
                p.add_(0.3 * torch.randn_like(p))
        tokens = torch.randn(1, 4, 8, dtype=torch.float64)
        pos = torch.arange(4)
        perm = torch.tensor([2, 0, 3, 1])
        a = model.encode(tokens, pos)[:, perm]
        b = model.encode(tokens[:, perm], pos[perm])
        assert torch.allclose(a, b, atol=1e-12)

    def test_mask_token_irrelevant_without_masking(self, tiny_cfg):
        model = tiny_model(tiny_cfg)
        x = torch.randn(2, 3, 128, dtype=torch.float64)
        before = model(x)
        with torch.no_grad():
            model.mask_token.add_(5.0)
        assert torch.equal(model(x), before)

    def test_forward_deterministic(self, tiny_cfg):
        model = tiny_model(tiny_cfg)
        x = torch.randn(2, 3, 128, dtype=torch.float64)
        a, ma = model.forward_pretrain(x, np.random.default_rng(9))
        b, mb = model.forward_pretrain(x, np.random.default_rng(9))
        assert torch.equal(a, b) and torch.equal(ma, mb)
        assert model(x).shape == (2, 4, 4)


def pipeline_gradient_error(cfg, seed: int, coords_per_tensor: int = 3) -> float:
    """Worst relative error between autograd and central differences over sampled coordinates."""
    r = np.random.default_rng(seed)
    model = tiny_model(cfg, seed=seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(0.2 * torch.as_tensor(r.standard_normal(tuple(p.shape))))
    x = torch.as_tensor(r.standard_normal((2, 3, cfg.patch_len * 4)))
    mask_rng_seed = int(r.integers(1 << 31))
    weights = LossWeights(1.0, 0.5, 0.5)

    def loss_fn():
        recon, mask = model.forward_pretrain(x, np.random.default_rng(mask_rng_seed))
        return masked_aggregate(x, recon, mask, weights, patch_len=cfg.patch_len)

    params = dict(model.named_parameters())
    grads = backward(loss_fn(), params).values()
    worst = 0.0
    for (name, p), g in zip(params.items(), grads):
        flat = p.data.view(-1)
        idx = r.choice(flat.numel(), size=min(coords_per_tensor, flat.numel()), replace=False)
        num = []
        for i in idx:
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + 1e-5
                fp = loss_fn().item()
                flat[i] = old - 1e-5
                fm = loss_fn().item()
                flat[i] = old
            num.append((fp - fm) / 2e-5)
        ana = g.view(-1)[torch.as_tensor(idx)].numpy()
        num = np.array(num)
        scale = max(np.max(np.abs(num)), np.max(np.abs(ana)), 1e-8)
        worst = max(worst, float(np.max(np.abs(ana - num)) / scale))
    return worst


def test_pipeline_gradients(tiny_cfg):
    for seed in range(3):
        assert pipeline_gradient_error(tiny_cfg, seed) < 1e-4
