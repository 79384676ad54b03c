"""Encoder-only transformer masked autoencoder over 10 s tri-axial patches."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from famh.errors import ConfigError, OddDim, ShapeMismatch
from famh.ingest.windowing import patchify, unpatchify


@dataclass(frozen=True)
class ModelConfig:
    n_blocks: int = 12
    embed_dim: int = 256
    n_heads: int = 8
    patch_len: int = 300
    n_axes: int = 3
    mask_rate: float = 0.6
    n_classes: int = 6
    rmsnorm_eps: float = 1e-6
    rope_base: float = 10000.0
    init_std: float = 0.02

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ConfigError("embed_dim must be divisible by n_heads")
        if self.head_dim % 2:
            raise OddDim(f"per-head dimension {self.head_dim} must be even for rotary embeddings")
        if not 0 <= self.mask_rate < 1:
            raise ConfigError("mask_rate must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.n_heads

    @property
    def ffn_hidden(self) -> int:
        return int(round(8 * self.embed_dim / 3))

    @property
    def patch_dim(self) -> int:
        return self.n_axes * self.patch_len


def count_parameters(cfg: ModelConfig) -> int:
    """Closed-form learnable scalar count.

    blocks * (4 d^2 + 3 d h + 2 d)      attention Q/K/V/O, SwiGLU gate/up/down, two norm gains
    + (p d + d)                        patch embedding with bias
    + d + d                            mask token, final norm gain
    + (d p + p) + (d C + C)            reconstruction and classification heads
    """
    d, h, p, c = cfg.embed_dim, cfg.ffn_hidden, cfg.patch_dim, cfg.n_classes
    per_block = 4 * d * d + 3 * d * h + 2 * d
    return cfg.n_blocks * per_block + (p * d + d) + d + d + (d * p + p) + (d * c + c)


def rmsnorm(x: torch.Tensor, gain: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return x * gain / torch.sqrt((x * x).mean(dim=-1, keepdim=True) + eps)


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(dim))
        self.eps = eps

    def forward(self, x):
        return rmsnorm(x, self.gain, self.eps)


def rope_angles(positions: torch.Tensor, head_dim: int, base: float = 10000.0,
                dtype=torch.float32) -> torch.Tensor:
    if head_dim % 2:
        raise OddDim(f"rotary embeddings need an even dimension, got {head_dim}")
    k = torch.arange(head_dim // 2, dtype=torch.float64)
    theta = base ** (-2 * k / head_dim)
    return (positions.to(torch.float64)[..., None] * theta).to(dtype)


def rope_rotate(v: torch.Tensor, positions, base: float = 10000.0) -> torch.Tensor:
    """Rotate consecutive pairs (v[2k], v[2k+1]) by position * base^(-2k/dim).

    ``v`` is (..., L, dim) and ``positions`` broadcasts against (..., L).
    """
    positions = torch.as_tensor(positions)
    ang = rope_angles(positions, v.shape[-1], base, v.dtype)
    cos, sin = torch.cos(ang), torch.sin(ang)
    even, odd = v[..., 0::2], v[..., 1::2]
    out = torch.stack((even * cos - odd * sin, even * sin + odd * cos), dim=-1)
    return out.flatten(-2)


class Attention(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.embed_dim
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.base = cfg.rope_base
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d, bias=False)

    def _heads(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, x, positions, return_weights: bool = False):
        b, n, d = x.shape
        q = rope_rotate(self._heads(self.wq(x)), positions, self.base)
        k = rope_rotate(self._heads(self.wk(x)), positions, self.base)
        v = self._heads(self.wv(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        weights = torch.softmax(scores, dim=-1)
        out = self.wo((weights @ v).transpose(1, 2).reshape(b, n, d))
        return (out, weights) if return_weights else out


def silu(z):
    return z * torch.sigmoid(z)


class SwiGLU(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.w_gate = nn.Linear(dim, hidden, bias=False)
        self.w_up = nn.Linear(dim, hidden, bias=False)
        self.w_down = nn.Linear(hidden, dim, bias=False)

    def forward(self, x):
        return self.w_down(silu(self.w_gate(x)) * self.w_up(x))


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.attn_norm = RMSNorm(cfg.embed_dim, cfg.rmsnorm_eps)
        self.attn = Attention(cfg)
        self.ffn_norm = RMSNorm(cfg.embed_dim, cfg.rmsnorm_eps)
        self.ffn = SwiGLU(cfg.embed_dim, cfg.ffn_hidden)

    def forward(self, x, positions):
        x = x + self.attn(self.attn_norm(x), positions)
        return x + self.ffn(self.ffn_norm(x))


def num_masked(rate: float, n_patches: int) -> int:
    return int(math.ceil(rate * n_patches - 1e-9))


def random_mask(batch: int, n_patches: int, rate: float, rng: np.random.Generator) -> torch.Tensor:
    """Boolean (batch, n_patches) mask with exactly ceil(rate * L) True per row, uniform without replacement."""
    k = num_masked(rate, n_patches)
    mask = np.zeros((batch, n_patches), dtype=bool)
    if k:
        order = np.argsort(rng.random((batch, n_patches)), axis=1)
        np.put_along_axis(mask, order[:, :k], True, axis=1)
    return torch.from_numpy(mask)


class MaskedAutoencoder(nn.Module):
    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        d = cfg.embed_dim
        self.embed = nn.Linear(cfg.patch_dim, d)
        self.mask_token = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_blocks))
        self.final_norm = RMSNorm(d, cfg.rmsnorm_eps)
        self.recon_head = nn.Linear(d, cfg.patch_dim)
        self.cls_head = nn.Linear(d, cfg.n_classes)
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int = 0) -> None:
        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("gain"):
                    p.fill_(1.0)
                elif name.endswith("bias"):
                    p.zero_()
                else:
                    p.copy_(torch.randn(p.shape, generator=gen, dtype=torch.float64).to(p.dtype)
                            * self.cfg.init_std)

    def encoder_parameters(self):
        return [p for n, p in self.named_parameters() if not n.startswith(("recon_head", "cls_head"))]

    def head_parameters(self):
        return list(self.cls_head.parameters())

    # -- pipeline stages -------------------------------------------------
    def embed_patches(self, windows: torch.Tensor) -> torch.Tensor:
        """(B, 3, L*P) windows -> (B, L, d) tokens."""
        p = patchify(windows, self.cfg.patch_len)
        if p.shape[-2] * p.shape[-1] != self.cfg.patch_dim:
            raise ShapeMismatch(f"patch of {tuple(p.shape[-2:])} does not match patch_dim {self.cfg.patch_dim}")
        return self.embed(p.flatten(-2))

    def apply_mask(self, tokens: torch.Tensor, rate: float, rng: np.random.Generator):
        mask = random_mask(tokens.shape[0], tokens.shape[1], rate, rng)
        return torch.where(mask[..., None], self.mask_token.to(tokens.dtype), tokens), mask

    def encode(self, tokens: torch.Tensor, positions=None) -> torch.Tensor:
        if positions is None:
            positions = torch.arange(tokens.shape[-2])
        x = tokens
        for block in self.blocks:
            x = block(x, positions)
        return self.final_norm(x)

    def reconstruct(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, L, d) -> (B, 3, L*P)."""
        flat = self.recon_head(tokens)
        return unpatchify(flat.unflatten(-1, (self.cfg.n_axes, self.cfg.patch_len)))

    def classify(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.cls_head(tokens)

    # -- composed passes ---------------------------------------------------
    def forward_pretrain(self, windows: torch.Tensor, rng: np.random.Generator, rate: float | None = None):
        rate = self.cfg.mask_rate if rate is None else rate
        tokens, mask = self.apply_mask(self.embed_patches(windows), rate, rng)
        return self.reconstruct(self.encode(tokens)), mask

    def features(self, windows: torch.Tensor) -> torch.Tensor:
        """Unmasked encoder output tokens, (B, L, d)."""
        return self.encode(self.embed_patches(windows))

    def forward(self, windows: torch.Tensor) -> torch.Tensor:
        """Per-patch class logits with no masking, (B, L, C)."""
        return self.classify(self.features(windows))
