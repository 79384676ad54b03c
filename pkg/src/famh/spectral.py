"""STFT magnitude summaries and the reconstruction losses built on them.

All functions operate on the last tensor dimension (time) and broadcast over
any leading dimensions, so a batch of patches of shape (..., 3, P) yields
per-patch-axis losses of shape (..., 3).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from famh.errors import (
    AllZeroWeights,
    BadLength,
    ConfigError,
    EmptyMask,
    ShapeMismatch,
    TooFewFrames,
)
from famh.ingest.windowing import patchify


@dataclass(frozen=True)
class SpectralConfig:
    n_fft: int = 32
    epsilon: float = 0.1
    # "max" guards the log from below; "min" follows the formula as printed
    clamp: str = "max"
    unbiased_var: bool = False

    def __post_init__(self):
        if self.n_fft < 2 or self.n_fft % 2:
            raise BadLength(f"n_fft must be even and >= 2, got {self.n_fft}")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.clamp not in ("max", "min"):
            raise ConfigError(f"clamp must be 'max' or 'min', got {self.clamp!r}")

    @property
    def hop(self) -> int:
        return self.n_fft // 2

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    def n_frames(self, length: int) -> int:
        return math.ceil(length / self.hop)


@dataclass(frozen=True)
class LossWeights:
    w_lmm: float = 1.0
    w_mse: float = 0.0
    w_lmv: float = 0.0

    def __post_init__(self):
        ws = (self.w_lmm, self.w_mse, self.w_lmv)
        if any(w < 0 for w in ws):
            raise ConfigError("loss weights must be non-negative")
        if not any(w > 0 for w in ws):
            raise AllZeroWeights("at least one loss weight must be positive")

    def items(self):
        return (("lmm", self.w_lmm), ("mse", self.w_mse), ("lmv", self.w_lmv))


def _as_tensor(x) -> torch.Tensor:
    return x if isinstance(x, torch.Tensor) else torch.as_tensor(x)


def hann_window(n: int, dtype=torch.float64) -> torch.Tensor:
    """Periodic Hann window, 0.5 * (1 - cos(2 pi k / n))."""
    if n < 2 or n % 2:
        raise BadLength(f"Hann window length must be even and >= 2, got {n}")
    k = torch.arange(n, dtype=dtype)
    return 0.5 * (1 - torch.cos(2 * math.pi * k / n))


def stft_magnitude(x, cfg: SpectralConfig = SpectralConfig()) -> torch.Tensor:
    """|STFT| with frame m centred on sample m*hop; returns (..., n_bins, n_frames)."""
    x = _as_tensor(x)
    if not x.is_floating_point():
        x = x.to(torch.get_default_dtype())
    n, hop = cfg.n_fft, cfg.hop
    n_frames = cfg.n_frames(x.shape[-1])
    padded = F.pad(x, (n // 2, n // 2))
    frames = padded.unfold(-1, n, hop)[..., :n_frames, :]
    spec = torch.fft.rfft(frames * hann_window(n, x.dtype), dim=-1)
    return spec.abs().transpose(-1, -2)


def _log_clamped(v: torch.Tensor, cfg: SpectralConfig) -> torch.Tensor:
    if cfg.clamp == "max":
        return torch.log(torch.clamp_min(v, cfg.epsilon))
    return torch.log(torch.clamp_max(v, cfg.epsilon))


def log_mean_magnitude(x, cfg: SpectralConfig = SpectralConfig()) -> torch.Tensor:
    """U(x): log of the time-averaged STFT magnitude per frequency bin."""
    return _log_clamped(stft_magnitude(x, cfg).mean(dim=-1), cfg)


def log_var_magnitude(x, cfg: SpectralConfig = SpectralConfig()) -> torch.Tensor:
    """V(x): log of the across-frame variance of the STFT magnitude per frequency bin."""
    mag = stft_magnitude(x, cfg)
    if mag.shape[-1] < 2:
        raise TooFewFrames(f"variance needs at least 2 frames, got {mag.shape[-1]}")
    return _log_clamped(mag.var(dim=-1, correction=1 if cfg.unbiased_var else 0), cfg)


def _check_pair(x, x_hat):
    x, x_hat = _as_tensor(x), _as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"{tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return x, x_hat


def mse_patch_loss(x, x_hat) -> torch.Tensor:
    x, x_hat = _check_pair(x, x_hat)
    return ((x_hat - x) ** 2).mean(dim=-1)


def lmm_loss(x, x_hat, cfg: SpectralConfig = SpectralConfig()) -> torch.Tensor:
    x, x_hat = _check_pair(x, x_hat)
    return ((log_mean_magnitude(x_hat, cfg) - log_mean_magnitude(x, cfg)) ** 2).mean(dim=-1)


def lmv_loss(x, x_hat, cfg: SpectralConfig = SpectralConfig()) -> torch.Tensor:
    x, x_hat = _check_pair(x, x_hat)
    return ((log_var_magnitude(x_hat, cfg) - log_var_magnitude(x, cfg)) ** 2).mean(dim=-1)


_COMPONENTS = {
    "lmm": lambda x, xh, cfg: lmm_loss(x, xh, cfg),
    "mse": lambda x, xh, cfg: mse_patch_loss(x, xh),
    "lmv": lambda x, xh, cfg: lmv_loss(x, xh, cfg),
}


def combined_loss(x, x_hat, weights: LossWeights, cfg: SpectralConfig = SpectralConfig()) -> torch.Tensor:
    """w_lmm * LMM + w_mse * MSE + w_lmv * LMV for each patch-axis signal."""
    x, x_hat = _check_pair(x, x_hat)
    total = None
    for name, w in weights.items():
        if w == 0:
            continue
        term = w * _COMPONENTS[name](x, x_hat, cfg)
        total = term if total is None else total + term
    return total


def masked_aggregate(
    X,
    X_hat,
    mask,
    weights: LossWeights,
    cfg: SpectralConfig = SpectralConfig(),
    patch_len: int = 300,
    components: tuple[str, ...] = (),
):
    """Masked reconstruction loss over windows of shape (..., 3, L*P) with mask (..., L).

    Per window: the combined loss is summed over the three axes of each masked
    patch and averaged over masked patches; unmasked patches never enter the
    computation. Batched input returns the mean over windows.

    When ``components`` names unweighted terms ("lmm", "mse", "lmv") a second
    value is returned mapping each to its detached masked average.
    """
    X, X_hat = _check_pair(X, X_hat)
    mask = _as_tensor(mask).to(torch.bool)
    P, Ph = patchify(X, patch_len), patchify(X_hat, patch_len)
    if mask.shape != P.shape[:-2]:
        raise ShapeMismatch(f"mask shape {tuple(mask.shape)} vs patches {tuple(P.shape[:-2])}")
    flat_mask = mask.reshape(-1, mask.shape[-1])
    counts = flat_mask.sum(dim=-1)
    if torch.any(counts == 0):
        raise EmptyMask("every window needs at least one masked patch")
    window_idx = torch.nonzero(flat_mask, as_tuple=True)[0]
    sel = P.reshape(-1, *P.shape[-3:])[flat_mask]
    sel_hat = Ph.reshape(-1, *Ph.shape[-3:])[flat_mask]

    def aggregate(per_patch_axis: torch.Tensor) -> torch.Tensor:
        per_patch = per_patch_axis.sum(dim=-1)
        sums = torch.zeros(len(counts), dtype=per_patch.dtype).index_add(0, window_idx, per_patch)
        return (sums / counts).mean()

    total = aggregate(combined_loss(sel, sel_hat, weights, cfg))
    if not components:
        return total
    with torch.no_grad():
        parts = {name: aggregate(_COMPONENTS[name](sel, sel_hat, cfg)).item() for name in components}
    return total, parts
