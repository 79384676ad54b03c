"""Reverse-mode gradients of a recorded scalar loss."""

from __future__ import annotations

from typing import Mapping

import torch

from famh.errors import NaNGradient, NonScalarOutput


def backward(loss: torch.Tensor, params: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    """Gradient of ``loss`` w.r.t. every named tensor; unused tensors get exact zeros.

    Raises NonScalarOutput for non-scalar losses and NaNGradient if any gradient
    entry is not finite.
    """
    if loss.numel() != 1:
        raise NonScalarOutput(f"loss must be scalar, got shape {tuple(loss.shape)}")
    names = list(params)
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss.reshape(()), tensors, allow_unused=True)
    out = {}
    for name, t, g in zip(names, tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        if not torch.isfinite(g).all():
            raise NaNGradient(f"non-finite gradient for {name}")
        out[name] = g
    return out
