"""Adam and the learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import torch

from famh.errors import ConfigError, ShapeMismatch


@dataclass(frozen=True)
class ScheduleConfig:
    base_lr: float = 1e-3
    warmup_epochs: int = 1
    restart_period_epochs: int = 1
    eta_min: float = 0.0
    mode: str = "pretrain_cosine_restart"

    def __post_init__(self):
        if not self.base_lr > 0 or self.eta_min < 0:
            raise ConfigError("base_lr must be positive and eta_min non-negative")
        if self.mode not in ("pretrain_cosine_restart", "finetune_flat"):
            raise ConfigError(f"unknown schedule mode {self.mode!r}")
        if self.restart_period_epochs < 1 or self.warmup_epochs < 0:
            raise ConfigError("restart period must be >= 1 epoch and warmup >= 0")


def lr_at(step: int, steps_per_epoch: int, cfg: ScheduleConfig = ScheduleConfig()) -> float:
    """Linear warm-up from 0, then cosine annealing restarted every period; flat in finetune mode."""
    if cfg.mode == "finetune_flat":
        return cfg.base_lr
    warm = cfg.warmup_epochs * steps_per_epoch
    if step < warm:
        return cfg.base_lr * step / warm
    period = cfg.restart_period_epochs * steps_per_epoch
    frac = ((step - warm) % period) / period
    return cfg.eta_min + 0.5 * (cfg.base_lr - cfg.eta_min) * (1 + math.cos(math.pi * frac))


class Adam:
    """Adam without weight decay over a fixed set of named tensors."""

    def __init__(self, params: Mapping[str, torch.nn.Parameter],
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.names = list(params)
        self.params = [params[n] for n in self.names]
        self.opt = torch.optim.Adam(self.params, lr=0.0, betas=betas, eps=eps, foreach=False)

    def step(self, grads: Mapping[str, torch.Tensor], lr: float) -> None:
        for name, p in zip(self.names, self.params):
            g = grads[name]
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient for {name}: {tuple(g.shape)} vs {tuple(p.shape)}")
            p.grad = g.detach().clone()
        for group in self.opt.param_groups:
            group["lr"] = lr
        self.opt.step()
        for p in self.params:
            p.grad = None

    @property
    def step_count(self) -> int:
        state = self.opt.state.get(self.params[0], {})
        return int(state["step"]) if "step" in state else 0

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, p in zip(self.names, self.params):
            st = self.opt.state.get(p)
            if not st:
                continue
            out[f"adam.{name}.exp_avg"] = st["exp_avg"]
            out[f"adam.{name}.exp_avg_sq"] = st["exp_avg_sq"]
            out[f"adam.{name}.step"] = torch.as_tensor(st["step"], dtype=torch.float32)
        return out

    def load_state_tensors(self, tensors: Mapping[str, torch.Tensor]) -> None:
        for name, p in zip(self.names, self.params):
            key = f"adam.{name}.exp_avg"
            if key not in tensors:
                continue
            m = torch.as_tensor(tensors[key]).to(p.dtype)
            v = torch.as_tensor(tensors[f"adam.{name}.exp_avg_sq"]).to(p.dtype)
            if m.shape != p.shape or v.shape != p.shape:
                raise ShapeMismatch(f"optimizer state for {name} has shape {tuple(m.shape)}")
            self.opt.state[p] = {
                "step": torch.as_tensor(float(tensors[f"adam.{name}.step"]), dtype=torch.float32),
                "exp_avg": m.clone(),
                "exp_avg_sq": v.clone(),
            }
