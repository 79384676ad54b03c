from famh.training.autodiff import backward
from famh.training.checkpoint import Checkpoint, load_checkpoint, load_into_model, save_checkpoint
from famh.training.losses import class_weights, weighted_ce
from famh.training.loops import (
    FinetuneSettings,
    PretrainSettings,
    finetune,
    pretrain,
    split_ids,
    subset_ids,
)
from famh.training.optim import Adam, ScheduleConfig, lr_at

__all__ = [
    "Adam",
    "Checkpoint",
    "FinetuneSettings",
    "PretrainSettings",
    "ScheduleConfig",
    "backward",
    "class_weights",
    "finetune",
    "load_checkpoint",
    "load_into_model",
    "lr_at",
    "pretrain",
    "save_checkpoint",
    "split_ids",
    "subset_ids",
    "weighted_ce",
]
