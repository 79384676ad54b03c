"""Pretraining and linear-probe finetuning loops."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from famh.errors import NaNGradient, TooFewFrames
from famh.ingest.batching import RecordingStore, iter_batches, plan_pretrain_epoch, usable_segments
from famh.ingest.recording import LabelTrack
from famh.ingest.windowing import (
    WindowGeometry,
    embedding_offsets,
    finetune_offsets,
    map_labels,
    pretrain_offsets,
)
from famh.metrics import argmax_lowest, balanced_accuracy, cohens_kappa, confusion
from famh.model import MaskedAutoencoder
from famh.spectral import LossWeights, SpectralConfig, masked_aggregate
from famh.training.autodiff import backward
from famh.training.checkpoint import Checkpoint, load_into_model
from famh.training.losses import class_weights, weighted_ce
from famh.training.optim import Adam, ScheduleConfig, lr_at

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "train_loss", "train_mse", "train_lmm",
               "val_loss", "val_mse", "val_lmm", "val_lmv")

_VAL_STREAM = 0x7A1  # rng stream id for the fixed validation draw


def split_ids(ids: Sequence[str], val_fraction: float, seed: int) -> tuple[list[str], list[str]]:
    """Seeded split by recording id. At least one validation id whenever there are two or more ids."""
    ids = sorted(ids)
    perm = np.random.default_rng(seed).permutation(len(ids))
    n_val = 0 if len(ids) < 2 else min(len(ids) - 1, max(1, int(round(val_fraction * len(ids)))))
    val = sorted(ids[i] for i in perm[:n_val])
    train = sorted(ids[i] for i in perm[n_val:])
    return train, val


def subset_ids(ids: Sequence[str], fraction: float, seed: int) -> list[str]:
    """Nested subsets: a smaller fraction is always a subset of a larger one for the same seed."""
    ids = sorted(ids)
    if fraction >= 1.0:
        return ids
    perm = np.random.default_rng(seed).permutation(len(ids))
    k = max(1, int(round(fraction * len(ids))))
    return sorted(ids[i] for i in perm[:k])


@dataclass
class PretrainSettings:
    geom: WindowGeometry = field(default_factory=WindowGeometry)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    epochs: int = 20
    mask_seed: int = 0
    window_seed: int = 0
    workers: int = 1
    val_batch: int = 64


@dataclass
class PretrainResult:
    log: list[dict]
    optimizer: Adam
    step: int


def _model_params(model: torch.nn.Module) -> dict[str, torch.nn.Parameter]:
    return dict(model.named_parameters())


def pretrain_params(model: MaskedAutoencoder) -> dict[str, torch.nn.Parameter]:
    """Everything except the classification head, which pretraining never touches."""
    return {n: p for n, p in model.named_parameters() if not n.startswith("cls_head")}


def validation_windows(store: RecordingStore, ids: Sequence[str], geom: WindowGeometry, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, _VAL_STREAM])
    out = []
    for rid in ids:
        rec = store[rid]
        segs = usable_segments(rec, geom)
        if not segs:
            continue
        start, end = rec.wear_segments[segs[0]]
        for o in pretrain_offsets(end - start, geom, rng) + start:
            out.append(rec.samples[o:o + geom.window_len].T)
    return np.stack(out).astype(np.float32) if out else np.zeros((0, 3, geom.window_len), np.float32)


def evaluate_reconstruction(model: MaskedAutoencoder, windows: np.ndarray, s: PretrainSettings) -> dict:
    """Weighted loss and unweighted MSE/LMM/LMV masked averages over a fixed window set with a fixed mask."""
    rng = np.random.default_rng([s.mask_seed, _VAL_STREAM])
    dtype = next(model.parameters()).dtype
    names = ("mse", "lmm", "lmv")
    sums = dict.fromkeys(("loss",) + names, 0.0)
    n = 0
    with torch.no_grad():
        for i in range(0, len(windows), s.val_batch):
            x = torch.from_numpy(windows[i:i + s.val_batch]).to(dtype)
            recon, mask = model.forward_pretrain(x, rng)
            try:
                total, parts = masked_aggregate(x, recon, mask, s.weights, s.spectral, s.geom.patch_len, names)
            except TooFewFrames:
                total, parts = masked_aggregate(x, recon, mask, s.weights, s.spectral, s.geom.patch_len,
                                                ("mse", "lmm"))
                parts["lmv"] = math.nan
            sums["loss"] += total.item() * len(x)
            for k in names:
                sums[k] += parts[k] * len(x)
            n += len(x)
    return {k: v / n if n else math.nan for k, v in sums.items()}


def pretrain(
    model: MaskedAutoencoder,
    store: RecordingStore,
    train_ids: Sequence[str],
    val_ids: Sequence[str],
    settings: PretrainSettings,
    resume: Checkpoint | None = None,
    on_epoch: Callable[[int, int, Adam, dict], None] | None = None,
    on_abort: Callable[[int, int, Adam], None] | None = None,
) -> PretrainResult:
    """Masked reconstruction pretraining.

    Every epoch draws one window plan per training recording (seeded by the
    window seed and epoch number), masks with a generator seeded by the mask
    seed and epoch, and takes one Adam step per batch at ``lr_at``. Because all
    randomness is derived from (seed, epoch), resuming from an end-of-epoch
    checkpoint reproduces an uninterrupted run exactly.
    """
    s = settings
    params = pretrain_params(model)
    adam = Adam(params)
    start_epoch, step = 1, 0
    if resume is not None:
        load_into_model(model, resume.params, strict=False)  # cls head is not part of pretraining
        adam.load_state_tensors(resume.state)
        start_epoch = int(resume.meta("epoch", 0)) + 1
        step = int(resume.meta("step", 0))
    steps_per_epoch = max(1, math.ceil(len(train_ids) / s.geom.recordings_per_batch))
    val_windows = validation_windows(store, val_ids or train_ids, s.geom, s.window_seed)
    dtype = next(model.parameters()).dtype
    rows = []
    for epoch in range(start_epoch, s.epochs + 1):
        model.train()
        plans = plan_pretrain_epoch(store, list(train_ids), s.geom, np.random.default_rng([s.window_seed, epoch]))
        mask_rng = np.random.default_rng([s.mask_seed, epoch])
        acc = {"loss": 0.0, "mse": 0.0, "lmm": 0.0}
        seen = 0
        lr = 0.0
        for batch in iter_batches(plans, store, s.geom.window_len, s.workers):
            x = torch.from_numpy(batch).to(dtype)
            recon, mask = model.forward_pretrain(x, mask_rng)
            loss, parts = masked_aggregate(x, recon, mask, s.weights, s.spectral, s.geom.patch_len, ("mse", "lmm"))
            try:
                grads = backward(loss, params)
            except NaNGradient:
                if on_abort is not None:
                    on_abort(epoch - 1, step, adam)
                raise
            lr = lr_at(step, steps_per_epoch, s.schedule)
            adam.step(grads, lr)
            step += 1
            acc["loss"] += loss.item() * len(x)
            acc["mse"] += parts["mse"] * len(x)
            acc["lmm"] += parts["lmm"] * len(x)
            seen += len(x)
        model.eval()
        val = evaluate_reconstruction(model, val_windows, s)
        row = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": acc["loss"] / seen,
            "train_mse": acc["mse"] / seen,
            "train_lmm": acc["lmm"] / seen,
            "val_loss": val["loss"],
            "val_mse": val["mse"],
            "val_lmm": val["lmm"],
            "val_lmv": val["lmv"],
        }
        rows.append(row)
        log.info("pretrain epoch %d: train %.5f val %.5f (lmm %.5f mse %.5f)",
                 epoch, row["train_loss"], row["val_loss"], row["val_lmm"], row["val_mse"])
        if on_epoch is not None:
            on_epoch(epoch, step, adam, row)
    return PretrainResult(rows, adam, step)


# -- finetuning -------------------------------------------------------------

@dataclass
class FinetuneSettings:
    geom: WindowGeometry = field(default_factory=WindowGeometry)
    epochs: int = 70
    lr: float = 1e-3
    batch_windows: int = 32
    seed: int = 0
    feature_batch: int = 32


@dataclass
class FinetuneResult:
    log: list[dict]
    class_weights: np.ndarray
    confusion: np.ndarray | None


def collect_features(
    model: MaskedAutoencoder,
    store: RecordingStore,
    labels: Mapping[str, LabelTrack],
    ids: Sequence[str],
    geom: WindowGeometry,
    overlapping: bool,
    batch: int = 32,
) -> tuple[torch.Tensor, np.ndarray]:
    """Frozen-encoder features (N, L, d) and patch labels (N, L) for finetuning windows.

    ``overlapping`` selects the finetuning stride; otherwise windows tile each
    segment without overlap (used for evaluation so every patch counts once).
    """
    feats, labs = [], []
    dtype = next(model.parameters()).dtype
    model.eval()
    for rid in ids:
        rec = store[rid]
        offsets = finetune_offsets(rec, geom) if overlapping else embedding_offsets(rec, geom)
        track = labels[rid]
        for i in range(0, len(offsets), batch):
            chunk = offsets[i:i + batch]
            x = np.stack([rec.samples[o:o + geom.window_len].T for o in chunk])
            with torch.no_grad():
                feats.append(model.features(torch.from_numpy(x).to(dtype)))
            labs.append(np.stack([map_labels(track, o, geom) for o in chunk]))
    if not feats:
        d = model.cfg.embed_dim
        return torch.zeros((0, geom.patch_count, d), dtype=dtype), np.zeros((0, geom.patch_count), np.int64)
    return torch.cat(feats), np.concatenate(labs)


def probe_metrics(model: MaskedAutoencoder, feats: torch.Tensor, labels: np.ndarray) -> dict:
    n_classes = model.cfg.n_classes
    with torch.no_grad():
        logits = model.classify(feats).numpy()
    cm = confusion(argmax_lowest(logits), labels, n_classes, n_classes)
    out = {"confusion": cm}
    if cm.sum() == 0:
        out.update(balanced_accuracy=math.nan, kappa=math.nan)
        return out
    out["balanced_accuracy"] = balanced_accuracy(cm)
    try:
        out["kappa"] = cohens_kappa(cm)
    except ArithmeticError:
        out["kappa"] = math.nan
    return out


def finetune(
    model: MaskedAutoencoder,
    store: RecordingStore,
    labels: Mapping[str, LabelTrack],
    train_ids: Sequence[str],
    val_ids: Sequence[str],
    settings: FinetuneSettings,
) -> FinetuneResult:
    """Train only the classification head with weighted cross-entropy at a flat learning rate.

    The encoder is frozen and unmasked, so its features are computed once and reused.
    """
    s = settings
    n_classes = model.cfg.n_classes
    train_x, train_y = collect_features(model, store, labels, train_ids, s.geom, True, s.feature_batch)
    val_x, val_y = collect_features(model, store, labels, val_ids, s.geom, False, s.feature_batch)
    weights = class_weights(train_y, n_classes, n_classes)
    head = {n: p for n, p in model.named_parameters() if n.startswith("cls_head")}
    adam = Adam(head)
    sched = ScheduleConfig(base_lr=s.lr, mode="finetune_flat")
    rows = []
    cm = None
    for epoch in range(1, s.epochs + 1):
        rng = np.random.default_rng([s.seed, epoch])
        order = rng.permutation(len(train_x))
        total, count = 0.0, 0
        for i in range(0, len(order), s.batch_windows):
            idx = order[i:i + s.batch_windows]
            yb = train_y[idx]
            if np.all(yb == n_classes):
                continue
            loss = weighted_ce(model.classify(train_x[idx]), torch.from_numpy(yb), weights, n_classes)
            grads = backward(loss, head)
            adam.step(grads, lr_at(0, 1, sched))
            total += loss.item() * len(idx)
            count += len(idx)
        m = probe_metrics(model, val_x, val_y) if len(val_x) else {}
        cm = m.get("confusion")
        rows.append({
            "epoch": epoch,
            "train_loss": total / count if count else math.nan,
            "val_balanced_accuracy": m.get("balanced_accuracy", math.nan),
            "val_kappa": m.get("kappa", math.nan),
        })
        log.info("finetune epoch %d: loss %.4f BA %.3f kappa %.3f", epoch, rows[-1]["train_loss"],
                 rows[-1]["val_balanced_accuracy"], rows[-1]["val_kappa"])
    return FinetuneResult(rows, weights, cm)
