"""Class weighting and the weighted cross-entropy used for finetuning."""

from __future__ import annotations

import logging

import numpy as np
import torch

from famh.errors import AllLabelsMissing, NoLabels

log = logging.getLogger(__name__)


def class_weights(labels, n_classes: int, missing: int | None = None) -> np.ndarray:
    """Inverse-prevalence weights N/count_c, rescaled to mean 1 over the classes present.

    Classes that never occur get weight 0 (with a warning); the missing label is not counted.
    """
    missing = n_classes if missing is None else missing
    labels = np.asarray(labels).ravel()
    labels = labels[labels != missing]
    if labels.size == 0:
        raise NoLabels("no labelled patches")
    counts = np.bincount(labels, minlength=n_classes)[:n_classes].astype(np.float64)
    present = counts > 0
    w = np.zeros(n_classes)
    w[present] = labels.size / counts[present]
    w[present] /= w[present].mean()
    if not present.all():
        log.warning("classes absent from training labels get weight 0: %s", np.flatnonzero(~present).tolist())
    return w


def weighted_ce(logits: torch.Tensor, labels, weights, missing: int) -> torch.Tensor:
    """Mean over labelled patches of -w_y * log softmax(logits)_y; patches labelled ``missing`` are skipped."""
    labels = torch.as_tensor(labels).reshape(-1)
    logits = logits.reshape(-1, logits.shape[-1])
    keep = labels != missing
    if not bool(keep.any()):
        raise AllLabelsMissing("every patch carries the missing label")
    y = labels[keep]
    logp = torch.log_softmax(logits[keep], dim=-1)
    w = torch.as_tensor(weights, dtype=logits.dtype)
    return -(w[y] * logp.gather(1, y[:, None]).squeeze(1)).mean()
