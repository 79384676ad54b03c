"""Classification metrics, embedding export and PCA."""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch

from famh.errors import DataError, DegenerateMarginals, EmptyMatrix, LengthMismatch

log = logging.getLogger(__name__)


class RankDeficient(UserWarning):
    pass


def argmax_lowest(logits) -> np.ndarray:
    """Argmax over the last axis; ties resolve to the lowest class index."""
    return np.asarray(logits).argmax(axis=-1)


def confusion(preds, truths, n_classes: int, missing: int | None = None) -> np.ndarray:
    """C x C counts, rows = true class, columns = predicted; pairs whose truth is ``missing`` are dropped."""
    preds = np.asarray(preds).ravel()
    truths = np.asarray(truths).ravel()
    if preds.shape != truths.shape:
        raise LengthMismatch(f"{preds.size} predictions vs {truths.size} truths")
    missing = n_classes if missing is None else missing
    keep = truths != missing
    p, t = preds[keep].astype(np.int64), truths[keep].astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= n_classes or t.min() < 0 or t.max() >= n_classes):
        raise DataError("class index out of range")
    return np.bincount(t * n_classes + p, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def balanced_accuracy(cm) -> float:
    """Mean per-class recall over classes with at least one true instance."""
    cm = np.asarray(cm, dtype=np.float64)
    support = cm.sum(axis=1)
    if support.sum() == 0:
        raise EmptyMatrix("confusion matrix is empty")
    present = support > 0
    if not present.all():
        log.info("balanced accuracy excludes classes without true instances: %s",
                 np.flatnonzero(~present).tolist())
    return float(np.mean(np.diag(cm)[present] / support[present]))


def cohens_kappa(cm) -> float:
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total == 0:
        raise EmptyMatrix("confusion matrix is empty")
    p_o = np.trace(cm) / total
    p_e = float(cm.sum(axis=1) @ cm.sum(axis=0)) / total**2
    if p_e >= 1.0:
        raise DegenerateMarginals("expected agreement is 1; kappa undefined")
    return float((p_o - p_e) / (1 - p_e))


def metrics_dict(cm) -> dict:
    cm = np.asarray(cm)
    return {
        "balanced_accuracy": balanced_accuracy(cm),
        "kappa": cohens_kappa(cm),
        "confusion": cm.astype(int).tolist(),
    }


@dataclass
class EmbeddingSet:
    vectors: np.ndarray  # (N, d)
    labels: np.ndarray  # (N,)


def export_embeddings(model, store: Mapping, labels: Mapping, ids: Sequence[str], geom,
                      batch_windows: int = 32) -> EmbeddingSet:
    """Encoder outputs for every patch of non-overlapping windows, without masking."""
    from famh.ingest.windowing import embedding_offsets, map_labels

    vecs, labs = [], []
    model.eval()
    dtype = next(model.parameters()).dtype
    for rid in ids:
        rec = store[rid]
        offsets = embedding_offsets(rec, geom)
        for i in range(0, len(offsets), batch_windows):
            chunk = offsets[i:i + batch_windows]
            x = np.stack([rec.samples[o:o + geom.window_len].T for o in chunk])
            with torch.no_grad():
                f = model.features(torch.from_numpy(x).to(dtype))
            vecs.append(f.reshape(-1, f.shape[-1]).numpy())
            track = labels.get(rid) if labels is not None else None
            if track is None:
                missing = model.cfg.n_classes
                labs.append(np.full(len(chunk) * geom.patch_count, missing, dtype=np.int64))
            else:
                labs.append(np.concatenate([map_labels(track, o, geom) for o in chunk]))
    d = model.cfg.embed_dim
    if not vecs:
        return EmbeddingSet(np.zeros((0, d)), np.zeros(0, dtype=np.int64))
    return EmbeddingSet(np.concatenate(vecs), np.concatenate(labs))


def pca_project(x, k: int, tol: float = 1e-12):
    """Project mean-centred rows onto the top-k covariance eigenvectors.

    Each eigenvector is signed so that its largest-magnitude entry is positive.
    Returns (projection (N, k'), explained variance ratios (k',)) where k' < k
    only when fewer than k eigenvalues are non-zero (a RankDeficient warning is issued).
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if not n > k >= 1:
        raise DataError(f"PCA needs N > k >= 1 (N={n}, k={k})")
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / (n - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    total = evals.clip(min=0).sum()
    nonzero = int(np.sum(evals > tol * max(evals[0], tol)))
    if nonzero < k:
        warnings.warn(f"only {nonzero} non-zero eigenvalues, returning {nonzero} components", RankDeficient)
        k = nonzero
    vecs = evecs[:, :k]
    pivot = np.abs(vecs).argmax(axis=0)
    vecs = vecs * np.sign(vecs[pivot, np.arange(k)])
    ratios = evals[:k] / total if total > 0 else np.zeros(k)
    return xc @ vecs, ratios
