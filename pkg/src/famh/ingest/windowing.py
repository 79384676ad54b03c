"""Window placement, patching and patch-level label assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from famh.errors import (
    CoverageError,
    IndivisibleLength,
    NoUsableSegment,
    SegmentTooShort,
)
from famh.ingest.recording import LabelTrack, Recording30


@dataclass(frozen=True)
class WindowGeometry:
    """Window/patch layout in samples at 30 Hz.

    Defaults: 10 s patches, 300 patches (50 min), pretraining stride of
    270 patches (45 min, i.e. 5 min overlap), finetuning stride of 30 patches
    (5 min, i.e. 45 min overlap), 32 windows per recording, 8 recordings per batch.
    """

    patch_len: int = 300
    patch_count: int = 300
    pretrain_stride_patches: int = 270
    finetune_stride_patches: int = 30
    windows_per_recording: int = 32
    recordings_per_batch: int = 8

    @property
    def window_len(self) -> int:
        return self.patch_len * self.patch_count

    @property
    def pretrain_stride(self) -> int:
        return self.pretrain_stride_patches * self.patch_len

    @property
    def finetune_stride(self) -> int:
        return self.finetune_stride_patches * self.patch_len

    def pretrain_span(self, n_windows: int | None = None) -> int:
        n = self.windows_per_recording if n_windows is None else n_windows
        return (n - 1) * self.pretrain_stride + self.window_len


@dataclass
class Window:
    data: np.ndarray  # (3, patch_count * patch_len)
    source: tuple[str, int]


def pretrain_offsets(
    n_samples: int,
    geom: WindowGeometry,
    rng: np.random.Generator,
    n_windows: int | None = None,
) -> np.ndarray:
    """Window start offsets (relative to the segment start) for one pretraining draw.

    A segment long enough for the whole plan gets ``n_windows`` windows at the
    pretraining stride from a random origin. A shorter segment gets as many
    stride-spaced windows as fit and the plan is padded by resampling those
    windows with replacement.
    """
    n = geom.windows_per_recording if n_windows is None else n_windows
    if n_samples < geom.window_len:
        raise SegmentTooShort(geom.window_len, n_samples)
    fit = (n_samples - geom.window_len) // geom.pretrain_stride + 1
    k = min(n, fit)
    span = geom.pretrain_span(k)
    origin = int(rng.integers(0, n_samples - span + 1))
    offsets = origin + geom.pretrain_stride * np.arange(k)
    if k < n:
        extra = rng.choice(offsets, size=n - k, replace=True)
        offsets = np.concatenate([offsets, extra])
    return offsets.astype(np.int64)


def window_pretrain(
    segment: np.ndarray,
    rng_seed: int | np.random.Generator,
    geom: WindowGeometry = WindowGeometry(),
    n_windows: int | None = None,
    rec_id: str = "",
    segment_start: int = 0,
) -> list[Window]:
    rng = np.random.default_rng(rng_seed)
    offsets = pretrain_offsets(len(segment), geom, rng, n_windows)
    return [
        Window(segment[o:o + geom.window_len].T, (rec_id, segment_start + int(o)))
        for o in offsets
    ]


def segment_finetune_offsets(seg_len: int, geom: WindowGeometry) -> list[int]:
    if seg_len < geom.window_len:
        return []
    offsets = list(range(0, seg_len - geom.window_len + 1, geom.finetune_stride))
    last = seg_len - geom.window_len
    if offsets[-1] != last:
        offsets.append(last)
    return offsets


def finetune_offsets(rec: Recording30, geom: WindowGeometry) -> list[int]:
    out = []
    for start, end in rec.wear_segments:
        out.extend(start + o for o in segment_finetune_offsets(end - start, geom))
    if not out:
        raise NoUsableSegment(f"{rec.id}: no wear segment of at least {geom.window_len} samples")
    return out


def window_finetune(rec: Recording30, geom: WindowGeometry = WindowGeometry()) -> list[Window]:
    return [
        Window(rec.samples[o:o + geom.window_len].T, (rec.id, o))
        for o in finetune_offsets(rec, geom)
    ]


def embedding_offsets(rec: Recording30, geom: WindowGeometry) -> list[int]:
    """Non-overlapping windows (stride = window length) over every wear segment."""
    out = []
    for start, end in rec.wear_segments:
        out.extend(range(start, end - geom.window_len + 1, geom.window_len))
    return out


def patchify(x, patch_len: int):
    """(..., 3, L*P) -> (..., L, 3, P). Works on numpy arrays and torch tensors."""
    length = x.shape[-1]
    if patch_len <= 0 or length % patch_len:
        raise IndivisibleLength(f"window length {length} not divisible by patch length {patch_len}")
    lead = tuple(x.shape[:-2])
    return x.reshape(*lead, x.shape[-2], length // patch_len, patch_len).swapaxes(-3, -2)


def unpatchify(p):
    """(..., L, 3, P) -> (..., 3, L*P)."""
    lead = tuple(p.shape[:-3])
    n_patches, axes, patch_len = p.shape[-3:]
    return p.swapaxes(-3, -2).reshape(*lead, axes, n_patches * patch_len)


def map_labels(track: LabelTrack, start: int, geom: WindowGeometry) -> np.ndarray:
    """Majority-vote label per patch; ties, or a missing-label majority, give the missing index."""
    end = start + geom.window_len
    if start < 0 or end > len(track):
        raise CoverageError(f"label track of length {len(track)} does not cover [{start}, {end})")
    g = track.missing
    chunk = track.indices[start:end].reshape(geom.patch_count, geom.patch_len)
    counts = np.zeros((geom.patch_count, g + 1), dtype=np.int64)
    np.add.at(counts, (np.arange(geom.patch_count)[:, None], chunk), 1)
    best = counts.argmax(axis=1)
    top = counts[np.arange(geom.patch_count), best]
    tied = (counts == top[:, None]).sum(axis=1) > 1
    best[tied] = g
    return best
