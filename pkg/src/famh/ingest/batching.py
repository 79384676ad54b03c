"""Batch planning and assembly for pretraining."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

import numpy as np

from famh.errors import BadOffset, MissingRecording, SegmentTooShort
from famh.ingest.recording import Recording30
from famh.ingest.windowing import WindowGeometry, pretrain_offsets


@dataclass
class BatchPlan:
    """Which windows make up one batch: (recording id, absolute start offsets) pairs in order."""

    entries: list[tuple[str, list[int]]] = field(default_factory=list)

    @property
    def size(self) -> int:
        return sum(len(offs) for _, offs in self.entries)


class RecordingStore(Mapping[str, Recording30]):
    """Read-only id -> recording mapping. Populated once, then shared by readers."""

    def __init__(self, recordings: Sequence[Recording30] = ()):
        self._recs: dict[str, Recording30] = {}
        for rec in recordings:
            self.add(rec)

    def add(self, rec: Recording30) -> None:
        self._recs[rec.id] = rec

    def __getitem__(self, key: str) -> Recording30:
        try:
            return self._recs[key]
        except KeyError:
            raise MissingRecording(f"unknown recording {key!r}") from None

    def __iter__(self):
        return iter(self._recs)

    def __len__(self) -> int:
        return len(self._recs)


def usable_segments(rec: Recording30, geom: WindowGeometry) -> list[int]:
    return [k for k, (s, e) in enumerate(rec.wear_segments) if e - s >= geom.window_len]


def plan_pretrain_epoch(
    store: RecordingStore,
    ids: Sequence[str],
    geom: WindowGeometry,
    rng: np.random.Generator,
) -> list[BatchPlan]:
    """One epoch: every recording contributes one random draw of windows; recordings are shuffled
    and grouped ``recordings_per_batch`` at a time."""
    order = [ids[i] for i in rng.permutation(len(ids))]
    per_rec = []
    for rid in order:
        rec = store[rid]
        segs = usable_segments(rec, geom)
        if not segs:
            raise SegmentTooShort(geom.window_len, max((e - s for s, e in rec.wear_segments), default=0))
        k = segs[int(rng.integers(len(segs)))]
        start, end = rec.wear_segments[k]
        offs = pretrain_offsets(end - start, geom, rng) + start
        per_rec.append((rid, offs.tolist()))
    step = geom.recordings_per_batch
    return [BatchPlan(per_rec[i:i + step]) for i in range(0, len(per_rec), step)]


def assemble_batch(plan: BatchPlan, store: Mapping[str, Recording30], window_len: int) -> np.ndarray:
    """Stack the planned windows, in plan order, into a (B, 3, window_len) float32 array."""
    out = np.empty((plan.size, 3, window_len), dtype=np.float32)
    row = 0
    for rid, offsets in plan.entries:
        if rid not in store:
            raise MissingRecording(f"unknown recording {rid!r}")
        samples = store[rid].samples
        for o in offsets:
            if o < 0 or o + window_len > len(samples):
                raise BadOffset(f"{rid}: window [{o}, {o + window_len}) outside 0..{len(samples)}")
            out[row] = samples[o:o + window_len].T
            row += 1
    return out


def iter_batches(
    plans: Sequence[BatchPlan],
    store: Mapping[str, Recording30],
    window_len: int,
    workers: int = 1,
) -> Iterator[np.ndarray]:
    """Yield assembled batches in plan order, optionally prefetching on worker threads."""
    if workers <= 1:
        for plan in plans:
            yield assemble_batch(plan, store, window_len)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(lambda p: assemble_batch(p, store, window_len), plans)
