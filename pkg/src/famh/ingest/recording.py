"""Recording containers and their on-disk formats (CSV, FAMH binary, label CSV)."""

from __future__ import annotations

import csv
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from famh.errors import (
    BadMagic,
    DataError,
    EmptyFile,
    NonMonotoneTime,
    ParseError,
    TruncatedFile,
    UnsupportedVersion,
)

MAGIC = b"FAMH"
VERSION = 1
_HEADER = struct.Struct("<4sHfQ")

ACTIVITY_CLASSES = ("bicycling", "walking", "mixed", "vehicle", "sit-stand", "sleep")


@dataclass
class RawRecording:
    """Tri-axial acceleration in g at the source rate. ``samples`` is (n, 3)."""

    id: str
    sample_rate_hz: float
    samples: np.ndarray

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.ndim != 2 or self.samples.shape[1] != 3:
            raise DataError(f"{self.id}: samples must be (n, 3), got {self.samples.shape}")
        if len(self.samples) < 1:
            raise DataError(f"{self.id}: empty recording")
        if not self.sample_rate_hz > 0:
            raise DataError(f"{self.id}: sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise DataError(f"{self.id}: non-finite samples")

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class Recording30:
    """A preprocessed recording at 30 Hz with its wear segments (half-open sample ranges)."""

    id: str
    samples: np.ndarray
    wear_segments: list[tuple[int, int]] = field(default_factory=list)
    sample_rate_hz: float = 30.0

    def __post_init__(self):
        prev_end = 0
        for start, end in self.wear_segments:
            if not (prev_end <= start < end <= len(self.samples)):
                raise DataError(f"{self.id}: invalid wear segments {self.wear_segments}")
            prev_end = end

    def segment(self, k: int) -> np.ndarray:
        start, end = self.wear_segments[k]
        return self.samples[start:end]


@dataclass
class LabelTrack:
    """Per-sample class indices; ``missing`` (== number of classes) marks unlabeled samples."""

    indices: np.ndarray
    class_names: tuple[str, ...] = ACTIVITY_CLASSES

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() > self.missing):
            raise DataError("label index out of range")

    @property
    def missing(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return len(self.indices)


def _infer_rate(t: np.ndarray) -> float:
    dt = np.diff(t)
    med = float(np.median(dt))
    if not med > 0:
        raise ParseError("cannot infer sample rate: median time step is not positive")
    rate = 1.0 / med
    nearest = round(rate)
    # snap to an integer rate when timestamps carry up to 1% jitter
    if nearest > 0 and abs(rate - nearest) <= 0.01 * nearest:
        rate = float(nearest)
    return rate


def load_recording_csv(path: str | os.PathLike, rec_id: str | None = None) -> RawRecording:
    path = Path(path)
    t: list[float] = []
    xyz: list[tuple[float, float, float]] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise EmptyFile(f"{path}: empty file")
        if [h.strip() for h in header] != ["t", "x", "y", "z"]:
            raise ParseError(f"expected header t,x,y,z, got {','.join(header)}", line=1)
        prev = -math.inf
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", line=line_no)
            try:
                vals = [float(v) for v in row]
            except ValueError as exc:
                raise ParseError(str(exc), line=line_no) from None
            if not all(math.isfinite(v) for v in vals):
                raise ParseError("non-finite value", line=line_no)
            if vals[0] < prev:
                raise NonMonotoneTime(f"time went backwards ({vals[0]} < {prev})", line=line_no)
            prev = vals[0]
            t.append(vals[0])
            xyz.append((vals[1], vals[2], vals[3]))
    if not xyz:
        raise EmptyFile(f"{path}: no samples")
    if len(xyz) < 2:
        raise ParseError("need at least two rows to infer the sample rate")
    rate = _infer_rate(np.asarray(t))
    return RawRecording(rec_id or path.stem, rate, np.asarray(xyz, dtype=np.float64))


def save_recording_csv(rec: RawRecording, path: str | os.PathLike) -> None:
    t = np.arange(len(rec.samples)) / rec.sample_rate_hz
    with open(path, "w", newline="") as fh:
        fh.write("t,x,y,z\n")
        for ti, (x, y, z) in zip(t.tolist(), rec.samples.tolist()):
            fh.write(f"{ti!r},{x!r},{y!r},{z!r}\n")


def save_recording_bin(rec: RawRecording | Recording30, path: str | os.PathLike) -> None:
    data = np.ascontiguousarray(rec.samples, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, rec.sample_rate_hz, len(data)))
        fh.write(data.tobytes())


def load_recording_bin(path: str | os.PathLike, rec_id: str | None = None) -> RawRecording:
    path = Path(path)
    blob = path.read_bytes()
    if len(blob) < _HEADER.size:
        if blob[:4] != MAGIC[: len(blob)]:
            raise BadMagic(f"{path}: bad magic")
        raise TruncatedFile(f"{path}: header truncated")
    magic, version, rate, n = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise UnsupportedVersion(f"{path}: version {version}")
    payload = blob[_HEADER.size:]
    if len(payload) < n * 12:
        raise TruncatedFile(f"{path}: declared {n} samples, payload holds {len(payload) // 12}")
    samples = np.frombuffer(payload, dtype="<f4", count=n * 3).reshape(n, 3).astype(np.float32)
    return RawRecording(rec_id or path.stem.split(".")[0], float(rate), samples)


def load_labels_csv(path: str | os.PathLike) -> list[tuple[float, float, str]]:
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["start_s", "end_s", "label"]:
            raise ParseError("expected header start_s,end_s,label", line=1)
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ParseError(f"expected 3 fields, got {len(row)}", line=line_no)
            try:
                start, end = float(row[0]), float(row[1])
            except ValueError as exc:
                raise ParseError(str(exc), line=line_no) from None
            if end < start:
                raise ParseError("interval end precedes start", line=line_no)
            rows.append((start, end, row[2].strip()))
    return rows


def save_labels_csv(intervals: Sequence[tuple[float, float, str]], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("start_s,end_s,label\n")
        for start, end, label in intervals:
            fh.write(f"{start!r},{end!r},{label}\n")


def intervals_to_track(
    intervals: Sequence[tuple[float, float, str]],
    n_samples: int,
    rate_hz: float,
    class_names: Sequence[str] = ACTIVITY_CLASSES,
) -> LabelTrack:
    """Rasterise half-open label intervals onto a sample grid; uncovered samples get the missing index."""
    names = tuple(class_names)
    lookup = {name: k for k, name in enumerate(names)}
    idx = np.full(n_samples, len(names), dtype=np.int64)
    for start, end, label in intervals:
        if label not in lookup:
            raise ParseError(f"unknown label {label!r}")
        lo = max(0, math.ceil(start * rate_hz - 1e-9))
        hi = min(n_samples, math.ceil(end * rate_hz - 1e-9))
        if hi > lo:
            idx[lo:hi] = lookup[label]
    return LabelTrack(idx, names)


def track_to_intervals(track: LabelTrack, rate_hz: float) -> list[tuple[float, float, str]]:
    """Inverse of :func:`intervals_to_track` for runs of identical labels (missing runs omitted)."""
    idx = track.indices
    if len(idx) == 0:
        return []
    change = np.flatnonzero(np.diff(idx)) + 1
    starts = np.concatenate([[0], change])
    ends = np.concatenate([change, [len(idx)]])
    out = []
    for s, e in zip(starts.tolist(), ends.tolist()):
        k = int(idx[s])
        if k != track.missing:
            out.append((s / rate_hz, e / rate_hz, track.class_names[k]))
    return out
