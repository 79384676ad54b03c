"""FAMC checkpoint files.

Layout (little-endian): magic ``FAMC``, u16 version, u64 config digest, then
two tensor sections (model parameters, then optimizer/run state). Each section
is a u32 record count followed by records of u16 name length, UTF-8 name,
u8 rank, rank x u64 dims and the float32 payload.
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

from famh import atomic
from famh.errors import BadMagic, ShapeMismatch, TruncatedFile, VersionMismatch

MAGIC = b"FAMC"
VERSION = 1
_HEADER = struct.Struct("<4sHQ")


@dataclass
class Checkpoint:
    digest: int
    params: dict[str, np.ndarray]
    state: dict[str, np.ndarray] = field(default_factory=dict)

    def meta(self, key: str, default: float | None = None):
        arr = self.state.get(f"meta.{key}")
        return default if arr is None else arr.item()


def _to_numpy(t) -> np.ndarray:
    if isinstance(t, torch.Tensor):
        t = t.detach().cpu().numpy()
    return np.asarray(t, dtype="<f4")


def _write_section(buf: io.BytesIO, tensors: Mapping[str, object]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, t in tensors.items():
        arr = _to_numpy(t)
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr).tobytes())


def encode_checkpoint(params: Mapping[str, object], state: Mapping[str, object], digest: int) -> bytes:
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION, digest & 0xFFFFFFFFFFFFFFFF))
    _write_section(buf, params)
    _write_section(buf, state)
    return buf.getvalue()


def save_checkpoint(path: str | os.PathLike, params: Mapping[str, object],
                    state: Mapping[str, object] | None = None, digest: int = 0) -> None:
    atomic.write_bytes(path, encode_checkpoint(params, state or {}, digest))


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.blob):
            raise TruncatedFile(f"{self.path}: unexpected end of file")
        vals = struct.unpack_from(fmt, self.blob, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFile(f"{self.path}: unexpected end of file")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def section(self) -> dict[str, np.ndarray]:
        (count,) = self.take("<I")
        out = {}
        for _ in range(count):
            (n,) = self.take("<H")
            name = self.raw(n).decode()
            (ndim,) = self.take("<B")
            shape = self.take(f"<{ndim}Q") if ndim else ()
            size = int(np.prod(shape)) if ndim else 1
            out[name] = np.frombuffer(self.raw(4 * size), dtype="<f4").reshape(shape).copy()
        return out


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise BadMagic(f"{path}: not a FAMC checkpoint")
    r = _Reader(blob, path)
    _, version, digest = r.take(_HEADER.format)
    if version != VERSION:
        raise VersionMismatch(f"{path}: checkpoint version {version}, expected {VERSION}")
    params = r.section()
    state = r.section()
    return Checkpoint(digest, params, state)


def load_into_model(model: torch.nn.Module, params: Mapping[str, np.ndarray], strict: bool = True) -> None:
    own = dict(model.named_parameters())
    missing = set(own) - set(params)
    if strict and missing:
        raise ShapeMismatch(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for name, arr in params.items():
        if name not in own:
            raise ShapeMismatch(f"checkpoint parameter {name} not in model")
        if tuple(arr.shape) != tuple(own[name].shape):
            raise ShapeMismatch(f"{name}: checkpoint {tuple(arr.shape)} vs model {tuple(own[name].shape)}")
    with torch.no_grad():
        for name, arr in params.items():
            own[name].copy_(torch.from_numpy(np.asarray(arr)).to(own[name].dtype))
