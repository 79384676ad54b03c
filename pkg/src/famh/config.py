"""Run configuration: one JSON document covering every stage.

Unknown keys are rejected. A top-level ``"preset"`` ("full" or "desk")
selects the base values that the rest of the document overrides.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from typing import Any

from famh.errors import ConfigError, FamhError
from famh.ingest.windowing import WindowGeometry
from famh.model import ModelConfig
from famh.preprocess import PreprocessConfig
from famh.spectral import LossWeights, SpectralConfig
from famh.training.optim import ScheduleConfig


@dataclass(frozen=True)
class PathsConfig:
    raw_dir: str = "raw"
    data_dir: str = "data"
    out_dir: str = "runs"


@dataclass(frozen=True)
class SynthSettings:
    preset: str = "full"  # "full" (six classes) or "desk" (four classes)
    n_recordings: int = 8
    duration_h: float = 26.0
    rate_hz: float = 100.0

    def __post_init__(self):
        if self.preset not in ("full", "desk"):
            raise ConfigError(f"synth.preset must be 'full' or 'desk', got {self.preset!r}")
        if self.n_recordings < 1 or not self.duration_h > 0 or not self.rate_hz > 0:
            raise ConfigError("synth sizes must be positive")


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 20
    val_fraction: float = 0.1
    data_fraction: float = 1.0
    val_batch: int = 64


@dataclass(frozen=True)
class FinetuneSection:
    epochs: int = 70
    lr: float = 1e-3
    batch_windows: int = 32
    val_fraction: float = 0.2
    data_fraction: float = 1.0


@dataclass(frozen=True)
class Seeds:
    mask: int = 0
    window: int = 0
    init: int = 0
    synth: int = 0
    split: int = 0


@dataclass(frozen=True)
class RunConfig:
    preset: str = "full"
    paths: PathsConfig = field(default_factory=PathsConfig)
    synth: SynthSettings = field(default_factory=SynthSettings)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    spectral: SpectralConfig = field(default_factory=SpectralConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    windows: WindowGeometry = field(default_factory=WindowGeometry)
    loss: LossWeights = field(default_factory=LossWeights)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    seeds: Seeds = field(default_factory=Seeds)
    workers: int = 1

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @property
    def digest(self) -> int:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")

    @property
    def digest_hex(self) -> str:
        return f"{self.digest:016x}"

    @property
    def class_names(self) -> tuple[str, ...]:
        from famh.ingest.synthetic import desk_config, activity_classes_config

        cfg = desk_config() if self.synth.preset == "desk" else activity_classes_config()
        return cfg.class_names


DESK_OVERRIDES: dict[str, Any] = {
    "synth": {"preset": "desk", "n_recordings": 8, "duration_h": 2.0},
    "preprocess": {"min_wear_hours": 1.0},
    "model": {"n_blocks": 4, "embed_dim": 64, "n_heads": 4, "n_classes": 4},
    "windows": {
        "patch_count": 20,
        "pretrain_stride_patches": 18,
        "finetune_stride_patches": 2,
        "windows_per_recording": 32,
        "recordings_per_batch": 1,
    },
    "pretrain": {"epochs": 20},
    "finetune": {"epochs": 70},
}

PRESETS = {"full": {}, "desk": DESK_OVERRIDES}


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, data: Any, path: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key: {path + '.' if path else ''}{unknown[0]}")
    kwargs = {}
    for name, value in data.items():
        sub = f"{path}.{name}" if path else name
        kwargs[name] = _build(hints[name], value, sub)
    try:
        return cls(**kwargs)
    except FamhError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(doc: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` assignment (value parsed as JSON when possible)."""
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    doc = json.loads(json.dumps(doc))
    node = doc
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {key}: {p} is not a section")
    node[parts[-1]] = parse_value(raw)
    return doc


def config_from_dict(doc: dict, overrides: list[str] = ()) -> RunConfig:
    for item in overrides:
        doc = apply_override(doc, item)
    preset = doc.get("preset", "full")
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    base = dataclasses.asdict(RunConfig())
    merged = _merge(_merge(base, PRESETS[preset]), doc)
    return _build(RunConfig, merged, "")


def load_config(path: str | None, overrides: list[str] = ()) -> RunConfig:
    doc: dict = {}
    if path is not None:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(doc, list(overrides))
