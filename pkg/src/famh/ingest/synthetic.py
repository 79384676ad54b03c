"""Synthetic free-living accelerometry with a Markov chain over activity classes.

Each dwell in a class produces a gravity vector (drawn around the class
posture, or uniformly when the class has none, then slowly rotating at the
class drift rate), a harmonic series at the class fundamental
along a random direction, and white noise. A per-recording gain/offset error
can be applied so that autocalibration has something to undo.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from famh.errors import InvalidConfig
from famh.ingest.recording import LabelTrack, RawRecording


@dataclass(frozen=True)
class ClassSignature:
    name: str
    fundamental_hz: float = 0.0
    harmonic_amps: tuple[float, ...] = ()
    noise_std: float = 0.0
    drift_rate: float = 0.0  # rad/s
    dwell_s: float = 60.0
    # mean gravity direction in device axes; None draws orientations uniformly
    posture: tuple[float, float, float] | None = None
    posture_spread: float = 0.0


@dataclass
class SyntheticConfig:
    classes: tuple[ClassSignature, ...]
    transition: np.ndarray
    seed: int = 0
    gain_error_std: float = 0.0
    offset_error_std: float = 0.0

    def __post_init__(self):
        self.transition = np.asarray(self.transition, dtype=np.float64)
        c = len(self.classes)
        if c == 0:
            raise InvalidConfig("at least one class is required")
        if self.transition.shape != (c, c):
            raise InvalidConfig(f"transition matrix must be {c}x{c}")
        if np.any(self.transition < 0) or not np.allclose(self.transition.sum(axis=1), 1.0, atol=1e-9):
            raise InvalidConfig("transition rows must be non-negative and sum to 1")
        for sig in self.classes:
            if not sig.dwell_s > 0:
                raise InvalidConfig(f"{sig.name}: dwell time must be positive")
            if sig.posture is not None and (len(sig.posture) != 3 or not np.linalg.norm(sig.posture) > 0):
                raise InvalidConfig(f"{sig.name}: posture must be a non-zero 3-vector")
            if sig.posture_spread < 0:
                raise InvalidConfig(f"{sig.name}: posture spread must be non-negative")

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.classes)

    def to_dict(self) -> dict:
        return {
            "classes": [
                {
                    "name": s.name,
                    "fundamental_hz": s.fundamental_hz,
                    "harmonic_amps": list(s.harmonic_amps),
                    "noise_std": s.noise_std,
                    "drift_rate": s.drift_rate,
                    "dwell_s": s.dwell_s,
                    "posture": None if s.posture is None else list(s.posture),
                    "posture_spread": s.posture_spread,
                }
                for s in self.classes
            ],
            "transition": self.transition.tolist(),
            "seed": self.seed,
            "gain_error_std": self.gain_error_std,
            "offset_error_std": self.offset_error_std,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        try:
            classes = tuple(
                ClassSignature(
                    name=c["name"],
                    fundamental_hz=float(c.get("fundamental_hz", 0.0)),
                    harmonic_amps=tuple(float(a) for a in c.get("harmonic_amps", ())),
                    noise_std=float(c.get("noise_std", 0.0)),
                    drift_rate=float(c.get("drift_rate", 0.0)),
                    dwell_s=float(c.get("dwell_s", 60.0)),
                    posture=None if c.get("posture") is None else tuple(float(v) for v in c["posture"]),
                    posture_spread=float(c.get("posture_spread", 0.0)),
                )
                for c in d["classes"]
            )
            return cls(
                classes=classes,
                transition=np.asarray(d["transition"], dtype=np.float64),
                seed=int(d.get("seed", 0)),
                gain_error_std=float(d.get("gain_error_std", 0.0)),
                offset_error_std=float(d.get("offset_error_std", 0.0)),
            )
        except (KeyError, TypeError) as exc:
            raise InvalidConfig(f"bad synthetic config: {exc}") from None


def _uniform_off_diagonal(c: int) -> np.ndarray:
    if c == 1:
        return np.ones((1, 1))
    t = np.full((c, c), 1.0 / (c - 1))
    np.fill_diagonal(t, 0.0)
    return t


def activity_classes_config(seed: int = 0) -> SyntheticConfig:
    """Six classes named after the label taxonomy used for evaluation."""
    classes = (
        ClassSignature("bicycling", 1.2, (0.25, 0.08), 0.03, 0.01, 300.0),
        ClassSignature("walking", 2.0, (0.35, 0.15, 0.05), 0.05, 0.02, 180.0),
        ClassSignature("mixed", 1.0, (0.15, 0.10, 0.08, 0.05), 0.10, 0.05, 240.0),
        ClassSignature("vehicle", 4.0, (0.02,), 0.02, 0.002, 600.0),
        ClassSignature("sit-stand", 0.3, (0.02,), 0.006, 0.001, 600.0),
        ClassSignature("sleep", 0.0, (), 0.002, 0.0003, 1200.0),
    )
    return SyntheticConfig(classes, _uniform_off_diagonal(6), seed, 0.02, 0.01)


def desk_config(seed: int = 0) -> SyntheticConfig:
    """Four well-separated classes for small end-to-end runs.

    Each class has a typical wrist posture (lying flat, resting on a desk,
    arm hanging, hands on handlebars) with a wide spread around it.
    """
    classes = (
        ClassSignature("sleep", 0.0, (), 0.002, 0.0003, 240.0, (0.0, 0.0, -1.0), 0.8),
        ClassSignature("sit-stand", 0.3, (0.01,), 0.008, 0.001, 240.0, (0.5, 0.3, 0.8), 0.6),
        ClassSignature("walking", 2.0, (0.35, 0.15, 0.05), 0.05, 0.003, 150.0, (-1.0, 0.0, 0.0), 0.35),
        ClassSignature("bicycling", 1.2, (0.25, 0.08), 0.03, 0.002, 180.0, (0.2, -0.9, -0.2), 0.35),
    )
    return SyntheticConfig(classes, _uniform_off_diagonal(4), seed, 0.02, 0.01)


def _unit(rng: np.random.Generator, size=3) -> np.ndarray:
    v = rng.standard_normal(size)
    return v / np.linalg.norm(v)


def _dwell_signal(sig: ClassSignature, n: int, rate_hz: float, rng: np.random.Generator) -> np.ndarray:
    t = np.arange(n) / rate_hz
    if sig.posture is None:
        up = _unit(rng)
    else:
        mean = np.asarray(sig.posture, dtype=np.float64)
        up = mean / np.linalg.norm(mean) + sig.posture_spread * rng.standard_normal(3)
        up /= np.linalg.norm(up)
    # rotation axis perpendicular to the starting orientation
    axis = np.cross(up, _unit(rng))
    axis /= np.linalg.norm(axis)
    theta = sig.drift_rate * t
    gravity = np.outer(np.cos(theta), up) + np.outer(np.sin(theta), np.cross(axis, up))
    out = gravity
    if sig.harmonic_amps and sig.fundamental_hz > 0:
        direction = _unit(rng)
        motion = np.zeros(n)
        for h, amp in enumerate(sig.harmonic_amps, start=1):
            motion += amp * np.sin(2 * np.pi * h * sig.fundamental_hz * t + rng.uniform(0, 2 * np.pi))
        out = out + np.outer(motion, direction)
    if sig.noise_std > 0:
        out = out + sig.noise_std * rng.standard_normal((n, 3))
    return out


def generate_synthetic(
    config: SyntheticConfig,
    duration_s: float,
    rate_hz: float = 100.0,
    rec_id: str = "synthetic",
) -> tuple[RawRecording, LabelTrack]:
    """Sample a class sequence from the Markov chain and render the signal for each dwell."""
    if not duration_s > 0:
        raise InvalidConfig("duration must be positive")
    rng = np.random.default_rng(config.seed)
    n_total = max(1, int(round(duration_s * rate_hz)))
    samples = np.empty((n_total, 3))
    labels = np.empty(n_total, dtype=np.int64)
    c = len(config.classes)
    state = int(rng.integers(c))
    pos = 0
    while pos < n_total:
        sig = config.classes[state]
        n = max(1, int(round(rng.exponential(sig.dwell_s) * rate_hz)))
        n = min(n, n_total - pos)
        samples[pos:pos + n] = _dwell_signal(sig, n, rate_hz, rng)
        labels[pos:pos + n] = state
        pos += n
        state = int(rng.choice(c, p=config.transition[state]))
    gain = 1.0 + config.gain_error_std * rng.standard_normal(3)
    offset = config.offset_error_std * rng.standard_normal(3)
    samples = samples * gain + offset
    return RawRecording(rec_id, float(rate_hz), samples), LabelTrack(labels, config.class_names)
