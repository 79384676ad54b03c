"""Low-pass + resample to 30 Hz, stationary/non-wear detection and unit-sphere autocalibration."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from famh.errors import CalibrationFailed, ConfigError, RateTooLow, TooShort
from famh.ingest.recording import RawRecording, Recording30

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PreprocessConfig:
    cutoff_hz: float = 15.0
    target_rate_hz: float = 30.0
    filter_order: int = 4
    stationary_window_s: float = 10.0
    stationary_threshold_g: float = 0.013
    nonwear_min_minutes: float = 90.0
    min_wear_hours: float = 24.0
    calib_max_iter: int = 1000
    calib_tol: float = 1e-9
    calib_coverage_g: float = 0.3
    calib_min_points: int = 10

    def __post_init__(self):
        if self.cutoff_hz > self.target_rate_hz / 2:
            raise ConfigError("cutoff must not exceed the target Nyquist frequency")
        for name in ("cutoff_hz", "target_rate_hz", "filter_order", "stationary_window_s",
                     "stationary_threshold_g", "nonwear_min_minutes", "min_wear_hours",
                     "calib_max_iter", "calib_tol", "calib_coverage_g", "calib_min_points"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"preprocess.{name} must be positive")


@dataclass
class CalibrationResult:
    gain: np.ndarray
    offset: np.ndarray
    iterations: int
    residual: float
    history: list[float] = field(default_factory=list, repr=False)


def lowpass_resample(rec: RawRecording, cfg: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Zero-phase Butterworth low-pass then linear interpolation onto the target grid.

    Output length is floor(duration * target_rate).
    """
    fs = rec.sample_rate_hz
    if fs < 2 * cfg.cutoff_hz:
        raise RateTooLow(f"{rec.id}: {fs} Hz cannot carry a {cfg.cutoff_hz} Hz cutoff")
    x = np.asarray(rec.samples, dtype=np.float64)
    padlen = 3 * cfg.filter_order
    wn = cfg.cutoff_hz / (fs / 2)
    if wn < 1 and len(x) > padlen:
        sos = signal.butter(cfg.filter_order, wn, btype="low", output="sos")
        x = signal.sosfiltfilt(sos, x, axis=0, padtype="even", padlen=padlen)
    n_out = int(np.floor(len(x) / fs * cfg.target_rate_hz + 1e-9))
    t_in = np.arange(len(x)) / fs
    t_out = np.arange(n_out) / cfg.target_rate_hz
    return np.stack([np.interp(t_out, t_in, x[:, k]) for k in range(3)], axis=1)


def moving_std(x: np.ndarray, window: int) -> np.ndarray:
    """Centered moving standard deviation (n-1 denominator) along axis 0, shrinking at the edges."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    x = x - x.mean(axis=0)
    zero = np.zeros((1,) + x.shape[1:])
    c1 = np.concatenate([zero, np.cumsum(x, axis=0)])
    c2 = np.concatenate([zero, np.cumsum(x * x, axis=0)])
    i = np.arange(n)
    lo = np.clip(i - window // 2, 0, n)
    hi = np.clip(i - window // 2 + window, 0, n)
    cnt = (hi - lo).reshape((n,) + (1,) * (x.ndim - 1))
    s1 = c1[hi] - c1[lo]
    s2 = c2[hi] - c2[lo]
    var = (s2 - s1 * s1 / cnt) / np.maximum(cnt - 1, 1)
    return np.sqrt(np.maximum(var, 0.0))


def stationary_mask(samples: np.ndarray, cfg: PreprocessConfig = PreprocessConfig(),
                    rate_hz: float | None = None) -> np.ndarray:
    """True where every axis' centered moving std is below the threshold."""
    rate = cfg.target_rate_hz if rate_hz is None else rate_hz
    window = int(round(cfg.stationary_window_s * rate))
    if len(samples) < window:
        raise TooShort(f"need at least {window} samples for a {cfg.stationary_window_s} s window")
    sd = moving_std(samples, window)
    return np.all(sd < cfg.stationary_threshold_g, axis=1)


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    """Half-open (start, end) of every maximal run of True."""
    m = np.concatenate([[False], np.asarray(mask, dtype=bool), [False]])
    d = np.diff(m.astype(np.int8))
    return list(zip(np.flatnonzero(d == 1).tolist(), np.flatnonzero(d == -1).tolist()))


def detect_wear_segments(mask: np.ndarray, cfg: PreprocessConfig = PreprocessConfig(),
                         min_wear_hours: float | None = None,
                         rate_hz: float | None = None) -> list[tuple[int, int]]:
    rate = cfg.target_rate_hz if rate_hz is None else rate_hz
    hours = cfg.min_wear_hours if min_wear_hours is None else min_wear_hours
    nonwear_len = cfg.nonwear_min_minutes * 60 * rate
    wear = np.ones(len(mask), dtype=bool)
    for start, end in _runs(mask):
        if end - start > nonwear_len:
            wear[start:end] = False
    min_len = hours * 3600 * rate
    return [(s, e) for s, e in _runs(wear) if e - s >= min_len - 1e-9]


def stationary_points(samples: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Mean acceleration vector of each maximal stationary run."""
    x = np.asarray(samples, dtype=np.float64)
    return np.array([x[s:e].mean(axis=0) for s, e in _runs(mask)]).reshape(-1, 3)


def fit_unit_sphere(points: np.ndarray, cfg: PreprocessConfig = PreprocessConfig()) -> CalibrationResult:
    """Per-axis gain/offset so that gain*p + offset lies on the unit sphere.

    Alternates between projecting the corrected points onto the sphere and an
    ordinary least-squares refit of each axis against those projections, so the
    RMS distance to the sphere never increases.
    """
    pts = np.asarray(points, dtype=np.float64)
    c = cfg.calib_coverage_g
    if len(pts) < cfg.calib_min_points:
        raise CalibrationFailed(CalibrationFailed.INSUFFICIENT_COVERAGE,
                                f"{len(pts)} stationary points, need {cfg.calib_min_points}")
    if not (np.all(pts.min(axis=0) <= -c) and np.all(pts.max(axis=0) >= c)):
        raise CalibrationFailed(CalibrationFailed.INSUFFICIENT_COVERAGE,
                                f"stationary points do not reach +/-{c} g on every axis")
    gain = np.ones(3)
    offset = np.zeros(3)
    xm = pts.mean(axis=0)
    xc = pts - xm
    sxx = (xc * xc).sum(axis=0)

    def residual(g, b):
        return float(np.sqrt(np.mean((np.linalg.norm(pts * g + b, axis=1) - 1.0) ** 2)))

    res = residual(gain, offset)
    history = [res]
    for it in range(1, cfg.calib_max_iter + 1):
        corrected = pts * gain + offset
        target = corrected / np.linalg.norm(corrected, axis=1, keepdims=True)
        tm = target.mean(axis=0)
        gain = (xc * (target - tm)).sum(axis=0) / sxx
        offset = tm - gain * xm
        new = residual(gain, offset)
        history.append(new)
        improvement = res - new
        res = new
        if improvement < cfg.calib_tol:
            break
    else:
        raise CalibrationFailed(CalibrationFailed.NO_CONVERGENCE,
                                f"no convergence after {cfg.calib_max_iter} iterations")
    if not np.all((gain > 0.5) & (gain < 2.0)):
        raise CalibrationFailed(CalibrationFailed.GAIN_OUT_OF_RANGE, f"gain {gain}")
    return CalibrationResult(gain, offset, it, res, history)


def autocalibrate(samples: np.ndarray, mask: np.ndarray,
                  cfg: PreprocessConfig = PreprocessConfig()) -> CalibrationResult:
    return fit_unit_sphere(stationary_points(samples, mask), cfg)


def apply_calibration(samples: np.ndarray, result: CalibrationResult) -> np.ndarray:
    return np.asarray(samples) * result.gain + result.offset


@dataclass
class PreprocessOutcome:
    recording: Recording30 | None
    calibration: CalibrationResult | None
    excluded: str | None = None  # "calibration_failed" | "insufficient_wear"
    detail: str = ""


def preprocess_recording(rec: RawRecording, cfg: PreprocessConfig = PreprocessConfig(),
                         min_wear_hours: float | None = None) -> PreprocessOutcome:
    """Full chain: filter/resample, stationary mask, calibration, non-wear removal."""
    x = lowpass_resample(rec, cfg)
    mask = stationary_mask(x, cfg)
    try:
        cal = autocalibrate(x, mask, cfg)
    except CalibrationFailed as exc:
        log.info("%s excluded: %s", rec.id, exc)
        return PreprocessOutcome(None, None, "calibration_failed", str(exc))
    x = apply_calibration(x, cal)
    mask = stationary_mask(x, cfg)
    segments = detect_wear_segments(mask, cfg, min_wear_hours)
    if not segments:
        log.info("%s excluded: no wear segment of the minimum length", rec.id)
        return PreprocessOutcome(None, cal, "insufficient_wear", "no wear segment of the minimum length")
    out = Recording30(rec.id, x.astype(np.float32), segments, cfg.target_rate_hz)
    return PreprocessOutcome(out, cal)
