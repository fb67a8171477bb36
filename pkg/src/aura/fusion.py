"""Score normalization, weighted sigmoid fusion, hysteresis, detection events."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, replace
from enum import Enum

import numpy as np

# Quantile normalizer calibration.
WARMUP_WINDOWS = 10
QUANTILE_BUFFER = 200
MOTION_WARMUP_BOUNDS = (0.0, 1.0)
CHROMA_WARMUP_BOUNDS = (0.0, 50.0)
# Minimum calibration span per channel. Prevents quiet-scene noise from being
# stretched to full scale once the quantile window takes over.
MOTION_MIN_SPAN = 0.01
CHROMA_MIN_SPAN = 6.0

HYSTERESIS_DEPTH = 2


class Verdict(Enum):
    PLUME_DETECTED = "PLUME_DETECTED"
    NO_PLUME = "NO_PLUME"


@dataclass(frozen=True)
class HyperParams:
    """Tunable decision parameters, versioned so every event is auditable."""

    w_m: float = 1.0
    w_c: float = 1.0
    bias: float = 1.0
    tau_shake: float = 0.35
    p_th: float = 0.5
    tau_c: float = 10.0
    delta_l: float = 12.0
    delta_c: float = 15.0
    version: int = 1

    def __post_init__(self):
        if not all(
            math.isfinite(v)
            for v in (self.w_m, self.w_c, self.bias, self.tau_shake, self.p_th)
        ):
            raise ValueError("hyperparameters must be finite")
        if self.w_m < 0 or self.w_c < 0 or self.w_m + self.w_c <= 0:
            raise ValueError("fusion weights must be >= 0 with positive sum")
        if not 0.0 < self.tau_shake <= 1.0:
            raise ValueError("tau_shake must be in (0, 1]")
        if not 0.0 < self.p_th < 1.0:
            raise ValueError("p_th must be in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "w_m": self.w_m,
            "w_c": self.w_c,
            "bias": self.bias,
            "tau_shake": self.tau_shake,
            "p_th": self.p_th,
            "tau_c": self.tau_c,
            "delta_l": self.delta_l,
            "delta_c": self.delta_c,
            "version": self.version,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HyperParams":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def bumped(self, **changes) -> "HyperParams":
        """Copy with field changes and the version incremented."""
        return replace(self, version=self.version + 1, **changes)


class ScoreNormalizer:
    """Running-quantile affine normalizer for one (stream, region, channel).

    The first ``WARMUP_WINDOWS`` updates use fixed physical bounds; after
    that the 1st/99th percentiles of the trailing raw means calibrate the
    map. The span is floored so a flat history cannot amplify noise.
    """

    def __init__(self, warmup_bounds: tuple[float, float], min_span: float):
        self._warmup = warmup_bounds
        self._min_span = min_span
        self._history: deque[float] = deque(maxlen=QUANTILE_BUFFER)

    @classmethod
    def for_motion(cls) -> "ScoreNormalizer":
        return cls(MOTION_WARMUP_BOUNDS, MOTION_MIN_SPAN)

    @classmethod
    def for_chroma(cls) -> "ScoreNormalizer":
        return cls(CHROMA_WARMUP_BOUNDS, CHROMA_MIN_SPAN)

    def bounds(self) -> tuple[float, float]:
        if len(self._history) < WARMUP_WINDOWS:
            lower, upper = self._warmup
        else:
            values = np.fromiter(self._history, dtype=np.float64)
            lower = float(np.percentile(values, 1))
            upper = float(np.percentile(values, 99))
        upper = max(upper, lower + self._min_span)
        return lower, upper

    def normalize(self, raw_mean: float) -> float:
        """Map a raw region mean into [0, 1] and absorb it into the state."""
        lower, upper = self.bounds()
        s_hat = (raw_mean - lower) / (upper - lower)
        self._history.append(float(raw_mean))
        return min(1.0, max(0.0, s_hat))

    def state(self) -> list[float]:
        return list(self._history)

    def restore(self, history: list[float]) -> None:
        self._history.clear()
        self._history.extend(history[-QUANTILE_BUFFER:])


def region_mean(field: np.ndarray) -> float:
    if field.size == 0:
        raise ValueError("empty region")
    return float(np.mean(field))


def fuse(s_m: float, s_c: float, h: HyperParams) -> float:
    """Detection probability: sigmoid of the weighted normalized scores."""
    z = h.w_m * s_m + h.w_c * s_c - h.bias
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


class HysteresisTracker:
    """Verdict with two-window raise/clear hysteresis.

    A verdict only flips after ``HYSTERESIS_DEPTH`` consecutive windows on
    the same side of the threshold, so no single-window excursion can raise
    or clear an alert.
    """

    def __init__(self, depth: int = HYSTERESIS_DEPTH):
        self.depth = depth
        self.verdict = Verdict.NO_PLUME
        self._above = 0
        self._below = 0

    def update(self, probability: float, p_th: float) -> Verdict:
        if probability >= p_th:
            self._above += 1
            self._below = 0
        else:
            self._below += 1
            self._above = 0
        if self._above >= self.depth:
            self.verdict = Verdict.PLUME_DETECTED
        elif self._below >= self.depth:
            self.verdict = Verdict.NO_PLUME
        return self.verdict


def verdict_from_history(probabilities: list[float], h: HyperParams) -> Verdict:
    """Fold the hysteresis rule over a probability history."""
    if not probabilities:
        raise ValueError("empty probability history")
    tracker = HysteresisTracker()
    for p in probabilities:
        tracker.update(p, h.p_th)
    return tracker.verdict


@dataclass(frozen=True)
class DetectionEvent:
    stream_id: str
    region_label: str
    window_index: int
    timestamp_ms: int
    s_m: float
    s_c: float
    probability: float
    verdict: Verdict
    smoke_type: str | None
    suspended: bool
    hyperparams_version: int
    sigma_g: float

    def to_dict(self) -> dict:
        return {
            "stream_id": self.stream_id,
            "region_label": self.region_label,
            "window_index": self.window_index,
            "timestamp_ms": self.timestamp_ms,
            "s_m": self.s_m,
            "s_c": self.s_c,
            "probability": self.probability,
            "verdict": self.verdict.value,
            "smoke_type": self.smoke_type,
            "suspended": self.suspended,
            "hyperparams_version": self.hyperparams_version,
            "sigma_g": self.sigma_g,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DetectionEvent":
        return cls(
            stream_id=d["stream_id"],
            region_label=d["region_label"],
            window_index=d["window_index"],
            timestamp_ms=d["timestamp_ms"],
            s_m=d["s_m"],
            s_c=d["s_c"],
            probability=d["probability"],
            verdict=Verdict(d["verdict"]),
            smoke_type=d.get("smoke_type"),
            suspended=d["suspended"],
            hyperparams_version=d["hyperparams_version"],
            sigma_g=d["sigma_g"],
        )
