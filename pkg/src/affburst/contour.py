"""Burst/idle segment labels from continuous affect contours.

The labeling runs in three steps: a regression (delta) slope over a
+/-L frame window, a magnitude threshold that marks burst points, and a
+/-delta_half window around each burst point that grows it into a segment.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import CalibrationError, InputError, ParameterError

DEFAULT_FRAME_RATE = 25.0
DEFAULT_L = 10          # 2L frames = 0.8 s at 25 fps
DEFAULT_DELTA_HALF = 25  # segment window of 51 frames, about 2 s at 25 fps
DEFAULT_COVERAGE = 0.30


def _frozen(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class AffectContour:
    values: np.ndarray
    frame_rate_hz: float = DEFAULT_FRAME_RATE
    attribute_name: str = "arousal"

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        if values.size == 0:
            raise InputError("affect contour is empty")
        if not np.all(np.isfinite(values)):
            raise InputError("affect contour contains non-finite values")
        if not self.frame_rate_hz > 0:
            raise ParameterError(f"frame_rate_hz must be > 0, got {self.frame_rate_hz}")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class DeltaSeries:
    values: np.ndarray
    half_width: int

    def __post_init__(self):
        values = _frozen(self.values, np.float64)
        if not np.all(np.isfinite(values)):
            raise InputError("delta series contains non-finite values")
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class BurstPointSeries:
    values: np.ndarray
    threshold: float

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, np.int8))

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class SegmentLabels:
    values: np.ndarray
    half_window: int
    segment_window_frames: int = field(init=False)

    def __post_init__(self):
        values = _frozen(self.values, np.int8)
        if values.size and not np.isin(values, (0, 1)).all():
            raise InputError("segment labels must be 0/1")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "segment_window_frames", 2 * self.half_window + 1)

    def __len__(self) -> int:
        return self.values.size

    @property
    def coverage(self) -> float:
        return float(self.values.mean()) if self.values.size else 0.0


@dataclass(frozen=True)
class SegmentStats:
    n_segments: int
    mean_duration_s: float
    total_duration_s: float
    mean_abs_delta: float
    total_duration_recording_s: float

    def as_dict(self) -> dict:
        return {
            "n_segments": self.n_segments,
            "mean_duration_s": self.mean_duration_s,
            "total_duration_s": self.total_duration_s,
            "mean_abs_delta": self.mean_abs_delta,
            "total_duration_recording_s": self.total_duration_recording_s,
        }


def compute_delta(contour: AffectContour | Sequence[float], L: int = DEFAULT_L) -> DeltaSeries:
    """Regression slope of the contour over +/-L frames, edges replicated.

    Exact on linear ramps away from the edges.
    """
    if int(L) != L or L < 1:
        raise ParameterError(f"L must be an integer >= 1, got {L}")
    L = int(L)
    e = contour.values if isinstance(contour, AffectContour) else AffectContour(contour).values
    n = e.size
    padded = np.pad(e, L, mode="edge")
    num = np.zeros(n)
    for l in range(1, L + 1):
        num += l * (padded[L + l : L + l + n] - padded[L - l : L - l + n])
    denom = 2.0 * sum(l * l for l in range(1, L + 1))
    return DeltaSeries(num / denom, L)


def detect_burst_points(delta: DeltaSeries | Sequence[float], tau: float) -> BurstPointSeries:
    if not tau > 0:
        raise ParameterError(f"tau must be > 0, got {tau}")
    d = delta.values if isinstance(delta, DeltaSeries) else np.asarray(delta, dtype=np.float64)
    return BurstPointSeries((np.abs(d) >= tau).astype(np.int8), float(tau))


def extend_segments(points: BurstPointSeries | Sequence[int], delta_half: int = DEFAULT_DELTA_HALF) -> SegmentLabels:
    """Grow every burst point into a centered window of 2*delta_half+1 frames.

    Windows are clipped at the sequence ends; overlapping windows merge.
    """
    if int(delta_half) != delta_half or delta_half < 0:
        raise ParameterError(f"delta_half must be an integer >= 0, got {delta_half}")
    delta_half = int(delta_half)
    p = points.values if isinstance(points, BurstPointSeries) else np.asarray(points)
    p = (p != 0).astype(np.int64)
    if p.size == 0:
        return SegmentLabels(p, delta_half)
    # running count of burst points inside [n - delta_half, n + delta_half]
    csum = np.concatenate(([0], np.cumsum(p)))
    idx = np.arange(p.size)
    hi = np.minimum(idx + delta_half + 1, p.size)
    lo = np.maximum(idx - delta_half, 0)
    return SegmentLabels((csum[hi] - csum[lo] > 0).astype(np.int8), delta_half)


def label_pipeline(
    contour: AffectContour | Sequence[float],
    tau: float,
    L: int = DEFAULT_L,
    delta_half: int = DEFAULT_DELTA_HALF,
) -> SegmentLabels:
    delta = compute_delta(contour, L)
    return extend_segments(detect_burst_points(delta, tau), delta_half)


def _window_max(abs_d: np.ndarray, delta_half: int) -> np.ndarray:
    # max |d| over the clipped window: a frame is labeled 1 iff this is >= tau
    padded = np.pad(abs_d, delta_half, mode="constant", constant_values=-np.inf)
    windows = np.lib.stride_tricks.sliding_window_view(padded, 2 * delta_half + 1)
    return windows.max(axis=1)


def coverage_curve(deltas: Iterable[DeltaSeries], delta_half: int) -> tuple[np.ndarray, np.ndarray]:
    """Candidate thresholds (ascending) and the post-extension coverage at each."""
    reach = np.concatenate([_window_max(np.abs(d.values), delta_half) for d in deltas])
    candidates = np.unique(reach[reach > 0])
    reach.sort()
    above = reach.size - np.searchsorted(reach, candidates, side="left")
    return candidates, above / reach.size


def calibrate_threshold(
    deltas: DeltaSeries | Iterable[DeltaSeries],
    delta_half: int = DEFAULT_DELTA_HALF,
    target_coverage: float = DEFAULT_COVERAGE,
) -> float:
    """Threshold whose post-extension coverage is closest to the target.

    Coverage is a step function of tau that only changes at values of the
    windowed max of |d|, so those are the only candidates that need checking.
    Searching them is the same as searching every distinct |d| with ties
    going to the larger tau.
    """
    if not 0 < target_coverage < 1:
        raise ParameterError(f"target_coverage must lie in (0, 1), got {target_coverage}")
    if isinstance(deltas, DeltaSeries):
        deltas = [deltas]
    deltas = list(deltas)
    if not deltas:
        raise CalibrationError("no delta series to calibrate on")
    candidates, coverage = coverage_curve(deltas, delta_half)
    if candidates.size == 0:
        raise CalibrationError("all delta values are zero; no threshold gives nonzero coverage")
    gap = np.abs(coverage - target_coverage)
    best = np.flatnonzero(gap == gap.min())
    return float(candidates[best[-1]])


def run_lengths(labels: np.ndarray) -> np.ndarray:
    """Lengths of the maximal runs of 1s."""
    x = np.concatenate(([0], (np.asarray(labels) != 0).astype(np.int8), [0]))
    edges = np.flatnonzero(np.diff(x))
    return edges[1::2] - edges[::2]


def segment_stats(
    labels: SegmentLabels | Sequence[int],
    delta: DeltaSeries | Sequence[float],
    frame_rate_hz: float = DEFAULT_FRAME_RATE,
) -> SegmentStats:
    P = labels.values if isinstance(labels, SegmentLabels) else np.asarray(labels)
    d = delta.values if isinstance(delta, DeltaSeries) else np.asarray(delta, dtype=np.float64)
    if P.shape != d.shape:
        raise InputError(f"labels ({P.size}) and delta ({d.size}) lengths differ")
    if not frame_rate_hz > 0:
        raise ParameterError(f"frame_rate_hz must be > 0, got {frame_rate_hz}")
    runs = run_lengths(P) / frame_rate_hz
    mask = P != 0
    return SegmentStats(
        n_segments=int(runs.size),
        mean_duration_s=float(runs.mean()) if runs.size else 0.0,
        total_duration_s=float(runs.sum()),
        mean_abs_delta=float(np.abs(d[mask]).mean()) if mask.any() else 0.0,
        total_duration_recording_s=P.size / frame_rate_hz,
    )


def pooled_stats(pairs: Iterable[tuple[SegmentLabels, DeltaSeries]], frame_rate_hz: float = DEFAULT_FRAME_RATE) -> SegmentStats:
    """Dataset-level statistics; segments never span two recordings."""
    runs, abs_d, n_frames = [], [], 0
    for labels, delta in pairs:
        P, d = np.asarray(labels.values), np.asarray(delta.values)
        if P.shape != d.shape:
            raise InputError("labels and delta lengths differ")
        runs.append(run_lengths(P))
        abs_d.append(np.abs(d[P != 0]))
        n_frames += P.size
    runs_all = np.concatenate(runs) / frame_rate_hz if runs else np.zeros(0)
    abs_all = np.concatenate(abs_d) if abs_d else np.zeros(0)
    return SegmentStats(
        n_segments=int(runs_all.size),
        mean_duration_s=float(runs_all.mean()) if runs_all.size else 0.0,
        total_duration_s=float(runs_all.sum()),
        mean_abs_delta=float(abs_all.mean()) if abs_all.size else 0.0,
        total_duration_recording_s=n_frames / frame_rate_hz,
    )
