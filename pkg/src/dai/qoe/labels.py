"""Gear discretization of objective QoE metrics and window labelling."""

from __future__ import annotations

from enum import IntEnum
from typing import NamedTuple, Sequence

import numpy as np

from ..errors import AlignmentError, DomainError
from ..qos import QosWindow
from ..streamgen import GroundTruth, TraceRow

FEATURES: tuple[str, ...] = ("video_kbps", "fec_kbps", "loss", "iat_mean_ms", "iat_std_ms")
TARGETS: tuple[str, ...] = ("bitrate", "framerate", "resolution")

# Lower bounds of Low, Medium, High; each interval includes its lower bound.
BITRATE_BOUNDS = (300, 500, 700)
FRAMERATE_BOUNDS = (10, 20, 30)
WIDTH_BOUNDS = (640, 960, 1280)


class QoeGear(IntEnum):
    VeryLow = 0
    Low = 1
    Medium = 2
    High = 3


class QoeLabel(NamedTuple):
    bitrate: QoeGear
    framerate: QoeGear
    resolution: QoeGear

    def of(self, target: str) -> QoeGear:
        return getattr(self, target)


class Sample(NamedTuple):
    features: tuple[float, ...]
    label: QoeLabel
    t_start_us: int


def _gear(value: float, bounds: Sequence[float]) -> QoeGear:
    return QoeGear(sum(value >= b for b in bounds))


def discretize(bitrate_kbps: float, framerate_fps: float, resolution_width: float) -> QoeLabel:
    if min(bitrate_kbps, framerate_fps, resolution_width) < 0:
        raise DomainError(f"QoE metrics must be non-negative: {bitrate_kbps}, {framerate_fps}, {resolution_width}")
    return QoeLabel(_gear(bitrate_kbps, BITRATE_BOUNDS), _gear(framerate_fps, FRAMERATE_BOUNDS),
                    _gear(resolution_width, WIDTH_BOUNDS))


def feature_vector(w: QosWindow) -> tuple[float, ...]:
    return (w.video_rate_kbps, w.fec_rate_kbps, w.loss_rate, w.iat_mean_ms, w.iat_std_ms)


def window_means(trace: Sequence[TraceRow], t_start_us: int, duration_us: int) -> tuple[float, float, float] | None:
    """Time-weighted mean (bitrate, framerate, width) over a window, or None without overlap."""
    if not trace:
        return None
    starts = np.array([r.t_us for r in trace], dtype=np.int64)
    ends = np.append(starts[1:], starts[-1] + 1_000_000)
    lo = np.maximum(starts, t_start_us)
    hi = np.minimum(ends, t_start_us + duration_us)
    w = np.clip(hi - lo, 0, None).astype(float)
    total = w.sum()
    if total <= 0:
        return None
    vals = np.array([[r.bitrate_kbps, r.framerate_fps, r.resolution_width] for r in trace], dtype=float)
    mean = (w[:, None] * vals).sum(axis=0) / total
    return float(mean[0]), float(mean[1]), float(mean[2])


def build_dataset(windows: Sequence[QosWindow], truth: GroundTruth | Sequence[TraceRow]) -> list[Sample]:
    """Label every non-sparse window from the ground-truth trace it overlaps."""
    if not windows:
        return []
    trace = truth.trace if isinstance(truth, GroundTruth) else list(truth)
    out: list[Sample] = []
    overlapped = False
    for w in windows:
        means = window_means(trace, w.t_start_us, w.duration_us)
        if means is None:
            continue
        overlapped = True
        if w.sparse:
            continue
        out.append(Sample(feature_vector(w), discretize(*means), w.t_start_us))
    if not overlapped:
        raise AlignmentError("QoS windows and ground-truth trace do not overlap in time")
    return out
