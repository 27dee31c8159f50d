"""Per-event feature rows and the fixed-length sequence tensor.

Row layout: one-hot over S sensors plus a pad slot, a scaled time-bin
feature, and the normalized signal, i.e. D = (S+1) + 1 + 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .preprocess import BinnedEvent, ProcessedSegment


@dataclass
class SequenceTensor:
    data: np.ndarray   # (L, D) float32
    mask: np.ndarray   # (L,) float32, 1 for real events


def feature_dim(n_sensors: int) -> int:
    return (n_sensors + 1) + 1 + 1


def encode_event(event: BinnedEvent, n_sensors: int, bins_per_day: int,
                 no_time: bool = False, raw_time_index: bool = False) -> np.ndarray:
    """One event -> feature row [one-hot(S+1), time, signal]."""
    if event.sensor_index > n_sensors:
        raise DataError(f"sensor index {event.sensor_index} exceeds pad sentinel {n_sensors}")
    row = np.zeros(feature_dim(n_sensors), dtype=np.float32)
    row[event.sensor_index] = 1.0
    if event.sensor_index == n_sensors:  # pad row: only the pad slot is set
        return row
    if not no_time:
        if raw_time_index:
            row[n_sensors + 1] = float(event.tau)
        elif bins_per_day > 1:
            row[n_sensors + 1] = event.tau / (bins_per_day - 1)
    row[n_sensors + 2] = event.signal
    return row


def build_sequence_tensor(segment: ProcessedSegment, n_sensors: int, bins_per_day: int,
                          length: int, no_time: bool = False,
                          raw_time_index: bool = False) -> SequenceTensor:
    if segment.length != length:
        raise DataError(f"segment length {segment.length} != expected {length}")
    data = np.stack([
        encode_event(e, n_sensors, bins_per_day, no_time=no_time, raw_time_index=raw_time_index)
        for e in segment.events
    ])
    return SequenceTensor(data=data, mask=np.asarray(segment.mask, dtype=np.float32))
