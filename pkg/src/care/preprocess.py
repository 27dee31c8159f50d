"""Temporal binning, frequency-based event filtering, normalization, padding.

All transforms are pure per-segment functions; the only fitted state is
the temperature range and the automatic sequence length, both computed
on the training split only.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError
from .ingest import ActivitySegment, Modality, SensorRegistry

ACTIVATION_TOKENS = {"ON", "OPEN", "PRESENT"}

CACHE_MAGIC = b"CAREP1"


@dataclass
class PreprocessConfig:
    bin_width_hours: float = 1.0          # off: set use_time_bins=False for the no-time ablation
    filter_threshold: Optional[float] = 0.01  # None disables filtering
    fixed_length: Optional[int] = None    # None = resolve from the train split
    temperature_range: Optional[tuple[float, float]] = None
    cyclic_bins: bool = True
    use_time_bins: bool = True
    registry_order: str = "first_seen"

    def __post_init__(self):
        if self.bin_width_hours <= 0:
            raise ConfigError("bin_width_hours must be > 0")
        if self.cyclic_bins and abs(24.0 / self.bin_width_hours - round(24.0 / self.bin_width_hours)) > 1e-9:
            raise ConfigError("bin_width_hours must divide 24 evenly when cyclic_bins is on")
        if self.filter_threshold is not None and not (0.0 < self.filter_threshold < 1.0):
            raise ConfigError("filter_threshold must lie in (0,1) or be off")
        if self.fixed_length is not None and self.fixed_length < 1:
            raise ConfigError("fixed_length must be >= 1")

    @property
    def bins_per_day(self) -> int:
        return int(round(24.0 / self.bin_width_hours))


@dataclass(frozen=True)
class BinnedEvent:
    tau: int          # time-bin index, 0-based
    sensor_index: int  # 0..S-1, or S for the pad sentinel
    signal: float      # normalized activation in [0,1]


@dataclass
class ProcessedSegment:
    label: int
    events: list[BinnedEvent]   # length exactly L
    mask: list[int]             # 1 for real events, then 0 for pads
    kept_fraction: float

    def __post_init__(self):
        if len(self.events) != len(self.mask):
            raise DataError("processed segment: events/mask length mismatch")

    @property
    def length(self) -> int:
        return len(self.events)

    @property
    def real_count(self) -> int:
        return sum(self.mask)


def bin_time(timestamp, bin_width_hours: float) -> int:
    """Time-of-day bin index: floor(hours-since-midnight / width)."""
    hours = timestamp.hour + timestamp.minute / 60.0 + timestamp.second / 3600.0 \
        + timestamp.microsecond / 3.6e9
    return int(math.floor(hours / bin_width_hours))


def filter_events(segment: ActivitySegment, threshold: float) -> ActivitySegment:
    """Drop events of sensors whose segment-relative frequency is below threshold.

    Frequencies are normalized so the most active sensor scores 1, hence a
    non-empty segment always survives.
    """
    counts: dict[str, int] = {}
    for event in segment.events:
        counts[event.sensor_id] = counts.get(event.sensor_id, 0) + 1
    peak = max(counts.values())
    kept = [e for e in segment.events if counts[e.sensor_id] / peak >= threshold]
    return ActivitySegment(label=segment.label, events=kept, span=segment.span)


def normalize_signal(raw_value: str, modality: Modality,
                     temperature_range: Optional[tuple[float, float]] = None) -> float:
    if modality is Modality.TEMPERATURE:
        if temperature_range is None:
            raise DataError("temperature event seen but no fitted temperature range")
        try:
            value = float(raw_value)
        except ValueError as exc:
            raise DataError(f"non-numeric temperature value {raw_value!r}") from exc
        lo, hi = temperature_range
        return float(min(1.0, max(0.0, (value - lo) / (hi - lo))))
    return 1.0 if raw_value.upper() in ACTIVATION_TOKENS else 0.0


def fit_normalization_stats(train_segments) -> Optional[tuple[float, float]]:
    """(min, max) over training temperature readings; None when absent."""
    lo, hi = math.inf, -math.inf
    for segment in train_segments:
        for event in segment.events:
            if event.modality is Modality.TEMPERATURE:
                try:
                    value = float(event.raw_value)
                except ValueError as exc:
                    raise DataError(f"non-numeric temperature value {event.raw_value!r}") from exc
                lo, hi = min(lo, value), max(hi, value)
    if lo is math.inf:
        return None
    if lo == hi:
        hi = lo + 1e-6
    return (lo, hi)


def pad_truncate(events: list[BinnedEvent], length: int,
                 pad_sensor_index: int) -> tuple[list[BinnedEvent], list[int]]:
    """Head-truncate or pad to exactly `length` events; mask marks real ones."""
    if length < 1:
        raise ConfigError("fixed length must be >= 1")
    real = min(len(events), length)
    out = list(events[:real])
    out.extend(BinnedEvent(tau=0, sensor_index=pad_sensor_index, signal=0.0)
               for _ in range(length - real))
    mask = [1] * real + [0] * (length - real)
    return out, mask


def resolve_auto_length(train_segments, percentile: float = 95.0, minimum: int = 8) -> int:
    """Fixed length = 95th percentile of post-filter lengths, at least `minimum`."""
    lengths = [len(s.events) for s in train_segments]
    if not lengths:
        return minimum
    value = float(np.percentile(lengths, percentile, method="inverted_cdf"))
    return max(minimum, int(math.ceil(value)))


def process_segment(segment: ActivitySegment, registry: SensorRegistry,
                    config: PreprocessConfig, length: int) -> ProcessedSegment:
    n_raw = len(segment.events)
    if config.filter_threshold is not None:
        segment = filter_events(segment, config.filter_threshold)
    binned = []
    for event in segment.events:
        binned.append(BinnedEvent(
            tau=bin_time(event.timestamp, config.bin_width_hours),
            sensor_index=registry.index_of(event.sensor_id),
            signal=normalize_signal(event.raw_value, event.modality, config.temperature_range),
        ))
    events, mask = pad_truncate(binned, length, pad_sensor_index=len(registry))
    return ProcessedSegment(label=segment.label, events=events, mask=mask,
                            kept_fraction=len(binned) / n_raw)


def process_segments(segments, registry: SensorRegistry,
                     config: PreprocessConfig, length: int) -> list[ProcessedSegment]:
    return [process_segment(s, registry, config, length) for s in segments]


# ---------------------------------------------------------------------------
# processed-segment cache (flat binary, little-endian)

def write_cache(path, processed: list[ProcessedSegment], n_sensors: int,
                length: int, n_classes: int) -> None:
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<HHHI", n_sensors, length, n_classes, len(processed)))
        mask_bytes = (length + 7) // 8
        for seg in processed:
            if seg.length != length:
                raise DataError("cache: segment length mismatch")
            fh.write(struct.pack("<H", seg.label))
            fh.write(np.packbits(np.asarray(seg.mask, dtype=np.uint8)).tobytes()[:mask_bytes])
            for event in seg.events:
                fh.write(struct.pack("<HHf", event.sensor_index, event.tau, event.signal))


def read_cache(path) -> tuple[list[ProcessedSegment], int, int, int]:
    """Returns (segments, n_sensors, length, n_classes)."""
    with open(path, "rb") as fh:
        magic = fh.read(6)
        if magic != CACHE_MAGIC:
            raise DataError(f"cache: bad magic {magic!r}")
        header = fh.read(10)
        if len(header) != 10:
            raise DataError("cache: unexpected EOF in header")
        n_sensors, length, n_classes, count = struct.unpack("<HHHI", header)
        mask_bytes = (length + 7) // 8
        record = struct.Struct("<HHf")
        segments = []
        for _ in range(count):
            head = fh.read(2 + mask_bytes)
            if len(head) != 2 + mask_bytes:
                raise DataError("cache: unexpected EOF in segment header")
            (label,) = struct.unpack("<H", head[:2])
            mask = np.unpackbits(np.frombuffer(head[2:], dtype=np.uint8))[:length].tolist()
            payload = fh.read(record.size * length)
            if len(payload) != record.size * length:
                raise DataError("cache: unexpected EOF in segment payload")
            events = [BinnedEvent(tau=t, sensor_index=s, signal=a)
                      for s, t, a in record.iter_unpack(payload)]
            real = sum(mask)
            segments.append(ProcessedSegment(label=label, events=events, mask=mask,
                                             kept_fraction=real / max(1, real)))
    return segments, n_sensors, length, n_classes
