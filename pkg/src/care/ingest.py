"""Parsing of CASAS-style sensor logs into typed events and labeled segments.

Log grammar, one record per line:

    <YYYY-MM-DD> <HH:MM:SS[.ffffff]> <sensor_id> <value> [<activity> <begin|end>]

fields separated by spaces or tabs. Blank lines and lines starting with
'#' are skipped.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional

from .errors import DataError, InputError, ParseError

CANVAS = 256.0  # floorplan coordinates live in [0, CANVAS)

TIMESTAMP_FORMATS = ("%Y-%m-%d %H:%M:%S.%f", "%Y-%m-%d %H:%M:%S")

DROP_CLASS = "DROP"


class Modality(Enum):
    MOTION = "motion"
    DOOR = "door"
    TEMPERATURE = "temperature"
    OTHER = "other"


_PREFIX_MODALITY = {"M": Modality.MOTION, "D": Modality.DOOR, "T": Modality.TEMPERATURE}


def modality_of(sensor_id: str) -> Modality:
    return _PREFIX_MODALITY.get(sensor_id[:1].upper(), Modality.OTHER)


@dataclass(frozen=True)
class SensorEvent:
    timestamp: dt.datetime
    sensor_id: str
    raw_value: str
    modality: Modality
    annotation: Optional[tuple[str, str]] = None  # (activity, "begin"|"end")

    def to_line(self) -> str:
        """Serialize back to the log grammar; re-parsing yields an equal event."""
        stamp = self.timestamp.strftime("%Y-%m-%d %H:%M:%S.%f")
        parts = [stamp, self.sensor_id, self.raw_value]
        if self.annotation is not None:
            parts.extend(self.annotation)
        return " ".join(parts)


@dataclass(frozen=True)
class RegistryEntry:
    sensor_id: str
    modality: Modality
    index: int
    coord: tuple[float, float]


@dataclass
class SensorRegistry:
    entries: list[RegistryEntry]

    def __post_init__(self):
        self.entries = sorted(self.entries, key=lambda e: e.index)
        self._by_id = {e.sensor_id: e for e in self.entries}
        if len(self._by_id) != len(self.entries):
            raise DataError("registry: duplicate sensor ids")
        indices = sorted(e.index for e in self.entries)
        if indices != list(range(len(self.entries))):
            raise DataError("registry: indices must be dense 0..S-1")
        for e in self.entries:
            u, v = e.coord
            if not (0 <= u < CANVAS and 0 <= v < CANVAS):
                raise DataError(f"registry: coordinate out of [0,{int(CANVAS)}) for {e.sensor_id}")

    def __len__(self):
        return len(self.entries)

    def __contains__(self, sensor_id):
        return sensor_id in self._by_id

    def entry(self, sensor_id: str) -> RegistryEntry:
        return self._by_id[sensor_id]

    def index_of(self, sensor_id: str) -> int:
        return self._by_id[sensor_id].index

    def by_index(self, index: int) -> RegistryEntry:
        return self.entries[index]


@dataclass
class ActivitySegment:
    label: int
    events: list[SensorEvent]
    span: tuple[int, int]  # (begin index, end index) into the raw log, inclusive

    def __post_init__(self):
        if not self.events:
            raise DataError("segment: empty event list")
        if self.label < 0:
            raise DataError("segment: negative label")

    def duration_hours(self) -> float:
        delta = self.events[-1].timestamp - self.events[0].timestamp
        return delta.total_seconds() / 3600.0


@dataclass
class LabelMap:
    mapping: dict[str, int]  # raw activity string -> class id
    class_names: list[str]
    dropped: set[str] = field(default_factory=set)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, raw_label: str) -> Optional[int]:
        """Class id for a raw label, None when dropped, DataError when unmapped."""
        if raw_label in self.dropped:
            return None
        if raw_label not in self.mapping:
            raise DataError(f"label map: no entry for activity {raw_label!r}")
        return self.mapping[raw_label]


def load_label_map(path) -> LabelMap:
    """Read a `raw_label,class_name` CSV; class_name DROP discards the label."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"label map file not found: {path}")
    mapping: dict[str, int] = {}
    class_names: list[str] = []
    dropped: set[str] = set()
    with path.open(newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise DataError(f"label map: expected 2 columns, got {row!r}")
            raw, name = row[0].strip(), row[1].strip()
            if name == DROP_CLASS:
                dropped.add(raw)
                continue
            if name not in class_names:
                class_names.append(name)
            mapping[raw] = class_names.index(name)
    return LabelMap(mapping=mapping, class_names=class_names, dropped=dropped)


# ---------------------------------------------------------------------------
# line / file parsing

_SKIP = object()


def parse_timestamp(date_token: str, time_token: str, line_no=None) -> dt.datetime:
    text = f"{date_token} {time_token}"
    for fmt in TIMESTAMP_FORMATS:
        try:
            return dt.datetime.strptime(text, fmt)
        except ValueError:
            continue
    raise ParseError(f"malformed timestamp {text!r}", line_no)


def parse_line(line: str, line_no: int | None = None):
    """One log record -> SensorEvent; blank/comment lines -> None."""
    stripped = line.strip()
    if not stripped or stripped.startswith("#"):
        return None
    fields = stripped.split()
    if len(fields) < 4:
        raise ParseError(f"expected >=4 fields, got {len(fields)}", line_no)
    if len(fields) == 5 or len(fields) > 6:
        raise ParseError(f"expected 4 or 6 fields, got {len(fields)}", line_no)
    timestamp = parse_timestamp(fields[0], fields[1], line_no)
    sensor_id, raw_value = fields[2], fields[3]
    annotation = None
    if len(fields) == 6:
        activity, marker = fields[4], fields[5]
        if marker not in ("begin", "end"):
            raise ParseError(f"unknown marker token {marker!r}", line_no)
        annotation = (activity, marker)
    return SensorEvent(
        timestamp=timestamp,
        sensor_id=sensor_id,
        raw_value=raw_value,
        modality=modality_of(sensor_id),
        annotation=annotation,
    )


@dataclass
class ParseStats:
    lines_read: int = 0
    events: int = 0
    skipped: int = 0
    errored: int = 0
    empty_input: bool = False
    error_samples: list[str] = field(default_factory=list)


def parse_log(path, max_error_lines: int = 100) -> tuple[list[SensorEvent], ParseStats]:
    """Parse a log file into time-ordered events plus parse statistics.

    Malformed lines and timestamp-order violations are recorded as errors;
    more than `max_error_lines` of them aborts the parse.
    """
    path = Path(path)
    if not path.exists():
        raise InputError(f"log file not found: {path}")
    events: list[SensorEvent] = []
    stats = ParseStats()
    last_ts = None
    with path.open() as fh:
        for line_no, line in enumerate(fh, start=1):
            stats.lines_read += 1
            try:
                event = parse_line(line, line_no)
            except ParseError as exc:
                stats.errored += 1
                if len(stats.error_samples) < 10:
                    stats.error_samples.append(str(exc))
                if stats.errored > max_error_lines:
                    raise ParseError(
                        f"aborting after {stats.errored} malformed lines "
                        f"(last: {exc})", line_no
                    ) from exc
                continue
            if event is None:
                stats.skipped += 1
                continue
            if last_ts is not None and event.timestamp < last_ts:
                stats.errored += 1
                if len(stats.error_samples) < 10:
                    stats.error_samples.append(f"line {line_no}: timestamp order violation")
                if stats.errored > max_error_lines:
                    raise ParseError(f"aborting after {stats.errored} bad lines", line_no)
                continue
            last_ts = event.timestamp
            events.append(event)
            stats.events += 1
    if not events:
        stats.empty_input = True
    return events, stats


# ---------------------------------------------------------------------------
# segmentation

def segment_activities(events, label_map: LabelMap, strict: bool = False,
                       warnings: list | None = None) -> list[ActivitySegment]:
    """Group events into labeled segments by begin/end annotation pairs.

    Every event whose index falls inside a (begin ... end) span belongs to
    that span's segment; nested/overlapping spans each get a full copy.
    """
    open_spans: dict[str, list[int]] = {}
    raw_segments: list[tuple[str, int, int]] = []
    for idx, event in enumerate(events):
        if event.annotation is None:
            continue
        activity, marker = event.annotation
        if marker == "begin":
            open_spans.setdefault(activity, []).append(idx)
        else:
            starts = open_spans.get(activity)
            if not starts:
                if strict:
                    raise DataError(f"'end' without matching 'begin' for {activity!r} at event {idx}")
                if warnings is not None:
                    warnings.append(f"dropped unmatched 'end' for {activity!r} at event {idx}")
                continue
            raw_segments.append((activity, starts.pop(), idx))
    for activity, starts in open_spans.items():
        for start in starts:
            if warnings is not None:
                warnings.append(f"dropped unterminated 'begin' for {activity!r} at event {start}")

    segments = []
    for activity, start, end in sorted(raw_segments, key=lambda s: (s[1], s[2])):
        label = label_map.resolve(activity)
        if label is None:
            continue
        segments.append(ActivitySegment(label=label, events=list(events[start : end + 1]),
                                        span=(start, end)))
    return segments


# ---------------------------------------------------------------------------
# sensor registry

def _fallback_grid_coord(index: int, total: int) -> tuple[float, float]:
    """Deterministic row-major grid cell center over the canvas."""
    side = max(1, math.ceil(math.sqrt(total)))
    cell = CANVAS / side
    row, col = divmod(index, side)
    return (min((col + 0.5) * cell, CANVAS - 1e-6), min((row + 0.5) * cell, CANVAS - 1e-6))


def load_coords(path) -> dict[str, tuple[float, float]]:
    """Read a `sensor_id,u,v` CSV with u,v in [0,256)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"coordinates file not found: {path}")
    coords = {}
    with path.open(newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 3:
                raise DataError(f"coords file: expected 3 columns, got {row!r}")
            sensor_id = row[0].strip()
            try:
                u, v = float(row[1]), float(row[2])
            except ValueError as exc:
                raise DataError(f"coords file: non-numeric coordinate in {row!r}") from exc
            if not (0 <= u < CANVAS and 0 <= v < CANVAS):
                raise DataError(f"coordinate out of [0,{int(CANVAS)}): {row!r}")
            coords[sensor_id] = (u, v)
    return coords


def build_sensor_registry(events, coords: dict[str, tuple[float, float]],
                          order: str = "first_seen",
                          warnings: list | None = None) -> SensorRegistry:
    """Registry over every sensor appearing in `events`, densely indexed."""
    seen: list[str] = []
    seen_set = set()
    for event in events:
        if event.sensor_id not in seen_set:
            seen_set.add(event.sensor_id)
            seen.append(event.sensor_id)
    if order == "lexicographic":
        seen.sort()
    elif order != "first_seen":
        raise DataError(f"registry order must be first_seen or lexicographic, got {order!r}")
    entries = []
    for index, sensor_id in enumerate(seen):
        if sensor_id in coords:
            coord = coords[sensor_id]
        else:
            coord = _fallback_grid_coord(index, len(seen))
            if warnings is not None:
                warnings.append(f"no coordinates for {sensor_id}; using grid fallback {coord}")
        entries.append(RegistryEntry(sensor_id=sensor_id, modality=modality_of(sensor_id),
                                     index=index, coord=coord))
    return SensorRegistry(entries=entries)


# ---------------------------------------------------------------------------
# summary statistics

def dataset_stats(segments, registry: SensorRegistry | None = None) -> dict:
    if not segments:
        raise DataError("dataset_stats: no segments")
    per_class: dict[int, int] = {}
    lengths = []
    durations = []
    sensors = set()
    for seg in segments:
        per_class[seg.label] = per_class.get(seg.label, 0) + 1
        lengths.append(len(seg.events))
        durations.append(seg.duration_hours())
        sensors.update(e.sensor_id for e in seg.events)
    lengths.sort()

    def pct(q):
        return lengths[min(len(lengths) - 1, int(q * (len(lengths) - 1) + 0.5))]

    return {
        "segments": len(segments),
        "classes": {str(k): v for k, v in sorted(per_class.items())},
        "sensors": len(registry) if registry is not None else len(sensors),
        "length_percentiles": {"p50": pct(0.5), "p90": pct(0.9), "p95": pct(0.95),
                               "max": lengths[-1]},
        "mean_duration_hours": sum(durations) / len(durations),
    }
