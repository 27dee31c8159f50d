"""Binning, filtering, normalization, padding, and the binary cache."""

import datetime as dt

import numpy as np
import pytest

from care.errors import ConfigError, DataError
from care.ingest import ActivitySegment, Modality, SensorEvent, modality_of
from care.preprocess import (BinnedEvent, PreprocessConfig, ProcessedSegment, bin_time,
                             filter_events, fit_normalization_stats, normalize_signal,
                             pad_truncate, process_segment, read_cache,
                             resolve_auto_length, write_cache)
from synthetic import make_registry


def _event(sensor_id, value="ON", hour=10, minute=0, second=0):
    return SensorEvent(
        timestamp=dt.datetime(2024, 1, 1, hour, minute, second),
        sensor_id=sensor_id,
        raw_value=value,
        modality=modality_of(sensor_id),
    )


def _segment(sensor_ids, label=0, **kwargs):
    return ActivitySegment(label=label, events=[_event(s, **kwargs) for s in sensor_ids],
                           span=(0, len(sensor_ids) - 1))


def test_bin_time_floor():
    assert bin_time(dt.datetime(2024, 1, 1, 0, 0, 0), 1.0) == 0
    assert bin_time(dt.datetime(2024, 1, 1, 0, 59, 59), 1.0) == 0
    assert bin_time(dt.datetime(2024, 1, 1, 1, 0, 0), 1.0) == 1
    assert bin_time(dt.datetime(2024, 1, 1, 23, 59, 59), 1.0) == 23
    assert bin_time(dt.datetime(2024, 1, 1, 13, 30, 0), 0.5) == 27


def test_config_validation():
    with pytest.raises(ConfigError):
        PreprocessConfig(bin_width_hours=0)
    with pytest.raises(ConfigError):
        PreprocessConfig(bin_width_hours=5.0)  # does not divide 24
    with pytest.raises(ConfigError):
        PreprocessConfig(filter_threshold=1.5)
    with pytest.raises(ConfigError):
        PreprocessConfig(fixed_length=0)
    assert PreprocessConfig(bin_width_hours=2.0).bins_per_day == 12


def test_filter_drops_rare_sensors():
    seg = _segment(["M001"] * 8 + ["M002"] * 2 + ["M003"])
    kept = filter_events(seg, 0.25)
    ids = {e.sensor_id for e in kept.events}
    assert ids == {"M001", "M002"}  # 2/8 = 0.25 survives the >= comparison
    assert len(kept.events) == 10


def test_filter_most_active_always_survives():
    seg = _segment(["M001", "M002", "M003"])
    kept = filter_events(seg, 0.99)
    assert len(kept.events) == 3  # all tie at frequency 1


def test_filter_monotone_in_threshold():
    rng = np.random.default_rng(3)
    ids = [f"M{rng.integers(1, 6):03d}" for _ in range(40)]
    seg = _segment(ids)
    sizes = [len(filter_events(seg, t).events) for t in (0.05, 0.2, 0.5, 0.9)]
    assert sizes == sorted(sizes, reverse=True)


def test_normalize_signal_binary():
    assert normalize_signal("ON", Modality.MOTION) == 1.0
    assert normalize_signal("off", Modality.MOTION) == 0.0
    assert normalize_signal("OPEN", Modality.DOOR) == 1.0
    assert normalize_signal("CLOSE", Modality.DOOR) == 0.0
    assert normalize_signal("PRESENT", Modality.OTHER) == 1.0
    assert normalize_signal("ABSENT", Modality.OTHER) == 0.0


def test_normalize_signal_temperature():
    rng = (15.0, 25.0)
    assert normalize_signal("20", Modality.TEMPERATURE, rng) == pytest.approx(0.5)
    assert normalize_signal("10", Modality.TEMPERATURE, rng) == 0.0  # clipped
    assert normalize_signal("30", Modality.TEMPERATURE, rng) == 1.0
    with pytest.raises(DataError):
        normalize_signal("20", Modality.TEMPERATURE, None)
    with pytest.raises(DataError):
        normalize_signal("warm", Modality.TEMPERATURE, rng)


def test_fit_normalization_stats():
    segs = [_segment(["T001", "T001"], value="18.5"),
            _segment(["T001"], value="22.0")]
    assert fit_normalization_stats(segs) == (18.5, 22.0)
    assert fit_normalization_stats([_segment(["M001"])]) is None
    lo, hi = fit_normalization_stats([_segment(["T001"], value="20")])
    assert hi > lo  # degenerate range is widened


def test_pad_truncate():
    events = [BinnedEvent(tau=t, sensor_index=0, signal=1.0) for t in range(5)]
    out, mask = pad_truncate(events, 3, pad_sensor_index=9)
    assert [e.tau for e in out] == [0, 1, 2]  # head truncation
    assert mask == [1, 1, 1]
    out, mask = pad_truncate(events, 8, pad_sensor_index=9)
    assert len(out) == 8 and mask == [1] * 5 + [0] * 3
    assert all(e.sensor_index == 9 and e.signal == 0.0 for e in out[5:])


def test_resolve_auto_length():
    segs = [_segment(["M001"] * n) for n in range(1, 101)]
    assert resolve_auto_length(segs) == 95  # 95th percentile, inverted cdf
    assert resolve_auto_length([_segment(["M001"])]) == 8  # floor at the minimum
    assert resolve_auto_length([]) == 8


def test_process_segment_end_to_end():
    registry = make_registry()
    cfg = PreprocessConfig(filter_threshold=None)
    seg = _segment(["M001", "M002", "M001"], hour=14)
    processed = process_segment(seg, registry, cfg, length=5)
    assert processed.length == 5
    assert processed.mask == [1, 1, 1, 0, 0]
    assert processed.events[0].tau == 14
    assert processed.events[0].sensor_index == registry.index_of("M001")
    assert processed.events[3].sensor_index == len(registry)  # pad sentinel
    assert processed.kept_fraction == 1.0


def test_process_segment_kept_fraction():
    registry = make_registry()
    cfg = PreprocessConfig(filter_threshold=0.5)
    seg = _segment(["M001"] * 6 + ["M002"])
    processed = process_segment(seg, registry, cfg, length=10)
    assert processed.real_count == 6
    assert processed.kept_fraction == pytest.approx(6 / 7)


def test_cache_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    length, n_sensors = 6, 12
    segments = []
    for _ in range(7):
        real = int(rng.integers(1, length + 1))
        events = [BinnedEvent(tau=int(rng.integers(0, 24)),
                              sensor_index=int(rng.integers(0, n_sensors + 1)),
                              signal=float(np.float32(rng.random())))
                  for _ in range(length)]
        segments.append(ProcessedSegment(label=int(rng.integers(0, 4)), events=events,
                                         mask=[1] * real + [0] * (length - real),
                                         kept_fraction=1.0))
    path = tmp_path / "seg.cache"
    write_cache(path, segments, n_sensors, length, 4)
    loaded, s, l, c = read_cache(path)
    assert (s, l, c) == (n_sensors, length, 4)
    assert len(loaded) == len(segments)
    for a, b in zip(segments, loaded):
        assert a.label == b.label and a.mask == b.mask
        assert [(e.tau, e.sensor_index) for e in a.events] == \
               [(e.tau, e.sensor_index) for e in b.events]
        assert np.allclose([e.signal for e in a.events], [e.signal for e in b.events])


def test_cache_rejects_bad_magic(tmp_path):
    path = tmp_path / "seg.cache"
    path.write_bytes(b"NOTACACHE")
    with pytest.raises(DataError):
        read_cache(path)


def test_cache_rejects_truncated_file(tmp_path):
    seg = ProcessedSegment(label=0, mask=[1, 1],
                           events=[BinnedEvent(0, 0, 1.0), BinnedEvent(1, 1, 0.5)],
                           kept_fraction=1.0)
    path = tmp_path / "seg.cache"
    write_cache(path, [seg], 2, 2, 1)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(DataError):
        read_cache(path)
