"""Log parsing, segmentation, label maps, and registry construction."""

import datetime as dt

import pytest

from care.errors import DataError, InputError, ParseError
from care.ingest import (ActivitySegment, LabelMap, Modality, SensorRegistry,
                         RegistryEntry, build_sensor_registry, dataset_stats,
                         load_coords, load_label_map, modality_of, parse_line,
                         parse_log, segment_activities)


def test_modality_prefixes():
    assert modality_of("M001") is Modality.MOTION
    assert modality_of("D012") is Modality.DOOR
    assert modality_of("T003") is Modality.TEMPERATURE
    assert modality_of("LS01") is Modality.OTHER
    assert modality_of("m001") is Modality.MOTION


def test_parse_line_plain_event():
    event = parse_line("2024-01-02 08:30:15.250000 M001 ON")
    assert event.timestamp == dt.datetime(2024, 1, 2, 8, 30, 15, 250000)
    assert event.sensor_id == "M001"
    assert event.raw_value == "ON"
    assert event.annotation is None


def test_parse_line_without_microseconds():
    event = parse_line("2024-01-02 08:30:15 D001 OPEN")
    assert event.timestamp == dt.datetime(2024, 1, 2, 8, 30, 15)


def test_parse_line_annotation():
    event = parse_line("2024-01-02 08:30:15 M001 ON Sleep begin")
    assert event.annotation == ("Sleep", "begin")


def test_parse_line_skips_blank_and_comment():
    assert parse_line("") is None
    assert parse_line("   \t ") is None
    assert parse_line("# header") is None


@pytest.mark.parametrize("line", [
    "2024-01-02 08:30:15 M001",                # too few fields
    "2024-01-02 08:30:15 M001 ON Sleep",       # five fields
    "2024-01-02 08:30:15 M001 ON Sleep begin extra",
    "2024-13-02 08:30:15 M001 ON",             # bad month
    "2024-01-02 08:30:15 M001 ON Sleep middle",  # bad marker
])
def test_parse_line_rejects_malformed(line):
    with pytest.raises(ParseError):
        parse_line(line)


def test_event_round_trip():
    event = parse_line("2024-01-02 08:30:15.125000 M001 ON Sleep begin")
    assert parse_line(event.to_line()) == event


def test_parse_log_counts(tmp_path):
    log = tmp_path / "x.log"
    log.write_text(
        "# comment\n"
        "2024-01-01 01:00:00 M001 ON\n"
        "\n"
        "garbage line\n"
        "2024-01-01 02:00:00 M002 ON\n"
        "2024-01-01 01:30:00 M003 ON\n"  # out of order
    )
    events, stats = parse_log(log)
    assert [e.sensor_id for e in events] == ["M001", "M002"]
    assert stats.events == 2
    assert stats.skipped == 2
    assert stats.errored == 2
    assert not stats.empty_input


def test_parse_log_error_budget(tmp_path):
    log = tmp_path / "bad.log"
    log.write_text("junk\n" * 5)
    with pytest.raises(ParseError):
        parse_log(log, max_error_lines=3)


def test_parse_log_missing_file(tmp_path):
    with pytest.raises(InputError):
        parse_log(tmp_path / "nope.log")


def test_parse_log_empty_flag(tmp_path):
    log = tmp_path / "empty.log"
    log.write_text("# only a comment\n")
    events, stats = parse_log(log)
    assert events == []
    assert stats.empty_input


def _label_map():
    return LabelMap(mapping={"Sleep": 0, "Eat": 1}, class_names=["Sleep", "Eat"],
                    dropped={"Other"})


def _events(lines):
    return [parse_line(line) for line in lines]


def test_segment_activities_basic():
    events = _events([
        "2024-01-01 01:00:00 M001 ON Sleep begin",
        "2024-01-01 01:01:00 M002 ON",
        "2024-01-01 01:02:00 M003 ON Sleep end",
        "2024-01-01 02:00:00 M004 ON Eat begin",
        "2024-01-01 02:01:00 M005 ON Eat end",
    ])
    segments = segment_activities(events, _label_map())
    assert len(segments) == 2
    assert segments[0].label == 0
    assert [e.sensor_id for e in segments[0].events] == ["M001", "M002", "M003"]
    assert segments[1].label == 1
    assert segments[1].span == (3, 4)


def test_segment_activities_nested_spans_duplicate_events():
    events = _events([
        "2024-01-01 01:00:00 M001 ON Sleep begin",
        "2024-01-01 01:01:00 M002 ON Eat begin",
        "2024-01-01 01:02:00 M003 ON Eat end",
        "2024-01-01 01:03:00 M004 ON Sleep end",
    ])
    segments = segment_activities(events, _label_map())
    assert len(segments) == 2
    lengths = sorted(len(s.events) for s in segments)
    assert lengths == [2, 4]  # inner span copies its share of the outer events


def test_segment_activities_dropped_label():
    events = _events([
        "2024-01-01 01:00:00 M001 ON Other begin",
        "2024-01-01 01:01:00 M002 ON Other end",
    ])
    assert segment_activities(events, _label_map()) == []


def test_segment_activities_unmatched_end():
    events = _events([
        "2024-01-01 01:00:00 M001 ON Sleep end",
        "2024-01-01 01:01:00 M002 ON Eat begin",
    ])
    warnings = []
    segments = segment_activities(events, _label_map(), warnings=warnings)
    assert segments == []
    assert len(warnings) == 2  # unmatched end, unterminated begin
    with pytest.raises(DataError):
        segment_activities(events, _label_map(), strict=True)


def test_segment_activities_unknown_label_raises():
    events = _events([
        "2024-01-01 01:00:00 M001 ON Cook begin",
        "2024-01-01 01:01:00 M002 ON Cook end",
    ])
    with pytest.raises(DataError):
        segment_activities(events, _label_map())


def test_empty_segment_rejected():
    with pytest.raises(DataError):
        ActivitySegment(label=0, events=[], span=(0, 0))


def test_load_label_map(tmp_path):
    path = tmp_path / "labels.csv"
    path.write_text("# raw,class\nSleep,Rest\nNap,Rest\nEat,Meal\nNoise,DROP\n")
    lm = load_label_map(path)
    assert lm.n_classes == 2
    assert lm.resolve("Sleep") == lm.resolve("Nap") == 0
    assert lm.resolve("Eat") == 1
    assert lm.resolve("Noise") is None
    with pytest.raises(DataError):
        lm.resolve("Unknown")


def test_load_coords_validation(tmp_path):
    good = tmp_path / "coords.csv"
    good.write_text("M001,10,20\nM002,255.5,0\n")
    coords = load_coords(good)
    assert coords["M001"] == (10.0, 20.0)
    bad = tmp_path / "bad.csv"
    bad.write_text("M001,300,20\n")
    with pytest.raises(DataError):
        load_coords(bad)
    nonnum = tmp_path / "nonnum.csv"
    nonnum.write_text("M001,a,b\n")
    with pytest.raises(DataError):
        load_coords(nonnum)


def test_build_registry_first_seen_and_fallback():
    events = _events([
        "2024-01-01 01:00:00 M002 ON",
        "2024-01-01 01:01:00 M001 ON",
        "2024-01-01 01:02:00 M002 OFF",
    ])
    warnings = []
    reg = build_sensor_registry(events, {"M002": (5.0, 6.0)}, warnings=warnings)
    assert reg.index_of("M002") == 0  # first seen wins
    assert reg.index_of("M001") == 1
    assert reg.entry("M002").coord == (5.0, 6.0)
    u, v = reg.entry("M001").coord  # grid fallback stays on canvas
    assert 0 <= u < 256 and 0 <= v < 256
    assert warnings

    reg_sorted = build_sensor_registry(events, {}, order="lexicographic")
    assert reg_sorted.index_of("M001") == 0


def test_registry_validation():
    entry = RegistryEntry("M001", Modality.MOTION, 0, (10.0, 10.0))
    with pytest.raises(DataError):
        SensorRegistry(entries=[entry, RegistryEntry("M001", Modality.MOTION, 1, (1.0, 1.0))])
    with pytest.raises(DataError):
        SensorRegistry(entries=[RegistryEntry("M002", Modality.MOTION, 2, (1.0, 1.0))])
    with pytest.raises(DataError):
        SensorRegistry(entries=[RegistryEntry("M003", Modality.MOTION, 0, (300.0, 1.0))])


def test_dataset_stats():
    events = _events([
        "2024-01-01 01:00:00 M001 ON Sleep begin",
        "2024-01-01 02:00:00 M002 ON Sleep end",
        "2024-01-01 03:00:00 M001 ON Eat begin",
        "2024-01-01 03:30:00 M003 ON Eat end",
    ])
    segments = segment_activities(events, _label_map())
    stats = dataset_stats(segments)
    assert stats["segments"] == 2
    assert stats["classes"] == {"0": 1, "1": 1}
    assert stats["sensors"] == 3
    assert stats["mean_duration_hours"] == pytest.approx(0.75)
