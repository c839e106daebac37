import io
import struct

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spotcheck import hprof
from spotcheck.errors import HprofFormatError, HprofTruncatedError, InputError
from spotcheck.featurize import load_schema

SERVICES = ["android/media/AudioManager", "android.view.WindowManager",
            "android/app/ActivityManager", "android.location.LocationManager",
            "android/net/ConnectivityManager"]


def _counts(summary):
    return {k: v for k, v in summary.instance_counts.items() if v}


def test_three_instances_of_one_class():
    w = hprof.HprofWriter(4)
    cid = w.load_class("android/media/AudioManager")
    w.heap_segment(b"".join(w.instance(cid) for _ in range(3)))
    s = hprof.parse_hprof(w.getvalue())
    assert _counts(s) == {"android/media/AudioManager": 3}
    assert s.version == "JAVA PROFILE 1.0.3" and s.identifier_size == 4


def test_empty_heap_dump():
    data = hprof.write_fixture({"classes": {"android/media/AudioManager": 4}, "segments": 0})
    s = hprof.parse_hprof(data)
    assert _counts(s) == {}
    assert s.skipped_records["heap_segments"] == 1


@settings(max_examples=40, deadline=None)
@given(
    st.dictionaries(st.sampled_from(SERVICES + ["com/example/Thing", "X"]), st.integers(0, 40), max_size=7),
    st.sampled_from([4, 8]),
    st.integers(0, 4),
)
def test_fixture_roundtrip(classes, ids, segments):
    data = hprof.write_fixture({"classes": classes, "identifier_size": ids, "segments": segments})
    s = hprof.parse_hprof(data)
    want = {k: v for k, v in classes.items() if v} if segments else {}
    assert _counts(s) == want
    assert s.bytes_consumed == len(data)
    assert s.skipped_records["top_level_0x05"] == 1


def test_identifier_widths_agree():
    m = {"classes": dict(zip(SERVICES, [1, 2, 3, 4, 5])), "segments": 2}
    a = hprof.parse_hprof(hprof.write_fixture({**m, "identifier_size": 4}))
    b = hprof.parse_hprof(hprof.write_fixture({**m, "identifier_size": 8}))
    assert a.instance_counts == b.instance_counts
    assert sorted(a.classes.values()) == sorted(b.classes.values())
    assert b.identifier_size == 8


def test_file_stream_input(tmp_path):
    data = hprof.write_fixture({"classes": {"X": 2}})
    path = tmp_path / "a.hprof"
    path.write_bytes(data)
    with open(path, "rb") as fh:
        assert _counts(hprof.parse_hprof(fh)) == {"X": 2}


def test_segment_additivity():
    def build(parts):
        w = hprof.HprofWriter(8)
        a = w.load_class("A")
        b = w.load_class("B")
        for na, nb in parts:
            w.heap_segment(b"".join([w.instance(a)] * na + [w.instance(b)] * nb))
        return hprof.parse_hprof(w.getvalue()).instance_counts

    both = build([(3, 1), (2, 5)])
    assert both == build([(3, 1)]) + build([(2, 5)])
    assert both == {"A": 5, "B": 6}


def test_bad_magic():
    with pytest.raises(HprofFormatError, match="bad magic"):
        hprof.parse_hprof(b"JAVA PROFILE 9.9\0" + b"\0" * 12)
    with pytest.raises(HprofFormatError):
        hprof.parse_hprof(b"")


def test_bad_identifier_size():
    with pytest.raises(HprofFormatError, match="identifier size"):
        hprof.parse_hprof(b"JAVA PROFILE 1.0.2\0" + struct.pack(">IQ", 2, 0))


def test_truncation_reports_offset():
    data = hprof.write_fixture({"classes": {"A": 3}})
    cut = len(data) - 7
    with pytest.raises(HprofTruncatedError) as info:
        hprof.parse_hprof(data[:cut])
    assert info.value.offset <= cut
    assert f"offset {info.value.offset}" in str(info.value)


def test_every_cut_inside_header_is_truncation():
    data = hprof.write_fixture({"classes": {"A": 1}})
    for cut in range(len(hprof.MAGICS[1]) + 1, len(hprof.MAGICS[1]) + 13):
        with pytest.raises(HprofTruncatedError):
            hprof.parse_hprof(data[:cut])


def test_unknown_subrecord_is_fatal():
    w = hprof.HprofWriter(4)
    cid = w.load_class("A")
    w.heap_segment(w.instance(cid) + b"\x77" + b"\0" * 8)
    with pytest.raises(HprofFormatError, match="0x77"):
        hprof.parse_hprof(w.getvalue())


def test_record_length_mismatch():
    w = hprof.HprofWriter(4)
    w.record(hprof.TAG_LOAD_CLASS, b"\0" * 10)
    with pytest.raises(HprofFormatError):
        hprof.parse_hprof(w.getvalue())


def test_duplicate_load_class_last_wins():
    w = hprof.HprofWriter(4)
    first = w.string("Old")
    second = w.string("New")
    for name_id in (first, second):
        w.record(hprof.TAG_LOAD_CLASS, struct.pack(">I", 1) + (0x9000).to_bytes(4, "big") + struct.pack(">I", 0) + name_id.to_bytes(4, "big"))
    w.heap_segment(w.instance(0x9000))
    s = hprof.parse_hprof(w.getvalue())
    assert _counts(s) == {"New": 1}
    assert s.skipped_records["duplicate_load_class"] == 1


def test_unresolved_instances_go_to_diagnostics():
    w = hprof.HprofWriter(4)
    w.heap_segment(w.instance(0xDEAD) + w.instance(0xDEAD))
    s = hprof.parse_hprof(w.getvalue())
    assert _counts(s) == {} and s.skipped_records["unresolved_instances"] == 2


@pytest.mark.parametrize("name,short", [
    ("android/media/AudioManager", "AudioManager"),
    ("android.media.AudioManager", "AudioManager"),
    ("AudioManager", "AudioManager"),
])
def test_simple_name(name, short):
    assert hprof.simple_name(name) == short


def test_histogram_from_five_schema_classes():
    schema = load_schema("hprof")
    mult = dict(zip(SERVICES, [2, 7, 1, 4, 9]))
    mult["com/example/NotAService"] = 3
    s = hprof.parse_hprof(hprof.write_fixture({"classes": mult, "segments": 3}))
    h = hprof.summary_to_histogram(s, schema, "app", "benign")
    assert h.counts == {"AudioManager": 2, "WindowManager": 7, "ActivityManager": 1,
                        "LocationManager": 4, "ConnectivityManager": 9}
    assert h.unknown == {"com/example/NotAService": 3}
    assert h.app_id == "app" and h.label == "benign"


def test_histogram_needs_hprof_schema():
    with pytest.raises(InputError):
        hprof.summary_to_histogram(hprof.HprofSummary(), load_schema("syscall"))


def test_writer_rejects_bad_width():
    with pytest.raises(InputError):
        hprof.HprofWriter(2)


def test_parse_does_not_read_past_end():
    data = hprof.write_fixture({"classes": {"A": 1}})
    stream = io.BytesIO(data)
    hprof.parse_hprof(stream)
    assert stream.tell() == len(data)
