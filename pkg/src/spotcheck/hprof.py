"""Streaming HPROF (1.0.2 / 1.0.3, incl. Android extensions) instance counter.

Only what is needed for class-instance histograms is decoded: the string
table, LOAD CLASS records and INSTANCE DUMP subrecords. Every other record is
length-decoded and skipped, so memory stays proportional to the string and
class tables rather than the heap.
"""
from __future__ import annotations

import io
import struct
from collections import Counter
from dataclasses import dataclass, field

from .errors import HprofFormatError, HprofTruncatedError, InputError
from .featurize import HPROF, FeatureSchema, RawHistogram, UNKNOWN

MAGICS = (b"JAVA PROFILE 1.0.2", b"JAVA PROFILE 1.0.3")

TAG_STRING = 0x01
TAG_LOAD_CLASS = 0x02
TAG_HEAP_DUMP = 0x0C
TAG_HEAP_DUMP_SEGMENT = 0x1C
TAG_HEAP_DUMP_END = 0x2C

SUB_CLASS_DUMP = 0x20
SUB_INSTANCE_DUMP = 0x21
SUB_OBJ_ARRAY_DUMP = 0x22
SUB_PRIM_ARRAY_DUMP = 0x23
SUB_PRIM_ARRAY_NODATA = 0xC3
SUB_HEAP_DUMP_INFO = 0xFE

# basic type code -> byte width (0 = identifier width)
TYPE_SIZES = {2: 0, 4: 1, 5: 2, 6: 4, 7: 8, 8: 1, 9: 2, 10: 4, 11: 8}

# root subrecords: tag -> (identifier count, u4 count)
ROOT_LAYOUTS = {
    0xFF: (1, 0),  # ROOT UNKNOWN
    0x01: (2, 0),  # JNI GLOBAL
    0x02: (1, 2),  # JNI LOCAL
    0x03: (1, 2),  # JAVA FRAME
    0x04: (1, 1),  # NATIVE STACK
    0x05: (1, 0),  # STICKY CLASS
    0x06: (1, 1),  # THREAD BLOCK
    0x07: (1, 0),  # MONITOR USED
    0x08: (1, 2),  # THREAD OBJECT
    # Android
    0x89: (1, 0),  # INTERNED STRING
    0x8A: (1, 0),  # FINALIZING
    0x8B: (1, 0),  # DEBUGGER
    0x8C: (1, 0),  # REFERENCE CLEANUP
    0x8D: (1, 0),  # VM INTERNAL
    0x8E: (1, 2),  # JNI MONITOR
    0x90: (1, 0),  # UNREACHABLE
}

_CHUNK = 1 << 20


@dataclass
class HprofSummary:
    version: str = ""
    identifier_size: int = 4
    strings: dict[int, str] = field(default_factory=dict)
    classes: dict[int, str] = field(default_factory=dict)
    instance_counts: Counter = field(default_factory=Counter)
    skipped_records: Counter = field(default_factory=Counter)
    bytes_consumed: int = 0


class _Reader:
    def __init__(self, stream):
        self.stream = stream
        self.offset = 0

    def read(self, n: int) -> bytes:
        data = self.stream.read(n)
        if len(data) != n:
            raise HprofTruncatedError(f"truncated: wanted {n} bytes, got {len(data)}", self.offset + len(data))
        self.offset += n
        return data

    def skip(self, n: int) -> None:
        while n > 0:
            k = min(n, _CHUNK)
            self.read(k)
            n -= k

    def u1(self) -> int:
        return self.read(1)[0]

    def u2(self) -> int:
        return struct.unpack(">H", self.read(2))[0]

    def u4(self) -> int:
        return struct.unpack(">I", self.read(4))[0]

    def ident(self, size: int) -> int:
        return int.from_bytes(self.read(size), "big")


def _read_header(r: _Reader, summary: HprofSummary) -> None:
    raw = bytearray()
    while True:
        b = r.stream.read(1)
        if not b:
            raise HprofFormatError("bad magic: missing NUL-terminated version string", 0)
        r.offset += 1
        if b == b"\0":
            break
        raw += b
        if len(raw) > 64:
            raise HprofFormatError("bad magic: version string too long", 0)
    if bytes(raw) not in MAGICS:
        raise HprofFormatError(f"bad magic {bytes(raw)!r}", 0)
    summary.version = raw.decode("ascii")
    size = r.u4()
    if size not in (4, 8):
        raise HprofFormatError(f"unsupported identifier size {size}", r.offset - 4)
    summary.identifier_size = size
    r.read(8)  # timestamp


def _skip_class_dump(r: _Reader, ids: int) -> None:
    r.read(ids + 4 + 6 * ids + 4)  # class, stack serial, super..reserved2, instance size
    for _ in range(r.u2()):  # constant pool
        r.u2()
        _skip_value(r, r.u1(), ids)
    for _ in range(r.u2()):  # static fields
        r.read(ids)
        _skip_value(r, r.u1(), ids)
    n = r.u2()  # instance fields: name id + type
    r.skip(n * (ids + 1))


def _skip_value(r: _Reader, type_code: int, ids: int) -> None:
    width = TYPE_SIZES.get(type_code)
    if width is None:
        raise HprofFormatError(f"unknown basic type {type_code}", r.offset - 1)
    r.read(width or ids)


def _walk_heap(r: _Reader, end: int, summary: HprofSummary, by_id: Counter) -> None:
    ids = summary.identifier_size
    while r.offset < end:
        start = r.offset
        tag = r.u1()
        if tag == SUB_INSTANCE_DUMP:
            r.read(ids + 4)
            class_id = r.ident(ids)
            r.skip(r.u4())
            by_id[class_id] += 1
        elif tag in ROOT_LAYOUTS:
            n_ids, n_u4 = ROOT_LAYOUTS[tag]
            r.read(n_ids * ids + 4 * n_u4)
            summary.skipped_records["root"] += 1
        elif tag == SUB_CLASS_DUMP:
            _skip_class_dump(r, ids)
            summary.skipped_records["class_dump"] += 1
        elif tag == SUB_OBJ_ARRAY_DUMP:
            r.read(ids + 4)
            n = r.u4()
            r.read(ids)
            r.skip(n * ids)
            summary.skipped_records["object_array"] += 1
        elif tag in (SUB_PRIM_ARRAY_DUMP, SUB_PRIM_ARRAY_NODATA):
            r.read(ids + 4)
            n = r.u4()
            type_code = r.u1()
            width = TYPE_SIZES.get(type_code)
            if width is None:
                raise HprofFormatError(f"unknown primitive array type {type_code}", r.offset - 1)
            if tag == SUB_PRIM_ARRAY_DUMP:
                r.skip(n * (width or ids))
            summary.skipped_records["primitive_array"] += 1
        elif tag == SUB_HEAP_DUMP_INFO:
            r.read(4 + ids)
            summary.skipped_records["heap_dump_info"] += 1
        else:
            raise HprofFormatError(f"unknown heap dump subrecord tag 0x{tag:02X}", start)
        if r.offset > end:
            raise HprofFormatError("heap dump subrecord overruns its record", start)


def parse_hprof(stream) -> HprofSummary:
    """Parse an HPROF byte stream (file object or bytes)."""
    if isinstance(stream, (bytes, bytearray, memoryview)):
        stream = io.BytesIO(bytes(stream))
    r = _Reader(stream)
    summary = HprofSummary()
    _read_header(r, summary)
    ids = summary.identifier_size
    by_id: Counter = Counter()
    while True:
        head = stream.read(1)
        if not head:
            break
        r.offset += 1
        tag = head[0]
        r.u4()  # time offset
        length = r.u4()
        body_start = r.offset
        end = body_start + length
        if tag == TAG_STRING:
            if length < ids:
                raise HprofFormatError("STRING record shorter than an identifier", body_start)
            sid = r.ident(ids)
            summary.strings[sid] = r.read(length - ids).decode("utf-8", errors="replace")
        elif tag == TAG_LOAD_CLASS:
            r.u4()
            class_id = r.ident(ids)
            r.u4()
            name_id = r.ident(ids)
            if class_id in summary.classes:
                summary.skipped_records["duplicate_load_class"] += 1
            summary.classes[class_id] = summary.strings.get(name_id, f"<unresolved string 0x{name_id:x}>")
            if r.offset != end:
                r.skip(end - r.offset)
        elif tag in (TAG_HEAP_DUMP, TAG_HEAP_DUMP_SEGMENT):
            _walk_heap(r, end, summary, by_id)
            summary.skipped_records["heap_segments"] += 1
        else:
            r.skip(length)
            summary.skipped_records[f"top_level_0x{tag:02X}"] += 1
        if r.offset != end:
            raise HprofFormatError(f"record length mismatch for tag 0x{tag:02X}", body_start)
    for class_id, n in by_id.items():
        name = summary.classes.get(class_id)
        if name is None:
            summary.skipped_records["unresolved_instances"] += n
        else:
            summary.instance_counts[name] += n
    summary.bytes_consumed = r.offset
    return summary


def simple_name(class_name: str) -> str:
    """``android/media/AudioManager`` or ``android.media.AudioManager`` -> ``AudioManager``."""
    return class_name.replace("/", ".").rsplit(".", 1)[-1]


def summary_to_histogram(summary: HprofSummary, schema: FeatureSchema, app_id: str = "", label: str = UNKNOWN) -> RawHistogram:
    """Instance counts restricted to the schema's simple class names."""
    if schema.kind != HPROF:
        raise InputError("HPROF summaries need an hprof schema")
    known = set(schema.names)
    counts: Counter = Counter()
    unknown: Counter = Counter()
    for name, n in summary.instance_counts.items():
        short = simple_name(name)
        if short in known:
            counts[short] += n
        else:
            unknown[name] += n
    return RawHistogram(app_id, label, dict(counts), unknown)


# -- fixture writer ---------------------------------------------------------

class HprofWriter:
    """Builds small but structurally complete HPROF files.

    Used to generate test fixtures whose instance counts are known exactly.
    """

    def __init__(self, identifier_size: int = 4, version: bytes = MAGICS[1]):
        if identifier_size not in (4, 8):
            raise InputError("identifier size must be 4 or 8")
        self.ids = identifier_size
        self.buf = bytearray(version + b"\0")
        self.buf += struct.pack(">IQ", identifier_size, 1_600_000_000_000)
        self._next = 0x1000

    def new_id(self) -> int:
        self._next += 0x10
        return self._next

    def _id(self, v: int) -> bytes:
        return v.to_bytes(self.ids, "big")

    def record(self, tag: int, body: bytes) -> None:
        self.buf += struct.pack(">BII", tag, 0, len(body)) + body

    def string(self, text: str) -> int:
        sid = self.new_id()
        self.record(TAG_STRING, self._id(sid) + text.encode("utf-8"))
        return sid

    def load_class(self, name: str, serial: int = 1) -> int:
        name_id = self.string(name)
        class_id = self.new_id()
        self.record(TAG_LOAD_CLASS, struct.pack(">I", serial) + self._id(class_id) + struct.pack(">I", 0) + self._id(name_id))
        return class_id

    # heap subrecord bodies
    def instance(self, class_id: int, payload: bytes = b"\0\0\0\0") -> bytes:
        return (bytes([SUB_INSTANCE_DUMP]) + self._id(self.new_id()) + struct.pack(">I", 0)
                + self._id(class_id) + struct.pack(">I", len(payload)) + payload)

    def roots(self) -> bytes:
        out = bytearray()
        for tag, (n_ids, n_u4) in ROOT_LAYOUTS.items():
            out += bytes([tag]) + b"".join(self._id(self.new_id()) for _ in range(n_ids)) + b"\0\0\0\7" * n_u4
        return bytes(out)

    def class_dump(self, class_id: int) -> bytes:
        i = self._id
        out = bytearray([SUB_CLASS_DUMP]) + i(class_id) + struct.pack(">I", 0)
        out += b"".join(i(0) for _ in range(6)) + struct.pack(">I", 16)
        out += struct.pack(">H", 2) + struct.pack(">HB", 1, 10) + struct.pack(">i", 42)
        out += struct.pack(">HB", 2, 2) + i(0)
        out += struct.pack(">H", 2) + i(self.new_id()) + bytes([11]) + struct.pack(">q", -1)
        out += i(self.new_id()) + bytes([4]) + b"\1"
        out += struct.pack(">H", 3)
        for t in (2, 7, 5):
            out += i(self.new_id()) + bytes([t])
        return bytes(out)

    def arrays(self, class_id: int) -> bytes:
        i = self._id
        out = bytearray([SUB_OBJ_ARRAY_DUMP]) + i(self.new_id()) + struct.pack(">II", 0, 3) + i(class_id)
        out += i(1) + i(2) + i(0)
        out += bytes([SUB_PRIM_ARRAY_DUMP]) + i(self.new_id()) + struct.pack(">IIB", 0, 5, 5) + b"\0a\0b\0c\0d\0e"
        out += bytes([SUB_PRIM_ARRAY_DUMP]) + i(self.new_id()) + struct.pack(">IIB", 0, 2, 11) + b"\0" * 16
        out += bytes([SUB_PRIM_ARRAY_NODATA]) + i(self.new_id()) + struct.pack(">IIB", 0, 9, 10)
        out += bytes([SUB_HEAP_DUMP_INFO]) + struct.pack(">I", 0x41) + i(self.new_id())
        return bytes(out)

    def heap_segment(self, body: bytes, tag: int = TAG_HEAP_DUMP_SEGMENT) -> None:
        self.record(tag, body)

    def getvalue(self) -> bytes:
        return bytes(self.buf)


def write_fixture(manifest: dict) -> bytes:
    """Write an HPROF file for ``manifest``.

    Manifest keys: ``classes`` ({class name: instance count}, names may use
    dots or slashes), ``identifier_size`` (4 or 8, default 4), ``segments``
    (number of HEAP DUMP SEGMENT records the instances are spread over,
    default 1; 0 writes an empty heap dump). Extra records of every skipped
    kind are interleaved so the parser's skip tables get exercised.
    """
    w = HprofWriter(manifest.get("identifier_size", 4))
    w.record(0x05, struct.pack(">III", 1, 0, 0))  # STACK TRACE, skipped as unknown
    class_ids = {name: w.load_class(name, k + 1) for k, name in enumerate(manifest["classes"])}
    filler = w.load_class("java/lang/Object", 999)
    segments = int(manifest.get("segments", 1))
    if segments == 0:
        w.heap_segment(b"", TAG_HEAP_DUMP)
    else:
        instances = [cid for name, cid in class_ids.items() for _ in range(manifest["classes"][name])]
        for s in range(segments):
            body = bytearray()
            if s == 0:
                body += w.roots() + w.class_dump(filler)
            body += w.arrays(filler)
            for cid in instances[s::segments]:
                body += w.instance(cid)
            w.heap_segment(bytes(body))
    w.record(TAG_HEAP_DUMP_END, b"")
    return w.getvalue()
