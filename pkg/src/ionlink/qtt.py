"""Reader and writer for ``.qtt`` time-tag files.

Layout, all little-endian::

    magic          4s   b"QTT1"
    version        u16
    n_channels     u16
    channel map    n_channels * (u8 channel id, u8 role code)
    config digest  32s
    record count   u64
    records        record count * 12 bytes:
                   u64 timestamp_ps, u8 channel, u8 flags, u16 reserved (0)

Flags bit 0 marks a time-tagger overflow; the other bits must be zero.
Timestamps are absolute and non-decreasing across the file.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, NamedTuple

import numpy as np

MAGIC = b"QTT1"
VERSION = 1
RECORD_SIZE = 12
FLAG_OVERFLOW = 0x01
RESERVED_FLAG_BITS = 0xFE

ROLE_CODES = {"trigger": 0, "pmt": 1, "apd": 2, "snspd": 3}
ROLE_NAMES = {v: k for k, v in ROLE_CODES.items()}

RECORD_DTYPE = np.dtype([("timestamp_ps", "<u8"), ("channel", "u1"),
                         ("flags", "u1"), ("reserved", "<u2")])
assert RECORD_DTYPE.itemsize == RECORD_SIZE

_PREFIX = struct.Struct("<4sHH")
_TAIL = struct.Struct("<32sQ")
CHUNK_RECORDS = 1 << 16


class QttFormatError(ValueError):
    """Parse or write failure with the byte offset where it was detected."""

    def __init__(self, reason: str, offset: int, detail: str = "", record_index: int | None = None):
        self.reason = reason
        self.offset = offset
        self.record_index = record_index
        where = f"byte {offset}"
        if record_index is not None:
            where += f", record {record_index}"
        super().__init__(f"{reason} at {where}" + (f": {detail}" if detail else ""))


class TimeTagRecord(NamedTuple):
    timestamp_ps: int
    channel: int
    flags: int = 0


@dataclass
class StreamHeader:
    channel_map: dict[int, str]
    config_digest: bytes = bytes(32)
    record_count: int = 0
    version: int = VERSION

    def __post_init__(self):
        if len(self.config_digest) != 32:
            raise ValueError("config digest must be 32 bytes")
        for ch, role in self.channel_map.items():
            if not 0 <= ch <= 255:
                raise ValueError(f"channel id {ch} does not fit in a byte")
            if role not in ROLE_CODES:
                raise ValueError(f"unknown role {role!r} for channel {ch}")

    @property
    def size(self) -> int:
        return _PREFIX.size + 2 * len(self.channel_map) + _TAIL.size

    def pack(self) -> bytes:
        parts = [_PREFIX.pack(MAGIC, self.version, len(self.channel_map))]
        for ch in sorted(self.channel_map):
            parts.append(bytes((ch, ROLE_CODES[self.channel_map[ch]])))
        parts.append(_TAIL.pack(self.config_digest, self.record_count))
        return b"".join(parts)

    def channels_of(self, role: str) -> list[int]:
        return sorted(ch for ch, r in self.channel_map.items() if r == role)


def _as_array(records) -> np.ndarray:
    if isinstance(records, np.ndarray) and records.dtype == RECORD_DTYPE:
        return records
    rows = list(records)
    out = np.zeros(len(rows), dtype=RECORD_DTYPE)
    if rows:
        t, ch, fl = zip(*((r[0], r[1], r[2] if len(r) > 2 else 0) for r in rows))
        out["timestamp_ps"] = t
        out["channel"] = ch
        out["flags"] = fl
    return out


class StreamWriter:
    """Incremental writer; call :meth:`write` with record batches, then :meth:`close`.

    The record count in the header is patched on close, so the sink must be
    seekable unless ``expected_count`` is given up front.
    """

    def __init__(self, sink: BinaryIO, header: StreamHeader, expected_count: int | None = None):
        self.sink = sink
        self.header = header
        self.expected_count = expected_count
        self._mapped = np.zeros(256, dtype=bool)
        self._mapped[list(header.channel_map)] = True
        self._last = 0
        self._count = 0
        self._start = sink.tell() if sink.seekable() else None
        if expected_count is None and self._start is None:
            raise ValueError("non-seekable sink needs expected_count")
        header.record_count = expected_count if expected_count is not None else 0
        self.bytes_written = sink.write(header.pack())

    def write(self, records) -> None:
        arr = _as_array(records)
        if arr.size == 0:
            return
        t = arr["timestamp_ps"]
        if t[0] < self._last or np.any(t[1:] < t[:-1]):
            raise ValueError("records are not sorted by timestamp")
        if not np.all(self._mapped[arr["channel"]]):
            bad = sorted(set(arr["channel"][~self._mapped[arr["channel"]]].tolist()))
            raise ValueError(f"records on unmapped channels {bad}")
        if np.any(arr["flags"] & RESERVED_FLAG_BITS) or np.any(arr["reserved"]):
            raise ValueError("reserved flag bits or bytes set")
        self._last = int(t[-1])
        self._count += arr.size
        self.bytes_written += self.sink.write(arr.tobytes())

    def close(self) -> int:
        if self.expected_count is not None:
            if self._count != self.expected_count:
                raise ValueError(f"wrote {self._count} records, header promised {self.expected_count}")
        else:
            end = self.sink.tell()
            self.sink.seek(self._start + self.header.size - 8)
            self.sink.write(struct.pack("<Q", self._count))
            self.sink.seek(end)
        self.header.record_count = self._count
        return self.bytes_written


def write_stream(header: StreamHeader, records: Iterable, sink: BinaryIO) -> int:
    """Write a full stream and return the number of bytes emitted."""
    expected = None
    if not sink.seekable():
        records = _as_array(records)
        expected = records.size
    writer = StreamWriter(sink, header, expected)
    if isinstance(records, np.ndarray):
        writer.write(records)
    else:
        batch = []
        for rec in records:
            batch.append(rec)
            if len(batch) >= CHUNK_RECORDS:
                writer.write(batch)
                batch = []
        writer.write(batch)
    return writer.close()


def _read_exact(source: BinaryIO, n: int) -> bytes:
    buf = source.read(n)
    if len(buf) == n:
        return buf
    parts = [buf]
    got = len(buf)
    while got < n:
        more = source.read(n - got)
        if not more:
            break
        parts.append(more)
        got += len(more)
    return b"".join(parts)


def read_header(source: BinaryIO) -> StreamHeader:
    prefix = _read_exact(source, _PREFIX.size)
    if prefix[:4] != MAGIC[: len(prefix[:4])] or not prefix:
        raise QttFormatError("bad_magic", 0, f"expected {MAGIC!r}, got {prefix[:4]!r}")
    if len(prefix) < _PREFIX.size:
        raise QttFormatError("truncated_header", len(prefix))
    _, version, n_channels = _PREFIX.unpack(prefix)
    if version != VERSION:
        raise QttFormatError("bad_version", 4, f"version {version}, reader supports {VERSION}")
    raw_map = _read_exact(source, 2 * n_channels)
    offset = _PREFIX.size
    if len(raw_map) < 2 * n_channels:
        raise QttFormatError("truncated_header", offset + len(raw_map))
    channel_map = {}
    for i in range(n_channels):
        ch, code = raw_map[2 * i], raw_map[2 * i + 1]
        if code not in ROLE_NAMES:
            raise QttFormatError("bad_role", offset + 2 * i + 1, f"role code {code}")
        if ch in channel_map:
            raise QttFormatError("duplicate_channel", offset + 2 * i, f"channel {ch}")
        channel_map[ch] = ROLE_NAMES[code]
    offset += 2 * n_channels
    tail = _read_exact(source, _TAIL.size)
    if len(tail) < _TAIL.size:
        raise QttFormatError("truncated_header", offset + len(tail))
    digest, count = _TAIL.unpack(tail)
    return StreamHeader(channel_map, digest, count, version)


class QttReader:
    """Single-pass validating reader.

    Iterating :meth:`chunks` yields numpy record arrays of at most
    ``chunk_records`` rows; :meth:`records` yields one :class:`TimeTagRecord`
    at a time. Memory use is bounded by the chunk size.
    """

    def __init__(self, source: BinaryIO, chunk_records: int = CHUNK_RECORDS):
        self.source = source
        self.header = read_header(source)
        self.chunk_records = chunk_records
        self._mapped = np.zeros(256, dtype=bool)
        self._mapped[list(self.header.channel_map)] = True
        self._consumed = False

    def chunks(self) -> Iterator[np.ndarray]:
        if self._consumed:
            raise RuntimeError("stream already consumed; readers are single pass")
        self._consumed = True
        hdr = self.header
        base = hdr.size
        index = 0
        last = 0
        while True:
            want = self.chunk_records * RECORD_SIZE
            buf = _read_exact(self.source, want)
            if not buf:
                break
            whole = len(buf) // RECORD_SIZE
            if whole:
                arr = np.frombuffer(buf, dtype=RECORD_DTYPE, count=whole)
                self._validate(arr, base + index * RECORD_SIZE, index, last)
                last = int(arr["timestamp_ps"][-1])
            if len(buf) % RECORD_SIZE:
                raise QttFormatError("truncated_record", base + (index + whole) * RECORD_SIZE,
                                     f"{len(buf) % RECORD_SIZE} trailing bytes", index + whole)
            index += whole
            if index > hdr.record_count:
                raise QttFormatError("count_mismatch", base + hdr.record_count * RECORD_SIZE,
                                     f"header declares {hdr.record_count} records, file has more",
                                     hdr.record_count)
            yield arr
            if len(buf) < want:
                break
        if index != hdr.record_count:
            raise QttFormatError("count_mismatch", base + index * RECORD_SIZE,
                                 f"header declares {hdr.record_count} records, found {index}", index)

    def _validate(self, arr: np.ndarray, offset: int, index: int, last: int) -> None:
        t = arr["timestamp_ps"]
        if t[0] < last:
            raise QttFormatError("non_monotone", offset, "timestamp decreases", index)
        down = np.flatnonzero(t[1:] < t[:-1])
        if down.size:
            k = int(down[0]) + 1
            raise QttFormatError("non_monotone", offset + k * RECORD_SIZE, "timestamp decreases", index + k)
        bad = np.flatnonzero(~self._mapped[arr["channel"]])
        if bad.size:
            k = int(bad[0])
            raise QttFormatError("unmapped_channel", offset + k * RECORD_SIZE + 8,
                                 f"channel {int(arr['channel'][k])}", index + k)
        bad = np.flatnonzero((arr["flags"] & RESERVED_FLAG_BITS) | arr["reserved"])
        if bad.size:
            k = int(bad[0])
            raise QttFormatError("reserved_nonzero", offset + k * RECORD_SIZE + 9, "", index + k)

    def records(self) -> Iterator[TimeTagRecord]:
        for arr in self.chunks():
            for t, ch, fl in zip(arr["timestamp_ps"].tolist(), arr["channel"].tolist(),
                                 arr["flags"].tolist()):
                yield TimeTagRecord(t, ch, fl)


def read_stream(source: BinaryIO) -> tuple[StreamHeader, Iterator[TimeTagRecord]]:
    """Parse the header eagerly and return a lazy record iterator."""
    reader = QttReader(source)
    return reader.header, reader.records()


def read_bytes(data: bytes) -> tuple[StreamHeader, list[TimeTagRecord]]:
    """Parse an in-memory stream completely; convenient for tests and fuzzing."""
    header, recs = read_stream(io.BytesIO(data))
    return header, list(recs)
