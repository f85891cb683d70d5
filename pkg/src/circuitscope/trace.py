"""Bit-exact persistence of activation and attention captures (DTRC format).

Layout, all little-endian::

    header   magic "DTRC" | version u16 | endian u8 (1 = little) | reserved u8
             | seed u64 | config digest 32 bytes | index offset u64 | count u32
    record   kind u8 | reserved u8 | head u16 | timestep u32 | batch_index u32
             | name_len u16 | rank u8 | reserved u8 | name utf-8 | dims u32 * rank
             | payload f32 * prod(dims) | crc32 u32 (over the record bytes before it)
    index    count u32 | offset u64 * count       (written after the last record)
"""

from __future__ import annotations

import struct
import zlib
from collections.abc import Collection
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

MAGIC = b"DTRC"
VERSION = 1
NO_HEAD = 0xFFFF
KINDS = ("activation", "attention", "image", "scalar")

_HEADER = struct.Struct("<4sHBBQ32sQI")
_RECORD = struct.Struct("<BBHIIHBB")
HEADER_SIZE = _HEADER.size
RECORD_OVERHEAD = _RECORD.size + 4  # fixed fields + trailing crc32


class TraceFormatError(ValueError):
    """Base class for unreadable trace files."""


class BadMagicError(TraceFormatError):
    pass


class UnsupportedVersionError(TraceFormatError):
    def __init__(self, found: int, supported: int = VERSION):
        self.found = found
        self.supported = supported
        super().__init__(f"trace version {found} is not supported (this reader handles version {supported})")


class TruncatedTraceError(TraceFormatError):
    pass


class IndexMismatchError(TraceFormatError):
    pass


class ChecksumError(TraceFormatError):
    pass


@dataclass(eq=False)
class TraceRecord:
    name: str
    kind: str
    timestep: int
    payload: np.ndarray
    head: int = NO_HEAD
    batch_index: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown record kind {self.kind!r}")
        self.payload = np.ascontiguousarray(self.payload, dtype=np.float32)
        if self.payload.ndim == 0:
            self.payload = self.payload.reshape(1)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.payload.shape

    def __eq__(self, other) -> bool:
        if not isinstance(other, TraceRecord):
            return NotImplemented
        return (
            self.name == other.name
            and self.kind == other.kind
            and self.timestep == other.timestep
            and self.head == other.head
            and self.batch_index == other.batch_index
            and self.payload.shape == other.payload.shape
            and self.payload.tobytes() == other.payload.tobytes()
        )

    def to_bytes(self) -> bytes:
        name = self.name.encode("utf-8")
        fixed = _RECORD.pack(
            KINDS.index(self.kind), 0, self.head, self.timestep, self.batch_index, len(name), self.payload.ndim, 0
        )
        dims = struct.pack(f"<{self.payload.ndim}I", *self.payload.shape)
        body = fixed + name + dims + self.payload.astype("<f4", copy=False).tobytes()
        return body + struct.pack("<I", zlib.crc32(body))


@dataclass
class TraceFile:
    records: list[TraceRecord] = field(default_factory=list)
    seed: int = 0
    config_digest: bytes = b"\x00" * 32
    version: int = VERSION

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[TraceRecord]:
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    def query(self, **filters) -> list[TraceRecord]:
        return query(self.records, **filters)


def encode_trace(records: Sequence[TraceRecord], seed: int = 0, config_digest: bytes = b"") -> bytes:
    digest = bytes(config_digest)[:32].ljust(32, b"\x00")
    body = bytearray()
    offsets = []
    for rec in records:
        offsets.append(HEADER_SIZE + len(body))
        body += rec.to_bytes()
    index_offset = HEADER_SIZE + len(body)
    index = struct.pack(f"<I{len(offsets)}Q", len(offsets), *offsets)
    header = _HEADER.pack(MAGIC, VERSION, 1, 0, int(seed), digest, index_offset, len(offsets))
    return header + bytes(body) + index


def write_trace(records: Sequence[TraceRecord], path: str | Path, seed: int = 0, config_digest: bytes = b"") -> int:
    """Write ``records`` to ``path``; returns the number of bytes written."""
    blob = encode_trace(records, seed, config_digest)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(blob)
    return len(blob)


def _parse_record(buf: bytes, offset: int) -> tuple[TraceRecord, int]:
    end_fixed = offset + _RECORD.size
    if end_fixed > len(buf):
        raise TruncatedTraceError(f"record at {offset} cut short in its fixed fields")
    kind, _, head, timestep, batch_index, name_len, rank, _ = _RECORD.unpack_from(buf, offset)
    pos = end_fixed
    if pos + name_len + 4 * rank > len(buf):
        raise TruncatedTraceError(f"record at {offset} cut short in its name/dims")
    name = buf[pos : pos + name_len].decode("utf-8")
    pos += name_len
    dims = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    n = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if pos + 4 * n + 4 > len(buf):
        raise TruncatedTraceError(f"record at {offset} cut short in its payload")
    payload = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).astype(np.float32).reshape(dims)
    pos += 4 * n
    (crc,) = struct.unpack_from("<I", buf, pos)
    if zlib.crc32(buf[offset:pos]) != crc:
        raise ChecksumError(f"record at {offset} ({name!r}) failed its CRC32 check")
    if kind >= len(KINDS):
        raise TraceFormatError(f"record at {offset} has unknown kind code {kind}")
    rec = TraceRecord(name, KINDS[kind], timestep, payload, head=head, batch_index=batch_index)
    return rec, pos + 4


def decode_trace(buf: bytes) -> TraceFile:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"expected magic {MAGIC!r}, found {bytes(buf[:4])!r}")
    if len(buf) < HEADER_SIZE:
        raise TruncatedTraceError("file shorter than the trace header")
    magic, version, endian, _, seed, digest, index_offset, count = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise UnsupportedVersionError(version)
    if endian != 1:
        raise TraceFormatError(f"unsupported endianness flag {endian}")
    if index_offset + 4 > len(buf):
        raise TruncatedTraceError(f"index offset {index_offset} lies beyond end of file ({len(buf)} bytes)")
    (index_count,) = struct.unpack_from("<I", buf, index_offset)
    if index_count != count:
        raise IndexMismatchError(f"header announces {count} records, index holds {index_count}")
    if index_offset + 4 + 8 * count > len(buf):
        raise TruncatedTraceError("index cut short")
    offsets = struct.unpack_from(f"<{count}Q", buf, index_offset + 4)
    if index_offset + 4 + 8 * count != len(buf):
        raise IndexMismatchError("trailing bytes after the index")

    records = []
    pos = HEADER_SIZE
    for off in offsets:
        if off != pos:
            raise IndexMismatchError(f"index offset {off} does not land on a record boundary (expected {pos})")
        rec, pos = _parse_record(buf[:index_offset], off)
        records.append(rec)
    if pos != index_offset:
        raise IndexMismatchError(f"records end at {pos} but index starts at {index_offset}")
    return TraceFile(records, seed=seed, config_digest=digest, version=version)


def read_trace(path: str | Path) -> TraceFile:
    return decode_trace(Path(path).read_bytes())


def _match(value, wanted) -> bool:
    if wanted is None:
        return True
    if isinstance(wanted, Collection) and not isinstance(wanted, str):
        return value in wanted
    return value == wanted


def query(
    records: Iterable[TraceRecord],
    name=None,
    kind=None,
    timestep=None,
    head=None,
) -> list[TraceRecord]:
    """Records matching every given filter, in file order.

    Each filter is a single value or a collection of accepted values.
    """
    return [
        r
        for r in records
        if _match(r.name, name) and _match(r.kind, kind) and _match(r.timestep, timestep) and _match(r.head, head)
    ]
