"""Low-level byte encodings: LEB128 varints, zigzag, names and answers."""

from __future__ import annotations

import ipaddress
import struct

from .errors import MalformedDelta, TruncatedData
from .names import DomainName, QType, RecordAnswer, RecordKey

ANSWER_TAGS = {QType.A: 1, QType.AAAA: 2, QType.CNAME: 3}

# single/two byte varints are by far the common case on the update path
_SMALL = [bytes([v]) if v < 0x80 else bytes([(v & 0x7F) | 0x80, v >> 7]) for v in range(1 << 14)]


def encode_varint(value: int) -> bytes:
    if value < 0:
        raise ValueError("varint must be non-negative")
    if value < 16384:
        return _SMALL[value]
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def zigzag(value: int) -> int:
    return value << 1 if value >= 0 else ((-value) << 1) - 1


def unzigzag(value: int) -> int:
    return (value >> 1) if not value & 1 else -((value + 1) >> 1)


def encode_name(name: DomainName) -> bytes:
    """Root-first labels, each length-prefixed, closed by a zero byte."""
    out = bytearray()
    for lbl in name.labels:
        out.append(len(lbl))
        out += lbl.encode("ascii")
    out.append(0)
    return bytes(out)


def encode_answer(answer: RecordAnswer) -> bytes:
    if isinstance(answer, ipaddress.IPv4Address):
        return b"\x01" + answer.packed
    if isinstance(answer, ipaddress.IPv6Address):
        return b"\x02" + answer.packed
    if isinstance(answer, DomainName):
        return b"\x03" + encode_name(answer)
    raise TypeError(f"not a record answer: {answer!r}")


def encode_key(key: RecordKey) -> bytes:
    return encode_name(key.name) + bytes([key.qtype])


class Reader:
    """Cursor over a bytes buffer. Raises ``error`` on malformed input."""

    __slots__ = ("buf", "pos", "error")

    def __init__(self, buf: bytes, pos: int = 0, error: type[Exception] = TruncatedData):
        self.buf = buf
        self.pos = pos
        self.error = error

    def at_end(self) -> bool:
        return self.pos >= len(self.buf)

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise self.error(f"need {n} bytes at offset {self.pos}, buffer has {len(self.buf)}")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u8(self) -> int:
        if self.pos >= len(self.buf):
            raise self.error(f"truncated at offset {self.pos}")
        b = self.buf[self.pos]
        self.pos += 1
        return b

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def varint(self) -> int:
        buf = self.buf
        pos = self.pos
        result = 0
        shift = 0
        while True:
            if pos >= len(buf):
                raise self.error(f"truncated varint at offset {self.pos}")
            b = buf[pos]
            pos += 1
            result |= (b & 0x7F) << shift
            if not b & 0x80:
                self.pos = pos
                return result
            shift += 7
            if shift > 63:
                raise self.error("varint too long")

    def name(self) -> DomainName:
        labels = []
        while True:
            n = self.u8()
            if n == 0:
                break
            labels.append(self.take(n).decode("ascii"))
        try:
            return DomainName(tuple(labels))
        except (ValueError, UnicodeDecodeError) as exc:
            raise self.error(f"bad name: {exc}") from None

    def answer(self) -> RecordAnswer:
        tag = self.u8()
        if tag == 1:
            return ipaddress.IPv4Address(self.take(4))
        if tag == 2:
            return ipaddress.IPv6Address(self.take(16))
        if tag == 3:
            return self.name()
        raise self.error(f"unknown answer tag {tag}")

    def key(self) -> RecordKey:
        name = self.name()
        try:
            qtype = QType(self.u8())
        except ValueError as exc:
            raise self.error(str(exc)) from None
        return RecordKey(name, qtype)


def delta_reader(buf: bytes) -> Reader:
    return Reader(buf, error=MalformedDelta)
