"""Little-endian framing shared by the checkpoint and grid files.

``magic(4) | u32 version | body | u32 crc32(everything before it)``
"""

from __future__ import annotations

import json
import struct
import zlib


class FormatError(ValueError):
    pass


class ChecksumError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


def seal(magic: bytes, version: int, body: bytes) -> bytes:
    payload = magic + struct.pack("<I", version) + body
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)


def unseal(data: bytes, magic: bytes, version: int) -> bytes:
    if len(data) < len(magic) + 8:
        raise TruncatedError("file too short")
    if data[: len(magic)] != magic:
        raise FormatError(f"bad magic {data[:len(magic)]!r}, expected {magic!r}")
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored:
        raise ChecksumError("CRC32 mismatch")
    (found,) = struct.unpack("<I", data[len(magic): len(magic) + 4])
    if found != version:
        raise VersionError(f"format version {found}, this build reads {version}")
    return data[len(magic) + 4: -4]


class Reader:
    def __init__(self, body: bytes):
        self.body = body
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.body):
            raise TruncatedError("unexpected end of data")
        out = self.body[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def json(self):
        (n,) = self.unpack("<I")
        return json.loads(self.take(n).decode("utf-8"))

    def done(self) -> None:
        if self.pos != len(self.body):
            raise FormatError(f"{len(self.body) - self.pos} trailing bytes")


def pack_json(obj) -> bytes:
    raw = json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return struct.pack("<I", len(raw)) + raw
