"""Shared pieces of the DPFM/DPAT container formats (little-endian throughout)."""

from __future__ import annotations

import json
import struct


class FormatError(ValueError):
    """A model or pattern file could not be decoded."""


class BadMagicError(FormatError):
    def __init__(self, expected: bytes, got: bytes):
        super().__init__(f"bad magic: expected {expected!r}, got {got!r}")


class UnsupportedVersionError(FormatError):
    def __init__(self, version: int):
        super().__init__(f"unsupported version {version}")


class TruncatedError(FormatError):
    def __init__(self, what: str):
        super().__init__(f"truncated file while reading {what}")


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


class Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(what)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def header(self, magic: bytes, version: int) -> None:
        got = self.take(len(magic), "magic")
        if got != magic:
            raise BadMagicError(magic, got)
        v = self.u32("version")
        if v != version:
            raise UnsupportedVersionError(v)

    def json_blob(self, what: str):
        n = self.u32(f"{what} length")
        raw = self.take(n, what)
        try:
            return json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"corrupt {what}: {exc}") from None

    @property
    def exhausted(self) -> bool:
        return self.pos == len(self.buf)


def pack_header(magic: bytes, version: int) -> bytes:
    return magic + struct.pack("<I", version)


def pack_json(obj) -> bytes:
    blob = canonical_json(obj)
    return struct.pack("<I", len(blob)) + blob
