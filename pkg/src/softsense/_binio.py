"""Shared low-level framing for the binary dataset and model file formats.

Both formats are little-endian, start with a 4-byte magic, and end with a
CRC32 of every preceding byte.  Corruption surfaces as a distinct error per
failure mode so callers can tell truncation from bit rot.
"""

from __future__ import annotations

import struct
import zlib


class FileFormatError(ValueError):
    """Base class for malformed softsense binary files."""


class BadMagic(FileFormatError):
    pass


class BadVersion(FileFormatError):
    pass


class TruncatedFile(FileFormatError):
    pass


class ChecksumMismatch(FileFormatError):
    pass


class Reader:
    """Cursor over an in-memory payload with truncation checking."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFile(
                f"needed {n} bytes at offset {self.pos}, file has {len(self.blob)}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def check_magic_version(r: Reader, magic: bytes, version: int) -> None:
    got = r.take(4)
    if got != magic:
        raise BadMagic(f"expected magic {magic!r}, got {got!r}")
    got_version = r.u32()
    if got_version != version:
        raise BadVersion(f"unsupported format version {got_version}, expected {version}")


def verify_trailing_crc(blob: bytes) -> bytes:
    """Split off and verify the trailing CRC32; returns the payload bytes."""
    if len(blob) < 4:
        raise TruncatedFile("file too short for checksum")
    payload, tail = blob[:-4], blob[-4:]
    expect = struct.unpack("<I", tail)[0]
    actual = zlib.crc32(payload) & 0xFFFFFFFF
    if actual != expect:
        raise ChecksumMismatch(f"crc32 {actual:#010x} != stored {expect:#010x}")
    return payload


def append_crc(payload: bytes) -> bytes:
    return payload + struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
