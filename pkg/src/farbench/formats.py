"""Little-endian binary blob framing shared by the model and map formats.

Every artifact is magic + version + body + CRC32-of-everything-preceding.
Loaders raise BlobError with a short machine-readable reason code so that
callers can fall back to baseline behaviour and report why.
"""

from __future__ import annotations

import struct
import zlib

FORMAT_VERSION = 1

MAGIC_MODEL = b"FMDL"
MAGIC_MAP = b"FMAP"
MAGIC_SHADOW = b"FSHD"


class BlobError(ValueError):
    """Validation failure; ``reason`` is a short stable code like 'crc'."""

    def __init__(self, reason: str, detail: str = ""):
        self.reason = reason
        super().__init__(f"{reason}: {detail}" if detail else reason)


def seal(body: bytes) -> bytes:
    """Append the CRC32 trailer."""
    return body + struct.pack("<I", zlib.crc32(body))


def unseal(blob: bytes, magic: bytes) -> bytes:
    """Verify magic, version and CRC; return the body after the version byte."""
    if len(blob) < len(magic) + 1 + 4:
        raise BlobError("truncated", f"{len(blob)} bytes")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise BlobError("crc", "checksum mismatch")
    if not body.startswith(magic):
        raise BlobError("magic", f"expected {magic!r}")
    version = body[len(magic)]
    if version != FORMAT_VERSION:
        raise BlobError("version", f"unsupported version {version}")
    return body[len(magic) + 1:]
