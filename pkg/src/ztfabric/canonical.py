"""Canonical byte encoding shared by every signed or hashed structure.

Each field is written in declared order. Byte strings and text are written
as a 4-byte big-endian length followed by the raw bytes (text is UTF-8).
Integers are written as 8 raw big-endian bytes with no length prefix.
``None`` is written as a zero-length byte string.
"""

from __future__ import annotations

import hashlib
from typing import Union

Field = Union[bytes, str, int, None]

HASH_SIZE = 32


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def encode_field(value: Field) -> bytes:
    if value is None:
        return b"\x00\x00\x00\x00"
    if isinstance(value, bool):
        raise TypeError("booleans have no canonical encoding")
    if isinstance(value, int):
        if not 0 <= value < 1 << 64:
            raise ValueError(f"integer out of u64 range: {value}")
        return value.to_bytes(8, "big")
    if isinstance(value, str):
        value = value.encode("utf-8")
    if isinstance(value, (bytes, bytearray)):
        if len(value) >= 1 << 32:
            raise ValueError("field too long")
        return len(value).to_bytes(4, "big") + bytes(value)
    raise TypeError(f"cannot canonically encode {type(value).__name__}")


def canonical(*fields: Field) -> bytes:
    return b"".join(encode_field(f) for f in fields)


def be32(n: int) -> bytes:
    return n.to_bytes(4, "big")
