"""Minimal protobuf wire-format codec.

Only what reading (and, for tests, writing) ONNX model files requires:
varints, length-delimited fields, and packed repeated scalars.  No schema
compiler -- callers address fields by number.
"""

from __future__ import annotations

import struct
from typing import Iterator, Union

VARINT = 0
FIXED64 = 1
LENGTH = 2
FIXED32 = 5


class WireError(ValueError):
    """Malformed protobuf bytes."""


# ---------------------------------------------------------------------------
# Decoding


def read_varint(data: bytes, pos: int) -> tuple[int, int]:
    result = shift = 0
    while True:
        if pos >= len(data):
            raise WireError("truncated varint")
        byte = data[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 63:
            raise WireError("varint exceeds 64 bits")


def iter_fields(data: bytes) -> Iterator[tuple[int, int, Union[int, bytes]]]:
    """Yield (field_number, wire_type, value) triples from a message body.

    LENGTH fields yield their raw bytes; scalar wire types yield ints.
    """
    pos = 0
    while pos < len(data):
        key, pos = read_varint(data, pos)
        field, wtype = key >> 3, key & 7
        if field == 0:
            raise WireError("field number 0")
        if wtype == VARINT:
            value, pos = read_varint(data, pos)
        elif wtype == LENGTH:
            size, pos = read_varint(data, pos)
            if pos + size > len(data):
                raise WireError("truncated length-delimited field")
            value = data[pos:pos + size]
            pos += size
        elif wtype == FIXED64:
            if pos + 8 > len(data):
                raise WireError("truncated fixed64")
            value = int.from_bytes(data[pos:pos + 8], "little")
            pos += 8
        elif wtype == FIXED32:
            if pos + 4 > len(data):
                raise WireError("truncated fixed32")
            value = int.from_bytes(data[pos:pos + 4], "little")
            pos += 4
        else:
            raise WireError(f"unsupported wire type {wtype}")
        yield field, wtype, value


def fields_by_number(data: bytes) -> dict[int, list[Union[int, bytes]]]:
    table: dict[int, list] = {}
    for field, _, value in iter_fields(data):
        table.setdefault(field, []).append(value)
    return table


def zigzag_to_signed(value: int) -> int:
    return (value >> 1) ^ -(value & 1)


def varint_to_signed64(value: int) -> int:
    """Plain (non-zigzag) int64 fields store negatives as 10-byte varints."""
    return value - (1 << 64) if value >= 1 << 63 else value


def read_packed_int64(data: bytes) -> list[int]:
    out, pos = [], 0
    while pos < len(data):
        value, pos = read_varint(data, pos)
        out.append(varint_to_signed64(value))
    return out


# ---------------------------------------------------------------------------
# Encoding (used by tests to build fixture models)


def encode_varint(value: int) -> bytes:
    if value < 0:
        value += 1 << 64
    out = bytearray()
    while True:
        byte = value & 0x7F
        value >>= 7
        if value:
            out.append(byte | 0x80)
        else:
            out.append(byte)
            return bytes(out)


def tag(field: int, wtype: int) -> bytes:
    return encode_varint((field << 3) | wtype)


def field_varint(field: int, value: int) -> bytes:
    return tag(field, VARINT) + encode_varint(value)


def field_bytes(field: int, value: bytes) -> bytes:
    return tag(field, LENGTH) + encode_varint(len(value)) + value


def field_string(field: int, value: str) -> bytes:
    return field_bytes(field, value.encode("utf-8"))


def field_packed_int64(field: int, values: list[int]) -> bytes:
    return field_bytes(field, b"".join(encode_varint(v) for v in values))


def field_float(field: int, value: float) -> bytes:
    return tag(field, FIXED32) + struct.pack("<f", value)
