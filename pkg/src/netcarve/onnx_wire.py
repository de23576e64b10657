"""Minimal protobuf wire codec for the ONNX subset this package reads and writes.

Only the handful of ONNX messages the IR needs are understood (ModelProto,
GraphProto, NodeProto, AttributeProto, TensorProto, ValueInfoProto and the
type/shape messages). Field numbers follow the public ONNX schema. Encoding
is fully deterministic: fields are emitted in fixed order.
"""

from __future__ import annotations

import struct

# onnx.TensorProto data types used by this subset
DT_FLOAT = 1
DT_INT64 = 7

# onnx.AttributeProto.AttributeType
AT_FLOAT = 1
AT_INT = 2
AT_STRING = 3
AT_TENSOR = 4
AT_FLOATS = 6
AT_INTS = 7


class WireError(Exception):
    pass


def write_varint(value: int) -> bytes:
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


def _tag(field: int, wire: int) -> bytes:
    return write_varint(field << 3 | wire)


def field_varint(field: int, value: int) -> bytes:
    return _tag(field, 0) + write_varint(value)


def field_bytes(field: int, data: bytes) -> bytes:
    return _tag(field, 2) + write_varint(len(data)) + data


def field_string(field: int, text: str) -> bytes:
    return field_bytes(field, text.encode("utf-8"))


def field_float(field: int, value: float) -> bytes:
    return _tag(field, 5) + struct.pack("<f", value)


def read_varint(buf: bytes, pos: int) -> tuple[int, int]:
    result = 0
    shift = 0
    while True:
        if pos >= len(buf):
            raise WireError("truncated varint")
        byte = buf[pos]
        pos += 1
        result |= (byte & 0x7F) << shift
        if not byte & 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise WireError("varint too long")


def as_signed64(value: int) -> int:
    return value - (1 << 64) if value >= 1 << 63 else value


def parse_fields(buf: bytes) -> list[tuple[int, int, object]]:
    """Flat (field, wire_type, value) triples; length-delimited values stay bytes."""
    pos = 0
    fields = []
    while pos < len(buf):
        tag, pos = read_varint(buf, pos)
        field, wire = tag >> 3, tag & 7
        if wire == 0:
            value, pos = read_varint(buf, pos)
        elif wire == 1:
            value, pos = buf[pos:pos + 8], pos + 8
        elif wire == 5:
            value, pos = buf[pos:pos + 4], pos + 4
        elif wire == 2:
            length, pos = read_varint(buf, pos)
            if pos + length > len(buf):
                raise WireError("truncated length-delimited field")
            value, pos = buf[pos:pos + length], pos + length
        else:
            raise WireError(f"unsupported wire type {wire}")
        fields.append((field, wire, value))
    return fields


class FieldView:
    """Convenience accessors over parsed fields of one message."""

    def __init__(self, buf: bytes):
        self.fields = parse_fields(buf)

    def first(self, field: int, default=None):
        for f, _, v in self.fields:
            if f == field:
                return v
        return default

    def all(self, field: int) -> list:
        return [v for f, _, v in self.fields if f == field]

    def varint(self, field: int, default: int | None = None) -> int | None:
        v = self.first(field)
        if v is None:
            return default
        if not isinstance(v, int):
            raise WireError(f"field {field} is not a varint")
        return as_signed64(v)

    def string(self, field: int, default: str = "") -> str:
        v = self.first(field)
        return default if v is None else v.decode("utf-8")

    def float32(self, field: int, default: float | None = None) -> float | None:
        v = self.first(field)
        if v is None:
            return default
        return struct.unpack("<f", v)[0]

    def int_list(self, field: int) -> list[int]:
        """Repeated int64, accepting both packed and unpacked encodings."""
        out = []
        for f, wire, v in self.fields:
            if f != field:
                continue
            if wire == 0:
                out.append(as_signed64(v))
            elif wire == 2:
                pos = 0
                while pos < len(v):
                    item, pos = read_varint(v, pos)
                    out.append(as_signed64(item))
            else:
                raise WireError(f"field {field}: unexpected wire type {wire} for ints")
        return out

    def float_list(self, field: int) -> list[float]:
        out = []
        for f, wire, v in self.fields:
            if f != field:
                continue
            if wire == 5:
                out.append(struct.unpack("<f", v)[0])
            elif wire == 2:
                out.extend(struct.unpack(f"<{len(v) // 4}f", v))
            else:
                raise WireError(f"field {field}: unexpected wire type {wire} for floats")
        return out
