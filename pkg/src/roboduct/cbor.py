"""Minimal CBOR codec for the bridge wire format.

Covers exactly the self-describing value model the protocol carries:
null/bool/int/float64/str/bytes/list/str-keyed map, all definite-length.
The decoder is total: any byte string either decodes or raises CborError
with the offending offset. Indefinite-length items, tags and non-string
map keys are rejected rather than guessed at.
"""

from __future__ import annotations

import math
import struct

MAX_DEPTH = 64

MT_UINT = 0
MT_NINT = 1
MT_BYTES = 2
MT_TEXT = 3
MT_ARRAY = 4
MT_MAP = 5
MT_TAG = 6
MT_SIMPLE = 7


class CborError(ValueError):
    """Malformed or unsupported CBOR; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def _encode_head(major: int, arg: int, out: bytearray) -> None:
    if arg < 24:
        out.append((major << 5) | arg)
    elif arg < 0x100:
        out.append((major << 5) | 24)
        out.append(arg)
    elif arg < 0x10000:
        out.append((major << 5) | 25)
        out += arg.to_bytes(2, "big")
    elif arg < 0x100000000:
        out.append((major << 5) | 26)
        out += arg.to_bytes(4, "big")
    else:
        out.append((major << 5) | 27)
        out += arg.to_bytes(8, "big")


def _encode_item(value, out: bytearray, depth: int) -> None:
    if depth > MAX_DEPTH:
        raise ValueError(f"value nesting exceeds {MAX_DEPTH} levels")
    if value is None:
        out.append(0xF6)
    elif value is True:
        out.append(0xF5)
    elif value is False:
        out.append(0xF4)
    elif isinstance(value, int):
        if value >= 0:
            if value >= 1 << 64:
                raise ValueError("integer too large for CBOR")
            _encode_head(MT_UINT, value, out)
        else:
            if -value - 1 >= 1 << 64:
                raise ValueError("integer too large for CBOR")
            _encode_head(MT_NINT, -value - 1, out)
    elif isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            raise ValueError("non-finite float not encodable")
        out.append(0xFB)
        out += struct.pack(">d", value)
    elif isinstance(value, str):
        raw = value.encode("utf-8")
        _encode_head(MT_TEXT, len(raw), out)
        out += raw
    elif isinstance(value, (bytes, bytearray)):
        _encode_head(MT_BYTES, len(value), out)
        out += value
    elif isinstance(value, (list, tuple)):
        _encode_head(MT_ARRAY, len(value), out)
        for item in value:
            _encode_item(item, out, depth + 1)
    elif isinstance(value, dict):
        _encode_head(MT_MAP, len(value), out)
        # Canonical order: shorter encoded key first, then bytewise.
        keyed = []
        for k, v in value.items():
            if not isinstance(k, str):
                raise ValueError("map keys must be strings")
            kb = bytearray()
            _encode_item(k, kb, depth + 1)
            keyed.append((len(kb), bytes(kb), v))
        keyed.sort(key=lambda t: (t[0], t[1]))
        for _, kb, v in keyed:
            out += kb
            _encode_item(v, out, depth + 1)
    else:
        raise ValueError(f"unencodable type {type(value).__name__}")


def dumps(value) -> bytes:
    """Encode a value tree to canonical definite-length CBOR."""
    out = bytearray()
    _encode_item(value, out, 0)
    return bytes(out)


class _Decoder:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def fail(self, msg: str):
        raise CborError(msg, self.pos)

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            self.fail("truncated input")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def head(self) -> tuple[int, int]:
        start = self.pos
        b = self.take(1)[0]
        major, info = b >> 5, b & 0x1F
        if info < 24:
            return major, info
        if info == 24:
            return major, self.take(1)[0]
        if info == 25:
            return major, int.from_bytes(self.take(2), "big")
        if info == 26:
            return major, int.from_bytes(self.take(4), "big")
        if info == 27:
            return major, int.from_bytes(self.take(8), "big")
        raise CborError("indefinite-length items not supported", start)

    def item(self, depth: int):
        if depth > MAX_DEPTH:
            self.fail(f"nesting exceeds {MAX_DEPTH} levels")
        start = self.pos
        if self.pos >= len(self.data):
            self.fail("truncated input")
        first = self.data[self.pos]
        major = first >> 5
        info = first & 0x1F

        if major == MT_SIMPLE:
            self.pos += 1
            if info == 20:
                return False
            if info == 21:
                return True
            if info == 22:
                return None
            if info == 25:
                return _decode_half(int.from_bytes(self.take(2), "big"))
            if info == 26:
                return struct.unpack(">f", self.take(4))[0]
            if info == 27:
                return struct.unpack(">d", self.take(8))[0]
            raise CborError(f"unsupported simple value {info}", start)

        major, arg = self.head()
        if major == MT_UINT:
            return arg
        if major == MT_NINT:
            return -1 - arg
        if major == MT_BYTES:
            return bytes(self.take(arg))
        if major == MT_TEXT:
            raw = self.take(arg)
            try:
                return raw.decode("utf-8")
            except UnicodeDecodeError:
                raise CborError("invalid utf-8 in text string", start) from None
        if major == MT_ARRAY:
            if arg > len(self.data) - self.pos:
                raise CborError("array length exceeds remaining input", start)
            return [self.item(depth + 1) for _ in range(arg)]
        if major == MT_MAP:
            if arg > (len(self.data) - self.pos) // 2 + 1:
                raise CborError("map length exceeds remaining input", start)
            result: dict[str, object] = {}
            for _ in range(arg):
                key = self.item(depth + 1)
                if not isinstance(key, str):
                    raise CborError("map key is not a text string", start)
                if key in result:
                    raise CborError(f"duplicate map key {key!r}", start)
                result[key] = self.item(depth + 1)
            return result
        raise CborError("tagged items not supported", start)


def _decode_half(h: int) -> float:
    # IEEE 754 binary16, per RFC 8949 appendix D.
    exp = (h >> 10) & 0x1F
    mant = h & 0x3FF
    if exp == 0:
        val = mant * 2.0**-24
    elif exp != 31:
        val = (mant + 1024) * 2.0 ** (exp - 25)
    else:
        val = math.inf if mant == 0 else math.nan
    return -val if h & 0x8000 else val


def loads(data: bytes):
    """Decode one CBOR item; trailing bytes are an error."""
    dec = _Decoder(data)
    value = dec.item(0)
    if dec.pos != len(data):
        raise CborError("trailing bytes after value", dec.pos)
    return value
