"""Bridge wire protocol: frame model plus lossless JSON and CBOR encodings.

One frame per websocket message. JSON frames are single UTF-8 objects with
bytes payloads base64-tagged; CBOR frames are single definite-length maps
with native byte strings. Both encodings round-trip every valid frame and
the decoders reject malformed input with structured errors instead of
corrupting or crashing.
"""

from __future__ import annotations

import base64
import json
import math
from dataclasses import dataclass, field, fields
from typing import Optional

from . import cbor

PROTOCOL_VERSION = 1
MAX_VALUE_DEPTH = 32
JSON_SAFE_INT = 1 << 53
INT64_MIN = -(1 << 63)
INT64_MAX = (1 << 63) - 1

ENCODING_JSON = "json"
ENCODING_CBOR = "cbor"
ENCODINGS = (ENCODING_JSON, ENCODING_CBOR)

OP_ADVERTISE = "advertise"
OP_UNADVERTISE = "unadvertise"
OP_PUBLISH = "publish"
OP_SUBSCRIBE = "subscribe"
OP_UNSUBSCRIBE = "unsubscribe"
OP_CALL_SERVICE = "call_service"
OP_SERVICE_RESPONSE = "service_response"
OP_ADVERTISE_SERVICE = "advertise_service"
OP_UNADVERTISE_SERVICE = "unadvertise_service"
OP_STATUS = "status"
OP_HELLO = "hello"

OPS = frozenset({
    OP_ADVERTISE, OP_UNADVERTISE, OP_PUBLISH, OP_SUBSCRIBE, OP_UNSUBSCRIBE,
    OP_CALL_SERVICE, OP_SERVICE_RESPONSE, OP_ADVERTISE_SERVICE,
    OP_UNADVERTISE_SERVICE, OP_STATUS, OP_HELLO,
})

# op -> fields that must be present
_REQUIRED = {
    OP_ADVERTISE: ("topic", "type_name"),
    OP_UNADVERTISE: ("topic",),
    OP_PUBLISH: ("topic", "msg"),
    OP_SUBSCRIBE: ("topic",),
    OP_UNSUBSCRIBE: ("topic",),
    OP_CALL_SERVICE: ("service", "id"),
    OP_SERVICE_RESPONSE: ("id", "result"),
    OP_ADVERTISE_SERVICE: ("service", "type_name"),
    OP_UNADVERTISE_SERVICE: ("service",),
    OP_STATUS: ("level", "text"),
    OP_HELLO: (),
}

STATUS_LEVELS = ("info", "warning", "error")


class CodecError(Exception):
    pass


class InvalidFrame(CodecError):
    pass


class MalformedBytes(CodecError):
    def __init__(self, message: str, offset: Optional[int] = None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


class UnknownOp(CodecError):
    pass


class SchemaViolation(CodecError):
    pass


class VersionMismatch(CodecError):
    pass


@dataclass
class WireFrame:
    op: str
    id: Optional[str] = None
    topic: Optional[str] = None
    service: Optional[str] = None
    type_name: Optional[str] = None
    msg: object = None
    seq: Optional[int] = None
    stamp_ns: Optional[int] = None
    throttle_rate_ms: Optional[int] = None
    queue_length: Optional[int] = None
    latched: Optional[bool] = None
    encoding_hint: Optional[str] = None
    result: Optional[bool] = None
    level: Optional[str] = None
    text: Optional[str] = None
    versions: Optional[list] = None
    encodings: Optional[list] = None
    token: Optional[str] = None


@dataclass(frozen=True)
class EncodedFrame:
    encoding: str
    data: bytes


@dataclass(frozen=True)
class SessionParams:
    encoding: str = ENCODING_JSON
    protocol_version: int = PROTOCOL_VERSION


_FIELD_NAMES = tuple(f.name for f in fields(WireFrame))

_STR_FIELDS = ("id", "topic", "service", "type_name", "encoding_hint", "level", "text", "token")
_UINT_FIELDS = ("throttle_rate_ms", "queue_length")
_INT_FIELDS = ("seq", "stamp_ns")


def validate_value(value, depth: int = 0, json_safe_ints: bool = False) -> None:
    """Check a payload tree against the self-describing value model."""
    if depth > MAX_VALUE_DEPTH:
        raise SchemaViolation(f"payload nesting exceeds {MAX_VALUE_DEPTH}")
    if value is None or isinstance(value, (bool, str, bytes)):
        return
    if isinstance(value, int):
        if not (INT64_MIN <= value <= INT64_MAX):
            raise SchemaViolation(f"integer {value} outside int64 range")
        if json_safe_ints and abs(value) > JSON_SAFE_INT:
            raise SchemaViolation(f"integer {value} not exactly representable in JSON")
        return
    if isinstance(value, float):
        if math.isnan(value) or math.isinf(value):
            raise SchemaViolation("non-finite float in payload")
        return
    if isinstance(value, list):
        for item in value:
            validate_value(item, depth + 1, json_safe_ints)
        return
    if isinstance(value, dict):
        for k, v in value.items():
            if not isinstance(k, str):
                raise SchemaViolation(f"map key {k!r} is not a string")
            validate_value(v, depth + 1, json_safe_ints)
        return
    raise SchemaViolation(f"unsupported payload type {type(value).__name__}")


def validate_frame(frame: WireFrame, json_safe_ints: bool = False) -> None:
    if frame.op not in OPS:
        raise UnknownOp(f"unknown op {frame.op!r}")
    for name in _REQUIRED[frame.op]:
        if getattr(frame, name) is None:
            raise InvalidFrame(f"op {frame.op!r} requires field {name!r}")
    for name in _STR_FIELDS:
        v = getattr(frame, name)
        if v is not None and not isinstance(v, str):
            raise InvalidFrame(f"field {name!r} must be a string")
    for name in _UINT_FIELDS:
        v = getattr(frame, name)
        if v is not None and (not isinstance(v, int) or isinstance(v, bool) or v < 0):
            raise InvalidFrame(f"field {name!r} must be a non-negative integer")
    for name in _INT_FIELDS:
        v = getattr(frame, name)
        if v is not None and (not isinstance(v, int) or isinstance(v, bool)):
            raise InvalidFrame(f"field {name!r} must be an integer")
    if frame.latched is not None and not isinstance(frame.latched, bool):
        raise InvalidFrame("field 'latched' must be a bool")
    if frame.result is not None and not isinstance(frame.result, bool):
        raise InvalidFrame("field 'result' must be a bool")
    if frame.level is not None and frame.level not in STATUS_LEVELS:
        raise InvalidFrame(f"bad status level {frame.level!r}")
    if frame.encoding_hint is not None and frame.encoding_hint not in ENCODINGS:
        raise InvalidFrame(f"bad encoding_hint {frame.encoding_hint!r}")
    for name in ("versions", "encodings"):
        v = getattr(frame, name)
        if v is None:
            continue
        if not isinstance(v, list) or not v:
            raise InvalidFrame(f"field {name!r} must be a non-empty list")
        if name == "versions" and not all(isinstance(x, int) and not isinstance(x, bool) for x in v):
            raise InvalidFrame("versions must be integers")
        if name == "encodings" and not all(x in ENCODINGS for x in v):
            raise InvalidFrame(f"encodings must be drawn from {ENCODINGS}")
    # Top-level msg of None means "absent"; null payloads nest inside msg.
    if frame.msg is not None:
        validate_value(frame.msg, json_safe_ints=json_safe_ints)


# -- JSON value tagging ----------------------------------------------------
#
# bytes become {"$bytes": "<base64>"}; a genuine map whose keys collide with
# the tag markers is wrapped as {"$map": {...}} so every value tree stays
# losslessly representable.

_TAG_KEYS = {"$bytes", "$map"}


def _value_to_json(value):
    if isinstance(value, bytes):
        return {"$bytes": base64.b64encode(value).decode("ascii")}
    if isinstance(value, list):
        return [_value_to_json(v) for v in value]
    if isinstance(value, dict):
        converted = {k: _value_to_json(v) for k, v in value.items()}
        if _TAG_KEYS & value.keys():
            return {"$map": converted}
        return converted
    return value


def _value_from_json(value, path: str = "msg"):
    if isinstance(value, list):
        return [_value_from_json(v, f"{path}[{i}]") for i, v in enumerate(value)]
    if isinstance(value, dict):
        if set(value.keys()) == {"$bytes"}:
            raw = value["$bytes"]
            if not isinstance(raw, str):
                raise SchemaViolation(f"{path}: $bytes value must be a base64 string")
            try:
                return base64.b64decode(raw, validate=True)
            except Exception:
                raise SchemaViolation(f"{path}: invalid base64 in $bytes") from None
        if set(value.keys()) == {"$map"}:
            inner = value["$map"]
            if not isinstance(inner, dict):
                raise SchemaViolation(f"{path}: $map value must be an object")
            return {k: _value_from_json(v, f"{path}.{k}") for k, v in inner.items()}
        return {k: _value_from_json(v, f"{path}.{k}") for k, v in value.items()}
    return value


def _frame_to_dict(frame: WireFrame, encoding: str) -> dict:
    out = {}
    for name in _FIELD_NAMES:
        v = getattr(frame, name)
        if v is None:
            continue
        if name == "msg" and encoding == ENCODING_JSON:
            v = _value_to_json(v)
        out[name] = v
    return out


def _no_duplicates(pairs):
    d = {}
    for k, v in pairs:
        if k in d:
            raise SchemaViolation(f"duplicate key {k!r} in frame")
        d[k] = v
    return d


def encode(frame: WireFrame, encoding: str = ENCODING_JSON) -> EncodedFrame:
    """Deterministic (canonically ordered) encoding of a valid frame."""
    if encoding not in ENCODINGS:
        raise CodecError(f"unknown encoding {encoding!r}")
    validate_frame(frame, json_safe_ints=(encoding == ENCODING_JSON))
    payload = _frame_to_dict(frame, encoding)
    if encoding == ENCODING_JSON:
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"), allow_nan=False)
        return EncodedFrame(ENCODING_JSON, text.encode("utf-8"))
    try:
        return EncodedFrame(ENCODING_CBOR, cbor.dumps(payload))
    except ValueError as exc:
        raise SchemaViolation(str(exc)) from None


def decode(data: bytes, encoding: str = ENCODING_JSON) -> WireFrame:
    """Decode one frame or raise MalformedBytes/UnknownOp/SchemaViolation."""
    if encoding not in ENCODINGS:
        raise CodecError(f"unknown encoding {encoding!r}")
    if encoding == ENCODING_JSON:
        try:
            raw = json.loads(data.decode("utf-8"), object_pairs_hook=_no_duplicates,
                             parse_constant=_reject_constant)
        except SchemaViolation:
            raise
        except UnicodeDecodeError as exc:
            raise MalformedBytes("frame is not valid UTF-8", exc.start) from None
        except json.JSONDecodeError as exc:
            raise MalformedBytes(f"invalid JSON: {exc.msg}", exc.pos) from None
    else:
        try:
            raw = cbor.loads(data)
        except cbor.CborError as exc:
            raise MalformedBytes(str(exc), exc.offset) from None
    if not isinstance(raw, dict):
        raise SchemaViolation("frame is not a map")
    return _frame_from_dict(raw, encoding)


def _reject_constant(name: str):
    raise SchemaViolation(f"non-finite JSON constant {name}")


def _frame_from_dict(raw: dict, encoding: str) -> WireFrame:
    if "op" not in raw:
        raise SchemaViolation("frame missing 'op'")
    op = raw["op"]
    if not isinstance(op, str):
        raise SchemaViolation("'op' must be a string")
    if op not in OPS:
        raise UnknownOp(f"unknown op {op!r}")
    unknown = set(raw) - set(_FIELD_NAMES)
    if unknown:
        raise SchemaViolation(f"unknown frame fields {sorted(unknown)}")
    kwargs = dict(raw)
    if "msg" in kwargs and encoding == ENCODING_JSON:
        kwargs["msg"] = _value_from_json(kwargs["msg"])
    frame = WireFrame(**kwargs)
    try:
        validate_frame(frame)
    except InvalidFrame as exc:
        raise SchemaViolation(str(exc)) from None
    return frame


# -- session negotiation ---------------------------------------------------

def make_hello(versions=(PROTOCOL_VERSION,), encodings=ENCODINGS, token: Optional[str] = None) -> WireFrame:
    return WireFrame(op=OP_HELLO, versions=list(versions), encodings=list(encodings), token=token)


def negotiate(first_frame: WireFrame,
              server_versions=(PROTOCOL_VERSION,),
              server_encodings=ENCODINGS) -> SessionParams:
    """Agree session parameters from the first frame on a connection.

    A non-hello first frame is treated as a v1/json legacy peer. The
    client's encoding list is a preference order; the first one the server
    supports wins.
    """
    if first_frame.op != OP_HELLO:
        return SessionParams(ENCODING_JSON, PROTOCOL_VERSION)
    versions = first_frame.versions or [PROTOCOL_VERSION]
    common_versions = [v for v in versions if v in server_versions]
    if not common_versions:
        raise VersionMismatch(f"no common protocol version: client {versions}, "
                              f"server {list(server_versions)}")
    encodings = first_frame.encodings or [ENCODING_JSON]
    for enc in encodings:
        if enc in server_encodings:
            return SessionParams(enc, max(common_versions))
    raise VersionMismatch(f"no common encoding: client {encodings}, "
                          f"server {list(server_encodings)}")
