import math
import struct

import pytest

from roboduct import cbor


@pytest.mark.parametrize("value", [
    None, True, False, 0, 1, 23, 24, 255, 256, 65535, 65536, -1, -24, -25,
    (1 << 32), (1 << 63) - 1, -(1 << 63),
    0.0, 1.5, -2.25, 1e300,
    "", "hi", "ünïcodé",
    b"", b"\x00\xff", bytes(range(256)),
    [], [1, [2, [3]]],
    {}, {"a": 1, "b": [True, None]},
])
def test_roundtrip(value):
    assert cbor.loads(cbor.dumps(value)) == value


def test_types_preserved():
    out = cbor.loads(cbor.dumps({"i": 1, "f": 1.0, "s": "x", "b": b"x"}))
    assert isinstance(out["i"], int) and isinstance(out["f"], float)
    assert isinstance(out["s"], str) and isinstance(out["b"], bytes)


def test_canonical_map_ordering_is_deterministic():
    a = cbor.dumps({"bb": 1, "a": 2, "ccc": 3})
    b = cbor.dumps({"ccc": 3, "bb": 1, "a": 2})
    assert a == b
    # shorter keys encode first
    assert a.index(b"a") < a.index(b"bb") < a.index(b"ccc")


def test_known_encodings():
    assert cbor.dumps(0) == b"\x00"
    assert cbor.dumps(24) == b"\x18\x18"
    assert cbor.dumps(-1) == b"\x20"
    assert cbor.dumps(None) == b"\xf6"
    assert cbor.dumps(1.5) == b"\xfb" + struct.pack(">d", 1.5)
    assert cbor.dumps("a") == b"\x61a"


def test_nonfinite_rejected_at_encode():
    for bad in (math.nan, math.inf, -math.inf):
        with pytest.raises(ValueError):
            cbor.dumps(bad)


def test_half_and_single_floats_decode():
    # 0xf9 3c00 is 1.0 as binary16; 0xfa 3f800000 is 1.0 as binary32
    assert cbor.loads(bytes.fromhex("f93c00")) == 1.0
    assert cbor.loads(bytes.fromhex("fa3f800000")) == 1.0


def test_every_truncation_prefix_errors():
    data = cbor.dumps({"op": "publish", "msg": {"x": [1, 2.5, b"abc", "s", None]}})
    for n in range(len(data)):
        with pytest.raises(cbor.CborError) as exc_info:
            cbor.loads(data[:n])
        assert exc_info.value.offset <= n


@pytest.mark.parametrize("data", [
    b"\xff",              # break outside indefinite item
    b"\x9f\x01\xff",      # indefinite array
    b"\xbf\xff",          # indefinite map
    b"\xc0\x61a",         # tag
    b"\x1c",              # reserved additional info
    b"\xa1\x01\x02",      # integer map key
    b"\x61\xff",          # invalid utf-8 text
    b"\x00\x00",          # trailing bytes
    b"\xa2\x61a\x01\x61a\x02",  # duplicate keys
    b"\x82\x00",          # array shorter than declared
    b"\x9b\xff\xff\xff\xff\xff\xff\xff\xff",  # absurd array length
])
def test_malformed_inputs_raise_structured_errors(data):
    with pytest.raises(cbor.CborError):
        cbor.loads(data)


def test_depth_limit_enforced_both_ways():
    deep = []
    for _ in range(cbor.MAX_DEPTH + 2):
        deep = [deep]
    with pytest.raises(ValueError):
        cbor.dumps(deep)
    raw = b"\x81" * (cbor.MAX_DEPTH + 2) + b"\x00"
    with pytest.raises(cbor.CborError):
        cbor.loads(raw)


def test_decoder_never_crashes_on_random_bytes():
    import random
    rng = random.Random(1234)
    for _ in range(2000):
        blob = bytes(rng.randrange(256) for _ in range(rng.randrange(0, 64)))
        try:
            cbor.loads(blob)
        except cbor.CborError:
            pass
