import pytest
from hypothesis import given, settings, strategies as st

from quiclab.h3lite import (
    FRAME_DATA,
    FRAME_HEADERS,
    FRAME_SETTINGS,
    Frame,
    FrameParser,
    H3Error,
    IncompleteFrame,
    UnsupportedQpack,
    build_request,
    build_response,
    build_settings,
    frame_parse,
    frame_serialize,
    parse_request,
    parse_settings,
    qpack_decode,
    qpack_encode,
    varint_decode,
    varint_encode,
)

# Golden variable-length integer vectors from the transport's integer
# encoding rules, cross-checked against an existing implementation.
VARINT_VECTORS = [
    (37, "25"),
    (15293, "7bbd"),
    (494878333, "9d7f3e7d"),
    (151288809941952652, "c2197c5eff14e88c"),
    (0, "00"),
    (63, "3f"),
    (64, "4040"),
    (2**62 - 1, "ffffffffffffffff"),
]


@pytest.mark.parametrize("value,hexbytes", VARINT_VECTORS)
def test_varint_golden(value, hexbytes):
    assert varint_encode(value).hex() == hexbytes
    decoded, consumed = varint_decode(bytes.fromhex(hexbytes))
    assert decoded == value
    assert consumed == len(hexbytes) // 2


def test_varint_errors():
    with pytest.raises(H3Error):
        varint_encode(2**62)
    with pytest.raises(H3Error):
        varint_encode(-1)
    with pytest.raises(H3Error):
        varint_decode(b"")


@given(st.integers(min_value=0, max_value=2**62 - 1))
@settings(max_examples=2000)
def test_varint_roundtrip(value):
    encoded = varint_encode(value)
    assert len(encoded) in (1, 2, 4, 8)
    decoded, consumed = varint_decode(encoded + b"trailing")
    assert decoded == value and consumed == len(encoded)


def test_frame_golden_bytes():
    assert build_settings().hex() == "0400"
    assert frame_serialize(Frame(FRAME_DATA, b"abc")).hex() == "0003616263"


def test_frame_parse_roundtrip_and_unknown_skip():
    stream = (
        frame_serialize(Frame(FRAME_SETTINGS, b""))
        + frame_serialize(Frame(0x21, b"\x01\x02"))  # unknown, must be skipped
        + frame_serialize(Frame(FRAME_DATA, b"hello"))
    )
    frames = frame_parse(stream)
    assert [f.frame_type for f in frames] == [FRAME_SETTINGS, FRAME_DATA]
    assert frames[1].payload == b"hello"


def test_frame_parser_incremental():
    parser = FrameParser()
    wire = frame_serialize(Frame(FRAME_DATA, b"x" * 100))
    got = []
    for i in range(0, len(wire), 7):
        got += parser.feed(wire[i : i + 7])
    parser.finish()
    assert len(got) == 1 and got[0].payload == b"x" * 100


def test_frame_truncated_stream_is_an_error():
    wire = frame_serialize(Frame(FRAME_DATA, b"abcdef"))[:-2]
    with pytest.raises(IncompleteFrame):
        frame_parse(wire)


@given(st.binary(max_size=64))
@settings(max_examples=400)
def test_frame_parse_never_crashes(buf):
    parser = FrameParser()
    try:
        parser.feed(buf)
        parser.finish()
    except H3Error:
        pass


def test_settings_entries_roundtrip():
    wire = build_settings({0x01: 0, 0x07: 100})
    frames = frame_parse(wire)
    assert parse_settings(frames[0].payload) == {0x01: 0, 0x07: 100}


def test_qpack_golden_indexed_lines():
    assert qpack_encode([(b":method", b"GET")]).hex() == "0000d1"
    assert qpack_encode([(b":status", b"200")]).hex() == "0000d9"


def test_qpack_roundtrip_full_get_section():
    section = [
        (b":method", b"GET"),
        (b":scheme", b"https"),
        (b":authority", b"test.example"),
        (b":path", b"/index.txt"),
    ]
    assert qpack_decode(qpack_encode(section)) == section


def test_qpack_literal_name_roundtrip():
    section = [(b"x-testbed-run", b"42"), (b"content-type", b"text/plain")]
    assert qpack_decode(qpack_encode(section)) == section


def test_qpack_names_lowercased():
    assert qpack_decode(qpack_encode([(b"X-Mixed-Case", b"v")])) == [(b"x-mixed-case", b"v")]


def test_qpack_rejects_dynamic_sections():
    with pytest.raises(UnsupportedQpack):
        qpack_decode(b"\x01\x00\xd1")  # Required Insert Count 1
    with pytest.raises(UnsupportedQpack):
        qpack_decode(b"\x00\x00\x80")  # indexed line, dynamic table
    with pytest.raises(UnsupportedQpack):
        qpack_decode(b"\x00\x00\x10")  # post-base name reference


@given(st.binary(max_size=48))
@settings(max_examples=400)
def test_qpack_decode_never_crashes(buf):
    try:
        qpack_decode(buf)
    except H3Error:
        pass


def test_build_request_roundtrip():
    frames = frame_parse(build_request("test.example", "/index.txt"))
    fields = parse_request(frames)
    assert fields[b":method"] == b"GET"
    assert fields[b":scheme"] == b"https"
    assert fields[b":authority"] == b"test.example"
    assert fields[b":path"] == b"/index.txt"


def test_build_request_rejects_relative_path():
    with pytest.raises(H3Error):
        build_request("test.example", "index.txt")


def test_build_response_shapes():
    empty = frame_parse(build_response(404, "text/plain", b""))
    assert [f.frame_type for f in empty] == [FRAME_HEADERS]

    body = bytes(18252)
    frames = frame_parse(build_response(200, "text/plain", body))
    assert frames[0].frame_type == FRAME_HEADERS
    data = b"".join(f.payload for f in frames if f.frame_type == FRAME_DATA)
    assert len(data) == 18252
    fields = dict(qpack_decode(frames[0].payload))
    assert fields[b":status"] == b"200"
    assert fields[b"content-length"] == b"18252"


def test_build_response_rejects_bad_status():
    with pytest.raises(H3Error):
        build_response(99, "text/plain", b"")
    with pytest.raises(H3Error):
        build_response(600, "text/plain", b"")


def test_varint_roundtrip_hundred_thousand_values():
    import random

    rng = random.Random(9)
    checked = 0
    for bits in (6, 14, 30, 62):  # all four length classes
        for _ in range(25_000):
            value = rng.getrandbits(bits)
            encoded = varint_encode(value)
            decoded, consumed = varint_decode(encoded)
            assert decoded == value and consumed == len(encoded)
            checked += 1
    assert checked == 100_000
