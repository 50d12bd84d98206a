"""Minimal HTTP/3 syntax layer.

Covers exactly what the testbed's request/response exchanges need: QUIC
variable-length integers, DATA/HEADERS/SETTINGS frames, static-table-only
QPACK field sections, unidirectional stream typing, and the one-byte stream
tag that the coalesced DNS+web mode puts in front of bidirectional streams.

Dynamic QPACK state is deliberately unsupported: the encoder advertises a
zero-capacity table and the decoder rejects any section that requires
inserts, so no header exchange can ever cost an extra round-trip.
"""

from __future__ import annotations

from dataclasses import dataclass

__all__ = [
    "H3Error",
    "IncompleteFrame",
    "UnsupportedQpack",
    "varint_encode",
    "varint_decode",
    "Frame",
    "FRAME_DATA",
    "FRAME_HEADERS",
    "FRAME_SETTINGS",
    "frame_serialize",
    "frame_parse",
    "FrameParser",
    "build_settings",
    "parse_settings",
    "SETTINGS_QPACK_MAX_TABLE_CAPACITY",
    "qpack_encode",
    "qpack_decode",
    "build_request",
    "build_response",
    "parse_request",
    "STREAM_CONTROL",
    "STREAM_QPACK_ENCODER",
    "STREAM_QPACK_DECODER",
    "TAG_COALESCED_DNS",
    "TAG_REQUEST",
]


class H3Error(ValueError):
    pass


class IncompleteFrame(H3Error):
    """A frame header declared more payload than the stream delivered."""


class UnsupportedQpack(H3Error):
    """The field section references dynamic-table state we never negotiate."""


# --- variable-length integers (two-bit length prefix) -----------------------

_VARINT_MAX = 2**62 - 1


def varint_encode(value: int) -> bytes:
    if value < 0 or value > _VARINT_MAX:
        raise H3Error(f"varint out of range: {value}")
    if value < 0x40:
        return value.to_bytes(1, "big")
    if value < 0x4000:
        return (value | 0x4000).to_bytes(2, "big")
    if value < 0x40000000:
        return (value | 0x80000000).to_bytes(4, "big")
    return (value | 0xC000000000000000).to_bytes(8, "big")


def varint_decode(buf: bytes, offset: int = 0) -> tuple[int, int]:
    """Returns (value, bytes consumed from `offset`)."""
    if offset >= len(buf):
        raise H3Error("varint on empty buffer")
    length = 1 << (buf[offset] >> 6)
    if offset + length > len(buf):
        raise IncompleteFrame(f"varint needs {length} bytes, have {len(buf) - offset}")
    value = int.from_bytes(buf[offset : offset + length], "big")
    value &= (1 << (8 * length - 2)) - 1
    return value, length


# --- frames ------------------------------------------------------------------

FRAME_DATA = 0x00
FRAME_HEADERS = 0x01
FRAME_SETTINGS = 0x04

_KNOWN_FRAME_TYPES = frozenset({FRAME_DATA, FRAME_HEADERS, FRAME_SETTINGS})


@dataclass(frozen=True)
class Frame:
    frame_type: int
    payload: bytes = b""


def frame_serialize(frame: Frame) -> bytes:
    return varint_encode(frame.frame_type) + varint_encode(len(frame.payload)) + frame.payload


class FrameParser:
    """Incremental frame reader for one stream.

    Feed arbitrary byte chunks; complete frames of known types come back in
    order, unknown types are consumed and dropped. Call `finish()` once the
    stream ends to surface a trailing partial frame as an error.
    """

    def __init__(self) -> None:
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Frame]:
        self._buf += data
        frames: list[Frame] = []
        while True:
            try:
                ftype, n1 = varint_decode(self._buf)
                length, n2 = varint_decode(self._buf, n1)
            except IncompleteFrame:
                break
            except H3Error:
                break
            if n1 + n2 + length > len(self._buf):
                break
            payload = bytes(self._buf[n1 + n2 : n1 + n2 + length])
            del self._buf[: n1 + n2 + length]
            if ftype in _KNOWN_FRAME_TYPES:
                frames.append(Frame(ftype, payload))
        return frames

    def finish(self) -> None:
        if self._buf:
            raise IncompleteFrame(f"{len(self._buf)} trailing bytes form no complete frame")


def frame_parse(data: bytes) -> list[Frame]:
    """Parse a complete stream's bytes; raises IncompleteFrame on a short tail."""
    parser = FrameParser()
    frames = parser.feed(data)
    parser.finish()
    return frames


SETTINGS_QPACK_MAX_TABLE_CAPACITY = 0x01


def build_settings(entries: dict[int, int] | None = None) -> bytes:
    payload = b"".join(
        varint_encode(k) + varint_encode(v) for k, v in (entries or {}).items()
    )
    return frame_serialize(Frame(FRAME_SETTINGS, payload))


def parse_settings(payload: bytes) -> dict[int, int]:
    entries: dict[int, int] = {}
    pos = 0
    while pos < len(payload):
        key, n = varint_decode(payload, pos)
        pos += n
        value, n = varint_decode(payload, pos)
        pos += n
        entries[key] = value
    return entries


# --- QPACK static table (RFC 9204 Appendix A) --------------------------------

STATIC_TABLE: list[tuple[bytes, bytes]] = [
    (b":authority", b""),
    (b":path", b"/"),
    (b"age", b"0"),
    (b"content-disposition", b""),
    (b"content-length", b"0"),
    (b"cookie", b""),
    (b"date", b""),
    (b"etag", b""),
    (b"if-modified-since", b""),
    (b"if-none-match", b""),
    (b"last-modified", b""),
    (b"link", b""),
    (b"location", b""),
    (b"referer", b""),
    (b"set-cookie", b""),
    (b":method", b"CONNECT"),
    (b":method", b"DELETE"),
    (b":method", b"GET"),
    (b":method", b"HEAD"),
    (b":method", b"OPTIONS"),
    (b":method", b"POST"),
    (b":method", b"PUT"),
    (b":scheme", b"http"),
    (b":scheme", b"https"),
    (b":status", b"103"),
    (b":status", b"200"),
    (b":status", b"304"),
    (b":status", b"404"),
    (b":status", b"503"),
    (b"accept", b"*/*"),
    (b"accept", b"application/dns-message"),
    (b"accept-encoding", b"gzip, deflate, br"),
    (b"accept-ranges", b"bytes"),
    (b"access-control-allow-headers", b"cache-control"),
    (b"access-control-allow-headers", b"content-type"),
    (b"access-control-allow-origin", b"*"),
    (b"cache-control", b"max-age=0"),
    (b"cache-control", b"max-age=2592000"),
    (b"cache-control", b"max-age=604800"),
    (b"cache-control", b"no-cache"),
    (b"cache-control", b"no-store"),
    (b"cache-control", b"public, max-age=31536000"),
    (b"content-encoding", b"br"),
    (b"content-encoding", b"gzip"),
    (b"content-type", b"application/dns-message"),
    (b"content-type", b"application/javascript"),
    (b"content-type", b"application/json"),
    (b"content-type", b"application/x-www-form-urlencoded"),
    (b"content-type", b"image/gif"),
    (b"content-type", b"image/jpeg"),
    (b"content-type", b"image/png"),
    (b"content-type", b"text/css"),
    (b"content-type", b"text/html; charset=utf-8"),
    (b"content-type", b"text/plain"),
    (b"content-type", b"text/plain;charset=utf-8"),
    (b"range", b"bytes=0-"),
    (b"strict-transport-security", b"max-age=31536000"),
    (b"strict-transport-security", b"max-age=31536000; includesubdomains"),
    (b"strict-transport-security", b"max-age=31536000; includesubdomains; preload"),
    (b"vary", b"accept-encoding"),
    (b"vary", b"origin"),
    (b"x-content-type-options", b"nosniff"),
    (b"x-xss-protection", b"1; mode=block"),
    (b":status", b"100"),
    (b":status", b"204"),
    (b":status", b"206"),
    (b":status", b"302"),
    (b":status", b"400"),
    (b":status", b"403"),
    (b":status", b"421"),
    (b":status", b"425"),
    (b":status", b"500"),
    (b"accept-language", b""),
    (b"access-control-allow-credentials", b"FALSE"),
    (b"access-control-allow-credentials", b"TRUE"),
    (b"access-control-allow-headers", b"*"),
    (b"access-control-allow-methods", b"get"),
    (b"access-control-allow-methods", b"get, post, options"),
    (b"access-control-allow-methods", b"options"),
    (b"access-control-expose-headers", b"content-length"),
    (b"access-control-request-headers", b"content-type"),
    (b"access-control-request-method", b"get"),
    (b"access-control-request-method", b"post"),
    (b"alt-svc", b"clear"),
    (b"authorization", b""),
    (b"content-security-policy", b"script-src 'none'; object-src 'none'; base-uri 'none'"),
    (b"early-data", b"1"),
    (b"expect-ct", b""),
    (b"forwarded", b""),
    (b"if-range", b""),
    (b"origin", b""),
    (b"purpose", b"prefetch"),
    (b"server", b""),
    (b"timing-allow-origin", b"*"),
    (b"upgrade-insecure-requests", b"1"),
    (b"user-agent", b""),
    (b"x-forwarded-for", b""),
    (b"x-frame-options", b"deny"),
    (b"x-frame-options", b"sameorigin"),
]

_STATIC_BY_PAIR = {pair: i for i, pair in enumerate(STATIC_TABLE)}
_STATIC_BY_NAME: dict[bytes, int] = {}
for _i, (_name, _) in enumerate(STATIC_TABLE):
    _STATIC_BY_NAME.setdefault(_name, _i)

FieldSection = list[tuple[bytes, bytes]]


def _encode_prefixed_int(value: int, prefix_bits: int, flags: int) -> bytes:
    limit = (1 << prefix_bits) - 1
    if value < limit:
        return bytes([flags | value])
    out = bytearray([flags | limit])
    value -= limit
    while value >= 0x80:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    out.append(value)
    return bytes(out)


def _decode_prefixed_int(buf: bytes, pos: int, prefix_bits: int) -> tuple[int, int]:
    limit = (1 << prefix_bits) - 1
    if pos >= len(buf):
        raise H3Error("field section truncated")
    value = buf[pos] & limit
    pos += 1
    if value < limit:
        return value, pos
    shift = 0
    while True:
        if pos >= len(buf):
            raise H3Error("field section truncated in integer tail")
        byte = buf[pos]
        pos += 1
        value += (byte & 0x7F) << shift
        shift += 7
        if not byte & 0x80:
            return value, pos


def _encode_string(data: bytes, prefix_bits: int, flags: int) -> bytes:
    # H bit (huffman) stays 0; values go out as raw octets
    return _encode_prefixed_int(len(data), prefix_bits, flags) + data


def _decode_string(buf: bytes, pos: int, prefix_bits: int, huffman_flag: int) -> tuple[bytes, int]:
    if pos >= len(buf):
        raise H3Error("field section truncated at string")
    if buf[pos] & huffman_flag:
        raise UnsupportedQpack("huffman-coded strings are not supported")
    length, pos = _decode_prefixed_int(buf, pos, prefix_bits)
    if pos + length > len(buf):
        raise H3Error("string runs past field section")
    return bytes(buf[pos : pos + length]), pos + length


def qpack_encode(fields: FieldSection) -> bytes:
    """Encode a field section against the static table only.

    Prefix is always Required Insert Count 0 / Delta Base 0; every field is
    an indexed line, a literal with static name reference, or a fully
    literal line.
    """
    out = bytearray(b"\x00\x00")
    for name, value in fields:
        name = name.lower()
        idx = _STATIC_BY_PAIR.get((name, value))
        if idx is not None and idx < 0x3F:
            out += _encode_prefixed_int(idx, 6, 0xC0)  # indexed, static
            continue
        name_idx = _STATIC_BY_NAME.get(name)
        if name_idx is not None and name_idx < 0x0F:
            out += _encode_prefixed_int(name_idx, 4, 0x50)  # literal, static name ref
            out += _encode_string(value, 7, 0x00)
            continue
        out += _encode_string(name, 3, 0x20)  # literal name
        out += _encode_string(value, 7, 0x00)
    return bytes(out)


def qpack_decode(buf: bytes) -> FieldSection:
    if len(buf) < 2:
        raise H3Error("field section shorter than its prefix")
    ric, pos = _decode_prefixed_int(buf, 0, 8)
    if ric != 0:
        raise UnsupportedQpack(f"Required Insert Count {ric} needs a dynamic table")
    _base, pos = _decode_prefixed_int(buf, pos, 7)
    fields: FieldSection = []
    while pos < len(buf):
        first = buf[pos]
        if first & 0x80:  # indexed field line
            if not first & 0x40:
                raise UnsupportedQpack("indexed reference into the dynamic table")
            idx, pos = _decode_prefixed_int(buf, pos, 6)
            if idx >= len(STATIC_TABLE):
                raise H3Error(f"static index {idx} out of range")
            fields.append(STATIC_TABLE[idx])
        elif first & 0x40:  # literal with name reference
            if not first & 0x10:
                raise UnsupportedQpack("name reference into the dynamic table")
            idx, pos = _decode_prefixed_int(buf, pos, 4)
            if idx >= len(STATIC_TABLE):
                raise H3Error(f"static index {idx} out of range")
            value, pos = _decode_string(buf, pos, 7, 0x80)
            fields.append((STATIC_TABLE[idx][0], value))
        elif first & 0x20:  # literal name
            name, pos = _decode_string(buf, pos, 3, 0x08)
            value, pos = _decode_string(buf, pos, 7, 0x80)
            fields.append((name.lower(), value))
        else:  # post-base forms
            raise UnsupportedQpack("post-base field lines need a dynamic table")
    return fields


# --- request / response builders ---------------------------------------------

_DATA_CHUNK = 16384


def build_request(authority: str, path: str) -> bytes:
    """A GET request as one HEADERS frame."""
    if not path.startswith("/"):
        raise H3Error(f"path must begin with '/', got {path!r}")
    section = qpack_encode(
        [
            (b":method", b"GET"),
            (b":scheme", b"https"),
            (b":authority", authority.encode()),
            (b":path", path.encode()),
        ]
    )
    return frame_serialize(Frame(FRAME_HEADERS, section))


def parse_request(frames: list[Frame]) -> dict[bytes, bytes]:
    """Pull the pseudo-header map out of a request's HEADERS frame."""
    for frame in frames:
        if frame.frame_type == FRAME_HEADERS:
            return dict(qpack_decode(frame.payload))
    raise H3Error("no HEADERS frame in request")


def build_response(status: int, content_type: str, body: bytes) -> bytes:
    """HEADERS(:status, content-type, content-length) plus DATA frames."""
    if not 100 <= status <= 599:
        raise H3Error(f"status {status} outside 100..599")
    section = qpack_encode(
        [
            (b":status", str(status).encode()),
            (b"content-type", content_type.encode()),
            (b"content-length", str(len(body)).encode()),
        ]
    )
    out = bytearray(frame_serialize(Frame(FRAME_HEADERS, section)))
    for start in range(0, len(body), _DATA_CHUNK):
        out += frame_serialize(Frame(FRAME_DATA, body[start : start + _DATA_CHUNK]))
    return bytes(out)


# --- stream typing ------------------------------------------------------------

# unidirectional stream type varints
STREAM_CONTROL = 0x00
STREAM_QPACK_ENCODER = 0x02
STREAM_QPACK_DECODER = 0x03

# one-byte tags on bidirectional streams in the coalesced doq-h3 mode
TAG_COALESCED_DNS = 0x00
TAG_REQUEST = 0x01
