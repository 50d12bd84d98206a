"""DNS message codec: header, question, and A/AAAA answer sections on the wire.

The encoder always writes uncompressed names (the canonical form the golden
fixtures pin down); the decoder additionally accepts name-compression
pointers so captures from other resolvers parse too. The server side of this
testbed is authoritative-only, so EDNS, DNSSEC, and truncation semantics are
out of scope.
"""

from __future__ import annotations

import ipaddress
import struct
from dataclasses import dataclass, field

__all__ = [
    "DnsError",
    "QTYPE_A",
    "QTYPE_AAAA",
    "QCLASS_IN",
    "RCODE_NOERROR",
    "RCODE_NXDOMAIN",
    "RCODE_NOTIMP",
    "Question",
    "ResourceRecord",
    "DnsMessage",
    "make_query",
    "make_response",
    "encode",
    "decode",
]

QTYPE_A = 1
QTYPE_AAAA = 28
QCLASS_IN = 1

RCODE_NOERROR = 0
RCODE_NXDOMAIN = 3
RCODE_NOTIMP = 4

_MAX_LABEL = 63
_MAX_NAME = 255
_HEADER = struct.Struct("!HHHHHH")


class DnsError(ValueError):
    """Malformed name, message, or wire bytes."""


@dataclass
class Question:
    name: str
    qtype: int = QTYPE_A
    qclass: int = QCLASS_IN


@dataclass
class ResourceRecord:
    name: str
    rtype: int
    rclass: int
    ttl: int
    rdata: bytes


@dataclass
class DnsMessage:
    id: int = 0
    qr: int = 0
    opcode: int = 0
    rd: int = 0
    ra: int = 0
    rcode: int = 0
    questions: list[Question] = field(default_factory=list)
    answers: list[ResourceRecord] = field(default_factory=list)


def _validate_name(name: str) -> list[bytes]:
    if not name:
        raise DnsError("empty domain name")
    labels = [part.encode("ascii") for part in name.rstrip(".").split(".")]
    for label in labels:
        if not label:
            raise DnsError(f"empty label in {name!r}")
        if len(label) > _MAX_LABEL:
            raise DnsError(f"label longer than {_MAX_LABEL} bytes in {name!r}")
    wire_len = sum(len(l) + 1 for l in labels) + 1
    if wire_len > _MAX_NAME:
        raise DnsError(f"name {name!r} exceeds {_MAX_NAME} wire bytes")
    return labels


def _encode_name(name: str) -> bytes:
    out = bytearray()
    for label in _validate_name(name):
        out.append(len(label))
        out += label
    out.append(0)
    return bytes(out)


def make_query(name: str, qtype: int = QTYPE_A, id: int = 0) -> DnsMessage:
    """A recursive-desired question with no answers."""
    _validate_name(name)
    return DnsMessage(id=id, qr=0, rd=1, questions=[Question(name, qtype, QCLASS_IN)])


def make_response(
    query: DnsMessage,
    addresses: list[str],
    ttl: int = 300,
    nxdomain: bool = False,
) -> DnsMessage:
    """Answer a single-question query with one record per address.

    The qtype of the question constrains the address family: A answers must
    be IPv4, AAAA answers IPv6. With `nxdomain` the answer section is empty
    and rcode is set accordingly.
    """
    if len(query.questions) != 1:
        raise DnsError("query must carry exactly one question")
    q = query.questions[0]
    answers: list[ResourceRecord] = []
    if not nxdomain:
        for addr in addresses:
            ip = ipaddress.ip_address(addr)
            if q.qtype == QTYPE_A and ip.version != 4:
                raise DnsError(f"A question cannot be answered with {addr}")
            if q.qtype == QTYPE_AAAA and ip.version != 6:
                raise DnsError(f"AAAA question cannot be answered with {addr}")
            answers.append(ResourceRecord(q.name, q.qtype, q.qclass, ttl, ip.packed))
    return DnsMessage(
        id=query.id,
        qr=1,
        rd=query.rd,
        ra=1,
        rcode=RCODE_NXDOMAIN if nxdomain else RCODE_NOERROR,
        questions=[Question(q.name, q.qtype, q.qclass)],
        answers=answers,
    )


def encode(msg: DnsMessage) -> bytes:
    """Canonical uncompressed wire encoding."""
    flags = (
        (msg.qr & 1) << 15
        | (msg.opcode & 0xF) << 11
        | (msg.rd & 1) << 8
        | (msg.ra & 1) << 7
        | (msg.rcode & 0xF)
    )
    out = bytearray(
        _HEADER.pack(msg.id, flags, len(msg.questions), len(msg.answers), 0, 0)
    )
    for q in msg.questions:
        out += _encode_name(q.name)
        out += struct.pack("!HH", q.qtype, q.qclass)
    for rr in msg.answers:
        if rr.rtype == QTYPE_A and len(rr.rdata) != 4:
            raise DnsError(f"A rdata must be 4 bytes, got {len(rr.rdata)}")
        if rr.rtype == QTYPE_AAAA and len(rr.rdata) != 16:
            raise DnsError(f"AAAA rdata must be 16 bytes, got {len(rr.rdata)}")
        out += _encode_name(rr.name)
        out += struct.pack("!HHIH", rr.rtype, rr.rclass, rr.ttl, len(rr.rdata))
        out += rr.rdata
    return bytes(out)


def _decode_name(buf: bytes, offset: int) -> tuple[str, int]:
    """Parse a possibly compressed name; returns (name, offset after it)."""
    labels: list[str] = []
    visited: set[int] = set()
    pos = offset
    end = -1  # offset just past the name in the original stream
    while True:
        if pos >= len(buf):
            raise DnsError("truncated name")
        length = buf[pos]
        if length & 0xC0 == 0xC0:
            if pos + 1 >= len(buf):
                raise DnsError("truncated compression pointer")
            if end < 0:
                end = pos + 2
            target = ((length & 0x3F) << 8) | buf[pos + 1]
            if target in visited:
                raise DnsError("compression pointer loop")
            visited.add(target)
            pos = target
            continue
        if length & 0xC0:
            raise DnsError(f"unsupported label type 0x{length:02x}")
        if length == 0:
            if end < 0:
                end = pos + 1
            break
        if pos + 1 + length > len(buf):
            raise DnsError("label runs past buffer")
        labels.append(buf[pos + 1 : pos + 1 + length].decode("ascii", "replace"))
        pos += 1 + length
    return ".".join(labels), end


def decode(buf: bytes) -> DnsMessage:
    """Parse header, questions, and answers; additional sections are skipped."""
    if len(buf) < _HEADER.size:
        raise DnsError(f"message shorter than header ({len(buf)} bytes)")
    msg_id, flags, qdcount, ancount, _nscount, _arcount = _HEADER.unpack_from(buf)
    msg = DnsMessage(
        id=msg_id,
        qr=(flags >> 15) & 1,
        opcode=(flags >> 11) & 0xF,
        rd=(flags >> 8) & 1,
        ra=(flags >> 7) & 1,
        rcode=flags & 0xF,
    )
    pos = _HEADER.size
    for _ in range(qdcount):
        name, pos = _decode_name(buf, pos)
        if pos + 4 > len(buf):
            raise DnsError("truncated question")
        qtype, qclass = struct.unpack_from("!HH", buf, pos)
        pos += 4
        msg.questions.append(Question(name, qtype, qclass))
    for _ in range(ancount):
        name, pos = _decode_name(buf, pos)
        if pos + 10 > len(buf):
            raise DnsError("truncated answer header")
        rtype, rclass, ttl, rdlen = struct.unpack_from("!HHIH", buf, pos)
        pos += 10
        if pos + rdlen > len(buf):
            raise DnsError("answer rdata runs past buffer")
        msg.answers.append(
            ResourceRecord(name, rtype, rclass, ttl, bytes(buf[pos : pos + rdlen]))
        )
        pos += rdlen
    return msg
