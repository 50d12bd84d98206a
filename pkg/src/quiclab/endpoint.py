"""The combined server: one authoritative DNS zone and one static content store
served over DoUDP, DoH, DoQ, H3, and the coalesced doq-h3 mode.

All QUIC roles share a single UDP port, one certificate, and one
session-ticket keyring, so a ticket obtained while resolving names resumes a
content connection and vice versa. The DoH role runs separately over
TCP+TLS 1.3 with the same certificate.

The doq-h3 mode demultiplexes bidirectional streams by their first byte: tag
0x00 streams speak the DoQ framing, tag 0x01 streams are H3 requests. When
`settings_policy` is "deferred" (the default) the server opens its control
stream and sends SETTINGS only once the client has opened its own control
stream; "immediate" sends them at connection establishment, and "strict"
behaves like deferred but resets request streams that arrive before the
client's SETTINGS.
"""

from __future__ import annotations

import base64
import logging
import socket
import os
import ssl
import tempfile
import threading
from dataclasses import dataclass, field

from . import dnswire, h3lite
from .corpus import content_type_for
from .transport import (
    ServerConnection,
    ServerIdentity,
    TicketKeyring,
    TransportServer,
    TransportServerConfig,
)

__all__ = [
    "ZoneStore",
    "ContentStore",
    "EndpointConfig",
    "TestbedServer",
    "DOQ_PROTOCOL_ERROR",
    "H3_SETTINGS_ERROR",
    "TAG_UNKNOWN_ERROR",
]

log = logging.getLogger(__name__)

DOQ_PROTOCOL_ERROR = 0x2
H3_SETTINGS_ERROR = 0x10A  # request arrived before SETTINGS under strict policy
TAG_UNKNOWN_ERROR = 0x101

ALPN_DOQ = "doq"
ALPN_H3 = "h3"
ALPN_COALESCED = "doq-h3"


@dataclass
class ZoneEntry:
    a_records: list[str] = field(default_factory=list)
    aaaa_records: list[str] = field(default_factory=list)
    ttl: int = 300


class ZoneStore:
    """Case-insensitive name -> address records map, immutable while serving."""

    def __init__(self, entries: dict[str, ZoneEntry] | None = None) -> None:
        self._entries = {name.lower().rstrip("."): e for name, e in (entries or {}).items()}

    @classmethod
    def from_records(cls, records: dict[str, str]) -> "ZoneStore":
        """Convenience constructor: name -> single IPv4 address."""
        return cls({name: ZoneEntry(a_records=[addr]) for name, addr in records.items()})

    @classmethod
    def from_file(cls, path: str) -> "ZoneStore":
        """Line format: `<name> <A|AAAA> <ttl> <address>`; `#` starts a comment."""
        entries: dict[str, ZoneEntry] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, 1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                parts = line.split()
                if len(parts) != 4:
                    raise ValueError(f"{path}:{lineno}: expected '<name> <A|AAAA> <ttl> <address>'")
                name, rtype, ttl, addr = parts
                entry = entries.setdefault(name.lower().rstrip("."), ZoneEntry(ttl=int(ttl)))
                entry.ttl = int(ttl)
                if rtype.upper() == "A":
                    entry.a_records.append(addr)
                elif rtype.upper() == "AAAA":
                    entry.aaaa_records.append(addr)
                else:
                    raise ValueError(f"{path}:{lineno}: unsupported record type {rtype}")
        return cls(entries)

    def lookup(self, name: str) -> ZoneEntry | None:
        return self._entries.get(name.lower().rstrip("."))

    def answer(self, query: dnswire.DnsMessage) -> dnswire.DnsMessage:
        """Authoritative answer for a one-question query."""
        q = query.questions[0]
        if q.qclass != dnswire.QCLASS_IN:
            resp = dnswire.make_response(query, [], nxdomain=False)
            resp.rcode = dnswire.RCODE_NOTIMP
            return resp
        entry = self.lookup(q.name)
        if entry is None:
            return dnswire.make_response(query, [], nxdomain=True)
        if q.qtype == dnswire.QTYPE_A:
            addrs = entry.a_records
        elif q.qtype == dnswire.QTYPE_AAAA:
            addrs = entry.aaaa_records
        else:
            addrs = []
        return dnswire.make_response(query, addrs, ttl=entry.ttl)


class ContentStore:
    """Absolute path -> (bytes, content type), immutable while serving."""

    def __init__(self, items: dict[str, tuple[bytes, str]] | None = None) -> None:
        for path in items or {}:
            if not path.startswith("/"):
                raise ValueError(f"content paths must be absolute, got {path!r}")
        self._items = dict(items or {})

    @classmethod
    def from_directory(cls, root: str) -> "ContentStore":
        items: dict[str, tuple[bytes, str]] = {}
        for dirpath, _, files in os.walk(root):
            for name in files:
                full = os.path.join(dirpath, name)
                rel = os.path.relpath(full, root).replace(os.sep, "/")
                with open(full, "rb") as fh:
                    items["/" + rel] = (fh.read(), content_type_for(name))
        return cls(items)

    def get(self, path: str) -> tuple[bytes, str] | None:
        return self._items.get(path)

    def paths(self) -> list[str]:
        return sorted(self._items)


# --- DoUDP ---------------------------------------------------------------------


class _DoUdpServer:
    def __init__(self, bind: tuple[str, int], zone: ZoneStore) -> None:
        self.zone = zone
        self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, 1 << 20)
        self._sock.bind(bind)
        self._running = False
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()

    def start(self) -> None:
        self._running = True
        self._thread = threading.Thread(target=self._loop, name="doudp-server", daemon=True)
        self._thread.start()

    def _loop(self) -> None:
        while self._running:
            try:
                data, addr = self._sock.recvfrom(65535)
            except OSError:
                return
            if not data:
                continue
            try:
                query = dnswire.decode(data)
            except dnswire.DnsError as exc:
                log.debug("dropping undecodable datagram from %s: %s", addr, exc)
                continue
            if query.qr != 0 or len(query.questions) != 1:
                continue
            response = self.zone.answer(query)
            try:
                self._sock.sendto(dnswire.encode(response), addr)
            except OSError:
                continue

    def stop(self) -> None:
        self._running = False
        try:
            wake = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            wake.sendto(b"", self._sock.getsockname())
            wake.close()
        except OSError:
            pass
        if self._thread:
            self._thread.join(timeout=2)
        self._sock.close()


# --- DoH -----------------------------------------------------------------------


DNS_MESSAGE_TYPE = "application/dns-message"


class _DohServer:
    """RFC 8484 endpoints over TLS 1.3 with a lean hand-rolled HTTP/1.1 loop.

    One thread per connection; each response leaves in a single write so the
    exchange timing is exactly handshake + one request round-trip.
    """

    def __init__(self, bind: tuple[str, int], zone: ZoneStore, identity: ServerIdentity) -> None:
        self.zone = zone
        self._tmp = tempfile.TemporaryDirectory(prefix="quiclab-doh-")
        cert_path, key_path = identity.tls_pem_files(self._tmp.name)
        self._ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        self._ctx.minimum_version = ssl.TLSVersion.TLSv1_3
        self._ctx.load_cert_chain(cert_path, key_path)
        self._ctx.num_tickets = 0  # resumption for DoH is out of scope; keep flights lean
        self._listen = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listen.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listen.bind(bind)
        self._listen.listen(64)
        self._running = False
        self._thread: threading.Thread | None = None

    @property
    def address(self) -> tuple[str, int]:
        return self._listen.getsockname()

    def start(self) -> None:
        self._running = True
        self._thread = threading.Thread(target=self._accept_loop, name="doh-server", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        self._running = False
        try:
            self._listen.close()
        except OSError:
            pass
        if self._thread:
            self._thread.join(timeout=2)
        self._tmp.cleanup()

    def _accept_loop(self) -> None:
        while self._running:
            try:
                conn, _ = self._listen.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=self._handle_conn, args=(conn,), daemon=True).start()

    def _handle_conn(self, raw) -> None:
        try:
            tls = self._ctx.wrap_socket(raw, server_side=True)
        except (ssl.SSLError, OSError):
            raw.close()
            return
        try:
            buf = b""
            while True:
                head_end = buf.find(b"\r\n\r\n")
                while head_end < 0:
                    chunk = tls.recv(65536)
                    if not chunk:
                        return
                    buf += chunk
                    head_end = buf.find(b"\r\n\r\n")
                head, buf = buf[:head_end], buf[head_end + 4 :]
                lines = head.decode("latin-1").split("\r\n")
                try:
                    method, target, _version = lines[0].split(" ", 2)
                except ValueError:
                    tls.sendall(_http_response(400, b"bad request line"))
                    return
                headers = {}
                for line in lines[1:]:
                    key, _, value = line.partition(":")
                    headers[key.strip().lower()] = value.strip()
                want = int(headers.get("content-length", "0"))
                while len(buf) < want:
                    chunk = tls.recv(65536)
                    if not chunk:
                        return
                    buf += chunk
                body, buf = buf[:want], buf[want:]
                tls.sendall(self._route(method, target, headers, body))
                if headers.get("connection", "").lower() == "close":
                    return
        except (ssl.SSLError, OSError):
            pass
        finally:
            try:
                tls.close()
            except OSError:
                pass

    def _route(self, method: str, target: str, headers: dict, body: bytes) -> bytes:
        path, _, query_string = target.partition("?")
        if path != "/dns-query":
            return _http_response(404, b"unknown path")
        if method == "POST":
            if headers.get("content-type") != DNS_MESSAGE_TYPE:
                return _http_response(415, f"expected {DNS_MESSAGE_TYPE}".encode())
            return self._answer(body)
        if method == "GET":
            params = dict(
                pair.split("=", 1) for pair in query_string.split("&") if "=" in pair
            )
            encoded = params.get("dns")
            if not encoded:
                return _http_response(400, b"missing dns parameter")
            try:
                wire = base64.urlsafe_b64decode(encoded + "=" * (-len(encoded) % 4))
            except ValueError:
                return _http_response(400, b"bad base64url payload")
            return self._answer(wire)
        return _http_response(405, b"method not allowed")

    def _answer(self, wire: bytes) -> bytes:
        try:
            query = dnswire.decode(wire)
        except dnswire.DnsError:
            return _http_response(400, b"undecodable DNS message")
        if len(query.questions) != 1:
            return _http_response(400, b"expected exactly one question")
        body = dnswire.encode(self.zone.answer(query))
        return _http_response(200, body, DNS_MESSAGE_TYPE)


_HTTP_REASONS = {200: "OK", 400: "Bad Request", 404: "Not Found",
                 405: "Method Not Allowed", 415: "Unsupported Media Type"}


def _http_response(status: int, body: bytes, content_type: str = "text/plain") -> bytes:
    reason = _HTTP_REASONS.get(status, "Error")
    return (
        f"HTTP/1.1 {status} {reason}\r\n"
        f"Content-Type: {content_type}\r\n"
        f"Content-Length: {len(body)}\r\n\r\n"
    ).encode() + body


# --- QUIC roles -------------------------------------------------------------------


class _QuicApp:
    """Per-ALPN stream dispatch on top of the transport server."""

    def __init__(self, zone: ZoneStore, content: ContentStore, settings_policy: str) -> None:
        if settings_policy not in ("deferred", "immediate", "strict"):
            raise ValueError(f"unknown settings_policy {settings_policy!r}")
        self.zone = zone
        self.content = content
        self.settings_policy = settings_policy

    # -- transport callbacks (run on the transport server thread)

    def on_connection(self, conn: ServerConnection) -> None:
        conn.app_state.update(
            settings_sent=False,
            client_settings_seen=False,
            done_streams=set(),
        )
        if conn.alpn == ALPN_H3 or (conn.alpn == ALPN_COALESCED and self.settings_policy == "immediate"):
            self._send_settings(conn)

    def _send_settings(self, conn: ServerConnection) -> None:
        control_sid = conn.open_uni_stream()
        payload = h3lite.varint_encode(h3lite.STREAM_CONTROL) + h3lite.build_settings(
            {h3lite.SETTINGS_QPACK_MAX_TABLE_CAPACITY: 0}
        )
        conn.write_stream(control_sid, payload)
        conn.app_state["settings_sent"] = True
        conn.events.add("h3_settings_sent")

    def on_stream_data(self, conn: ServerConnection, sid: int, data: bytes, fin: bool) -> None:
        if sid in conn.app_state.get("done_streams", ()):  # already answered
            return
        if sid % 4 == 2:  # client unidirectional stream
            self._handle_client_uni(conn, sid)
            return
        if sid % 4 != 0:
            return
        if conn.alpn == ALPN_DOQ:
            self._handle_doq_stream(conn, sid)
        elif conn.alpn == ALPN_H3:
            self._handle_h3_request(conn, sid, fin)
        elif conn.alpn == ALPN_COALESCED:
            self._handle_coalesced_stream(conn, sid, fin)

    # -- stream handlers

    def _handle_client_uni(self, conn: ServerConnection, sid: int) -> None:
        buf = bytes(conn.streams[sid].buffer)
        if not buf:
            return
        try:
            stream_type, _ = h3lite.varint_decode(buf)
        except h3lite.H3Error:
            return
        if stream_type == h3lite.STREAM_CONTROL and not conn.app_state["client_settings_seen"]:
            conn.app_state["client_settings_seen"] = True
            conn.events.add("client_settings_received")
            if conn.alpn == ALPN_COALESCED and not conn.app_state["settings_sent"]:
                self._send_settings(conn)  # deferred/strict policy trigger

    def _doq_message(self, buf: bytes) -> bytes | None:
        """Extract one length-prefixed DNS message once fully buffered."""
        if len(buf) < 2:
            return None
        want = int.from_bytes(buf[:2], "big")
        if len(buf) < 2 + want:
            return None
        return buf[2 : 2 + want]

    def _handle_doq_stream(self, conn: ServerConnection, sid: int, tag_offset: int = 0) -> None:
        buf = bytes(conn.streams[sid].buffer)[tag_offset:]
        wire = self._doq_message(buf)
        if wire is None:
            return
        try:
            query = dnswire.decode(wire)
        except dnswire.DnsError:
            conn.reset_stream(sid, DOQ_PROTOCOL_ERROR)
            conn.app_state["done_streams"].add(sid)
            return
        if query.id != 0:
            conn.close(code=DOQ_PROTOCOL_ERROR, reason="DoQ message id must be 0")
            return
        response = dnswire.encode(self.zone.answer(query))
        conn.write_stream(sid, len(response).to_bytes(2, "big") + response, fin=True)
        conn.app_state["done_streams"].add(sid)

    def _handle_h3_request(self, conn: ServerConnection, sid: int, fin: bool, tag_offset: int = 0) -> None:
        if not fin:
            return  # requests are a single HEADERS frame, answered at stream end
        buf = bytes(conn.streams[sid].buffer)[tag_offset:]
        try:
            fields = h3lite.parse_request(h3lite.frame_parse(buf))
            path = fields[b":path"].decode()
        except (h3lite.H3Error, KeyError) as exc:
            conn.events.add("bad_request", stream_id=sid, detail=repr(exc))
            conn.reset_stream(sid, TAG_UNKNOWN_ERROR)
            conn.app_state["done_streams"].add(sid)
            return
        item = self.content.get(path)
        if item is None:
            conn.write_stream(sid, h3lite.build_response(404, "text/plain", b""), fin=True)
        else:
            body, ctype = item
            conn.write_stream(sid, h3lite.build_response(200, ctype, body), fin=True)
        conn.app_state["done_streams"].add(sid)

    def _handle_coalesced_stream(self, conn: ServerConnection, sid: int, fin: bool) -> None:
        buf = bytes(conn.streams[sid].buffer)
        if not buf:
            return
        tag = buf[0]
        if tag == h3lite.TAG_COALESCED_DNS:
            self._handle_doq_stream(conn, sid, tag_offset=1)
        elif tag == h3lite.TAG_REQUEST:
            if self.settings_policy == "strict" and not conn.app_state["client_settings_seen"]:
                conn.events.add("request_before_settings", stream_id=sid)
                conn.reset_stream(sid, H3_SETTINGS_ERROR)
                conn.app_state["done_streams"].add(sid)
                return
            self._handle_h3_request(conn, sid, fin, tag_offset=1)
        else:
            conn.events.add("unknown_stream_tag", stream_id=sid, tag=tag)
            conn.reset_stream(sid, TAG_UNKNOWN_ERROR)
            conn.app_state["done_streams"].add(sid)


# --- combined server ------------------------------------------------------------------


@dataclass
class EndpointConfig:
    zone: ZoneStore
    content: ContentStore
    identity: ServerIdentity | None = None  # generated per run when omitted
    keyring: TicketKeyring | None = None
    alpns: tuple[str, ...] = (ALPN_DOQ, ALPN_H3, ALPN_COALESCED)
    settings_policy: str = "deferred"
    early_data: bool = True
    udp_bind: tuple[str, int] = ("127.0.0.1", 0)
    tls_bind: tuple[str, int] = ("127.0.0.1", 0)
    quic_bind: tuple[str, int] = ("127.0.0.1", 0)


class TestbedServer:
    """DoUDP + DoH + multi-ALPN QUIC serving one zone and one content store."""

    __test__ = False  # pytest: not a test class despite the name

    def __init__(self, config: EndpointConfig) -> None:
        self.config = config
        self.identity = config.identity or ServerIdentity.generate()
        self.keyring = config.keyring or TicketKeyring()
        self.zone = config.zone
        self.content = config.content
        self._doudp = _DoUdpServer(config.udp_bind, config.zone)
        self._doh = _DohServer(config.tls_bind, config.zone, self.identity)
        self._quic_app = _QuicApp(config.zone, config.content, config.settings_policy)
        self._quic = TransportServer(
            config.quic_bind,
            TransportServerConfig(
                identity=self.identity,
                keyring=self.keyring,
                alpns=config.alpns,
                early_data=config.early_data,
            ),
            self._quic_app,
        )

    # addresses

    @property
    def udp_address(self) -> tuple[str, int]:
        return self._doudp.address

    @property
    def tls_address(self) -> tuple[str, int]:
        return self._doh.address

    @property
    def quic_address(self) -> tuple[str, int]:
        return self._quic.address

    @property
    def fingerprint(self) -> bytes:
        return self.identity.fingerprint

    def quic_connections(self) -> list[ServerConnection]:
        return self._quic.connections

    def start(self) -> "TestbedServer":
        self._doudp.start()
        self._doh.start()
        self._quic.start()
        return self

    def stop(self) -> None:
        self._doudp.stop()
        self._doh.stop()
        self._quic.stop()
