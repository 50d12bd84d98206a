"""The measurement client: one page visit per protocol combination.

A visit resolves the page host over DoUDP, DoH, or DoQ, then fetches the index
document and all same-host assets over H3 with either a full (1-RTT) or a
resumed (0-RTT) handshake; the coalesced variant does everything on one
doq-h3 connection. Every timestamp needed for the round-trip accounting is
captured: the DNS handshake/query split, the connect duration (first packet to
client Finished), the time to first request sent, and fetch completion.

Request emission for 0-RTT has two first-class modes, because a resumed
client may either hold its GET until the handshake Finished is out
("after_handshake", the default) or write it into the very first flight as
early data ("early_data"). Accepted early data is verified against the
transport event log: the request bytes must actually have left in flight 0.
"""

from __future__ import annotations

import contextlib
import functools
import gc
import os
import ipaddress
import socket
import ssl
import time
from dataclasses import dataclass, field, asdict

from . import dnswire, h3lite
from .corpus import PageManifest, parse_manifest
from .scenario import AccessProfile
from .transport import ClientConnection, TicketGrant, TransportError

__all__ = [
    "SCHEMA_VERSION",
    "VisitError",
    "ProtocolCombo",
    "VisitRecord",
    "TicketCache",
    "ServiceAddresses",
    "resolve",
    "fetch_h3",
    "visit",
    "visit_coalesced",
    "prime_ticket",
]

SCHEMA_VERSION = 1

DNS_PROTOCOLS = ("doudp", "doh", "doq")
WEB_MODES = ("h3_1rtt", "h3_0rtt")
COALESCE_MODES = ("paper", "optimized")
EMISSION_MODES = ("after_handshake", "early_data")

DEFAULT_TIMEOUT_S = 10.0


class VisitError(Exception):
    pass


@contextlib.contextmanager
def _gc_paused():
    """Collect up front, then keep the collector out of the measured window."""
    was_enabled = gc.isenabled()
    gc.collect()
    gc.disable()
    try:
        yield
    finally:
        if was_enabled:
            gc.enable()


@dataclass(frozen=True)
class ProtocolCombo:
    """One cell of the experiment grid."""

    dns: str
    web: str
    coalesced: bool = False
    coalesce_mode: str | None = None

    def __post_init__(self) -> None:
        if self.dns not in DNS_PROTOCOLS:
            raise ValueError(f"dns must be one of {DNS_PROTOCOLS}, got {self.dns!r}")
        if self.web not in WEB_MODES:
            raise ValueError(f"web must be one of {WEB_MODES}, got {self.web!r}")
        if self.coalesced:
            if self.dns != "doq":
                raise ValueError("coalescing requires dns=doq")
            if self.coalesce_mode not in COALESCE_MODES:
                raise ValueError(f"coalesce_mode must be one of {COALESCE_MODES}")
        elif self.coalesce_mode is not None:
            raise ValueError("coalesce_mode only applies to coalesced combos")

    @property
    def label(self) -> str:
        if self.coalesced:
            return f"coalesced_{self.coalesce_mode}"
        return f"{self.dns}+{self.web}"

    @classmethod
    def parse(cls, text: str) -> "ProtocolCombo":
        text = text.strip()
        if text.startswith("coalesced"):
            mode = text.split("_", 1)[1] if "_" in text else "paper"
            return cls("doq", "h3_0rtt", coalesced=True, coalesce_mode=mode)
        try:
            dns, web = text.split("+")
        except ValueError:
            raise ValueError(
                f"combo {text!r} is neither '<dns>+<web>' nor 'coalesced_<mode>'"
            ) from None
        return cls(dns, web)


BASELINE_COMBO = ProtocolCombo("doudp", "h3_1rtt")


@dataclass
class VisitRecord:
    """All timestamps and durations of one page visit."""

    schema_version: int = SCHEMA_VERSION
    ts_unix_ms: int = 0
    profile: str = ""
    page: str = ""
    combo_dns: str = ""
    combo_web: str = ""
    coalesced: bool = False
    coalesce_mode: str | None = None
    request_emission: str = "after_handshake"
    dns_handshake_ms: float | None = None
    dns_query_ms: float | None = None
    dns_lookup_ms: float | None = None
    connect_ms: float | None = None
    ttfrs_ms: float | None = None
    fetch_ms: float | None = None
    plt_ms: float | None = None
    early_data_used: bool = False
    single_connection: bool = False
    failed: bool = False
    fail_reason: str | None = None
    dns_handshake_rtt: float | None = None
    dns_query_rtt: float | None = None
    dns_lookup_rtt: float | None = None
    connect_rtt: float | None = None
    ttfrs_rtt: float | None = None
    fetch_rtt: float | None = None
    plt_rtt: float | None = None

    def normalize(self, profile: AccessProfile) -> None:
        for name in ("dns_handshake", "dns_query", "dns_lookup", "connect", "ttfrs", "fetch", "plt"):
            value = getattr(self, f"{name}_ms")
            setattr(self, f"{name}_rtt", None if value is None else value / profile.rtt_ms)

    @property
    def combo(self) -> ProtocolCombo:
        return ProtocolCombo(self.combo_dns, self.combo_web, self.coalesced, self.coalesce_mode)

    def to_dict(self) -> dict:
        return asdict(self)


class TicketCache:
    """Per-server LIFO of resumption tickets; each ticket is used at most
    `max_uses` times (default once) before it must be refreshed by priming."""

    def __init__(self, max_uses: int = 1) -> None:
        self.max_uses = max_uses
        self._grants: dict[str, list[list]] = {}  # name -> [[grant, uses], ...]

    def put(self, grant: TicketGrant) -> None:
        self._grants.setdefault(grant.server_name, []).append([grant, 0])

    def put_all(self, grants: list[TicketGrant]) -> None:
        for grant in grants:
            self.put(grant)

    def take(self, server_name: str) -> TicketGrant | None:
        stack = self._grants.get(server_name, [])
        while stack:
            entry = stack[-1]
            entry[1] += 1
            if entry[1] >= self.max_uses:
                stack.pop()
            if entry[1] <= self.max_uses:
                return entry[0]
        return None

    def __len__(self) -> int:
        return sum(len(stack) for stack in self._grants.values())


@dataclass
class ServiceAddresses:
    """Where the client reaches each service (usually relay listen addresses)."""

    udp: tuple[str, int]
    tls: tuple[str, int]
    quic: tuple[str, int]
    fingerprint: bytes
    server_name: str = "test.example"
    tls_ca_pem: str | None = None  # path to the pinned certificate for DoH


# --- DNS resolution -----------------------------------------------------------------


@dataclass
class ResolveResult:
    addresses: list[str]
    handshake_ms: float
    query_ms: float
    tickets: list[TicketGrant] = field(default_factory=list)

    @property
    def lookup_ms(self) -> float:
        return self.handshake_ms + self.query_ms


def _answer_addresses(response: dnswire.DnsMessage) -> list[str]:
    if response.rcode != 0:
        raise VisitError(f"resolution failed with rcode {response.rcode}")
    addresses = []
    for rr in response.answers:
        if rr.rtype == dnswire.QTYPE_A and len(rr.rdata) == 4:
            addresses.append(str(ipaddress.IPv4Address(rr.rdata)))
        elif rr.rtype == dnswire.QTYPE_AAAA and len(rr.rdata) == 16:
            addresses.append(str(ipaddress.IPv6Address(rr.rdata)))
    if not addresses:
        raise VisitError("response carries no address records")
    return addresses


def _qtypes(query_type: str) -> list[int]:
    if query_type == "A":
        return [dnswire.QTYPE_A]
    if query_type == "AAAA":
        return [dnswire.QTYPE_AAAA]
    if query_type == "both":
        return [dnswire.QTYPE_A, dnswire.QTYPE_AAAA]
    raise ValueError(f"query_type must be A, AAAA, or both; got {query_type!r}")


def _resolve_doudp(name, addrs, timeout, query_type) -> ResolveResult:
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.settimeout(timeout)
    try:
        addresses: list[str] = []
        t0 = time.monotonic()
        for qtype in _qtypes(query_type):
            # unencrypted transport: a random id ties responses to queries
            query = dnswire.make_query(name, qtype, id=int.from_bytes(os.urandom(2), "big"))
            sock.sendto(dnswire.encode(query), addrs.udp)
            while True:
                data, _ = sock.recvfrom(65535)
                response = dnswire.decode(data)
                if response.id == query.id:
                    break
            if qtype == dnswire.QTYPE_A:
                addresses = _answer_addresses(response)
        query_ms = (time.monotonic() - t0) * 1000.0
        return ResolveResult(addresses, 0.0, query_ms)
    except socket.timeout as exc:
        raise VisitError("DoUDP resolution timed out") from exc
    finally:
        sock.close()


def _resolve_doq(name, addrs, timeout, query_type) -> ResolveResult:
    conn = ClientConnection(
        addrs.quic,
        server_name=addrs.server_name,
        alpn="doq",
        pinned_fingerprint=addrs.fingerprint,
        timeout=timeout,
    )
    try:
        conn.connect()
        handshake_ms = (conn.t_ready - conn.t_first_send) * 1000.0
        addresses: list[str] = []
        t0 = time.monotonic()
        for qtype in _qtypes(query_type):
            query = dnswire.encode(dnswire.make_query(name, qtype, id=0))
            sid = conn.open_stream()
            conn.write_stream(sid, len(query).to_bytes(2, "big") + query, fin=True)
            raw = conn.read_stream(sid, timeout=timeout)
            want = int.from_bytes(raw[:2], "big")
            response = dnswire.decode(raw[2 : 2 + want])
            if qtype == dnswire.QTYPE_A:
                addresses = _answer_addresses(response)
        query_ms = (time.monotonic() - t0) * 1000.0
        # the session ticket follows the client Finished; normally it has
        # already been processed while reading the response
        try:
            conn.pump_until(lambda: bool(conn.tickets), timeout=1.0)
        except TransportError:
            pass
        return ResolveResult(addresses, handshake_ms, query_ms, tickets=list(conn.tickets))
    except TransportError as exc:
        raise VisitError(f"DoQ resolution failed: {exc}") from exc
    finally:
        conn.close()


def _read_http_response(tls_sock) -> tuple[int, bytes]:
    raw = b""
    while b"\r\n\r\n" not in raw:
        chunk = tls_sock.recv(65536)
        if not chunk:
            raise VisitError("DoH connection closed mid-response")
        raw += chunk
    head, _, body = raw.partition(b"\r\n\r\n")
    lines = head.decode("latin-1").split("\r\n")
    status = int(lines[0].split(" ", 2)[1])
    headers = {}
    for line in lines[1:]:
        key, _, value = line.partition(":")
        headers[key.strip().lower()] = value.strip()
    want = int(headers.get("content-length", "0"))
    while len(body) < want:
        chunk = tls_sock.recv(65536)
        if not chunk:
            break
        body += chunk
    return status, body[:want]


@functools.lru_cache(maxsize=8)
def _doh_ssl_context(ca_pem: str) -> ssl.SSLContext:
    ctx = ssl.create_default_context(cafile=ca_pem)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_3
    return ctx


def _resolve_doh(name, addrs, timeout, query_type) -> ResolveResult:
    if addrs.tls_ca_pem is None:
        raise VisitError("DoH requires the pinned certificate PEM path")
    ctx = _doh_ssl_context(addrs.tls_ca_pem)
    tls = None
    try:
        t0 = time.monotonic()
        raw_sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        raw_sock.settimeout(timeout)
        raw_sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        raw_sock.connect(addrs.tls)
        tls = ctx.wrap_socket(raw_sock, server_hostname=addrs.server_name)
        handshake_ms = (time.monotonic() - t0) * 1000.0
        addresses: list[str] = []
        t1 = time.monotonic()
        for qtype in _qtypes(query_type):
            wire = dnswire.encode(dnswire.make_query(name, qtype, id=0))
            request = (
                b"POST /dns-query HTTP/1.1\r\n"
                b"Host: " + addrs.server_name.encode() + b"\r\n"
                b"Content-Type: application/dns-message\r\n"
                b"Accept: application/dns-message\r\n"
                b"Content-Length: " + str(len(wire)).encode() + b"\r\n\r\n" + wire
            )
            tls.sendall(request)
            status, body = _read_http_response(tls)
            if status != 200:
                raise VisitError(f"DoH query returned HTTP {status}")
            response = dnswire.decode(body)
            if qtype == dnswire.QTYPE_A:
                addresses = _answer_addresses(response)
        query_ms = (time.monotonic() - t1) * 1000.0
        return ResolveResult(addresses, handshake_ms, query_ms)
    except (OSError, ssl.SSLError) as exc:
        raise VisitError(f"DoH resolution failed: {exc}") from exc
    finally:
        if tls is not None:
            tls.close()


def resolve(
    dns_protocol: str,
    name: str,
    addrs: ServiceAddresses,
    timeout: float = DEFAULT_TIMEOUT_S,
    query_type: str = "A",
) -> ResolveResult:
    """One DNS lookup over the chosen transport, with its handshake/query split."""
    if dns_protocol == "doudp":
        return _resolve_doudp(name, addrs, timeout, query_type)
    if dns_protocol == "doq":
        return _resolve_doq(name, addrs, timeout, query_type)
    if dns_protocol == "doh":
        return _resolve_doh(name, addrs, timeout, query_type)
    raise ValueError(f"unknown DNS protocol {dns_protocol!r}")


# --- H3 fetching -------------------------------------------------------------------


@dataclass
class FetchResult:
    connect_ms: float
    ttfrs_ms: float
    fetch_ms: float
    early_data_used: bool
    manifest: PageManifest
    body_bytes: int
    tickets: list[TicketGrant] = field(default_factory=list)


def _parse_h3_response(raw: bytes) -> tuple[int, bytes]:
    frames = h3lite.frame_parse(raw)
    fields = dict(h3lite.qpack_decode(frames[0].payload))
    status = int(fields[b":status"])
    body = b"".join(f.payload for f in frames if f.frame_type == h3lite.FRAME_DATA)
    return status, body


def _request_in_first_flight(conn: ClientConnection, stream_id: int) -> bool:
    for entry in conn.events.find("datagram_sent"):
        if entry.get("flight") != 0 or entry.get("ptype") != "early_data":
            continue
        for frame in entry.get("frames", []):
            if frame.get("frame") == "stream" and frame.get("stream_id") == stream_id:
                return True
    return False


def fetch_h3(
    quic_addr: tuple[str, int],
    addrs: ServiceAddresses,
    index_path: str,
    mode: str = "h3_1rtt",
    ticket: TicketGrant | None = None,
    request_emission: str = "after_handshake",
    timeout: float = DEFAULT_TIMEOUT_S,
    render_cost_ms: float = 0.0,
) -> FetchResult:
    """Fetch the index and then every listed asset over one H3 connection."""
    if mode not in WEB_MODES:
        raise ValueError(f"mode must be one of {WEB_MODES}")
    if request_emission not in EMISSION_MODES:
        raise ValueError(f"request_emission must be one of {EMISSION_MODES}")
    if mode == "h3_0rtt" and ticket is None:
        raise VisitError("0-RTT fetch requires a primed session ticket")

    conn = ClientConnection(
        quic_addr,
        server_name=addrs.server_name,
        alpn="h3",
        pinned_fingerprint=addrs.fingerprint,
        timeout=timeout,
    )
    try:
        request = h3lite.build_request(addrs.server_name, index_path)
        index_sid = conn.open_stream()
        if mode == "h3_0rtt" and request_emission == "early_data":
            conn.connect(ticket=ticket, early_writes=[(index_sid, request, True)])
            first_early = next(
                e for e in conn.events.find("datagram_sent") if e["ptype"] == "early_data"
            )
            ttfrs_ms = (first_early["t"] - conn.t_first_send) * 1000.0
            early_used = conn.early_data_accepted is True
            if early_used and not _request_in_first_flight(conn, index_sid):
                raise VisitError("accepted early data did not leave in the first flight")
            if not early_used:
                # the transport replayed the request after the handshake
                ttfrs_ms = (conn.t_ready - conn.t_first_send) * 1000.0
        else:
            conn.connect(ticket=ticket if mode == "h3_0rtt" else None)
            conn.write_stream(index_sid, request, fin=True)
            ttfrs_ms = (time.monotonic() - conn.t_first_send) * 1000.0
            early_used = False
        connect_ms = (conn.t_ready - conn.t_first_send) * 1000.0

        status, index_body = _parse_h3_response(conn.read_stream(index_sid, timeout=timeout))
        if status != 200:
            raise VisitError(f"index fetch returned :status {status}")
        manifest = parse_manifest(index_body)

        body_bytes = len(index_body)
        asset_sids = []
        for asset in manifest.assets:
            sid = conn.open_stream()
            conn.write_stream(sid, h3lite.build_request(addrs.server_name, asset.path), fin=True)
            asset_sids.append(sid)
        if asset_sids:
            conn.wait_streams_fin(asset_sids, timeout=timeout)
            for sid in asset_sids:
                status, body = _parse_h3_response(bytes(conn.streams[sid].buffer))
                if status != 200:
                    raise VisitError(f"asset fetch returned :status {status}")
                body_bytes += len(body)
        fetch_ms = (time.monotonic() - conn.t_first_send) * 1000.0 + render_cost_ms
        return FetchResult(
            connect_ms=connect_ms,
            ttfrs_ms=ttfrs_ms,
            fetch_ms=fetch_ms,
            early_data_used=early_used,
            manifest=manifest,
            body_bytes=body_bytes,
            tickets=list(conn.tickets),
        )
    except TransportError as exc:
        raise VisitError(f"H3 fetch failed: {exc}") from exc
    finally:
        conn.close()


# --- whole visits -------------------------------------------------------------------


def _base_record(combo: ProtocolCombo, profile: AccessProfile, page_id: str, emission: str) -> VisitRecord:
    return VisitRecord(
        ts_unix_ms=int(time.time() * 1000),
        profile=profile.name,
        page=page_id,
        combo_dns=combo.dns,
        combo_web=combo.web,
        coalesced=combo.coalesced,
        coalesce_mode=combo.coalesce_mode,
        request_emission=emission,
    )


def visit(
    combo: ProtocolCombo,
    profile: AccessProfile,
    page_id: str,
    addrs: ServiceAddresses,
    ticket_cache: TicketCache | None = None,
    request_emission: str = "after_handshake",
    timeout: float = DEFAULT_TIMEOUT_S,
    query_type: str = "A",
    render_cost_ms: float = 0.0,
) -> VisitRecord:
    """Sequential resolve-then-fetch; coalesced combos route to visit_coalesced."""
    if combo.coalesced:
        return visit_coalesced(
            combo.coalesce_mode, profile, page_id, addrs,
            timeout=timeout, render_cost_ms=render_cost_ms,
        )
    record = _base_record(combo, profile, page_id, request_emission)
    cache = ticket_cache if ticket_cache is not None else TicketCache()
    try:
        with _gc_paused():
            record = _run_visit(record, combo, profile, page_id, addrs, cache,
                                request_emission, timeout, query_type, render_cost_ms)
    except (VisitError, TransportError, OSError) as exc:
        record.failed = True
        record.fail_reason = str(exc) or type(exc).__name__
    record.normalize(profile)
    return record


def _run_visit(record, combo, profile, page_id, addrs, cache,
               request_emission, timeout, query_type, render_cost_ms) -> VisitRecord:
    resolution = resolve(combo.dns, addrs.server_name, addrs, timeout, query_type)
    cache.put_all(resolution.tickets)
    record.dns_handshake_ms = resolution.handshake_ms
    record.dns_query_ms = resolution.query_ms
    record.dns_lookup_ms = resolution.lookup_ms

    # let the resolver connection's teardown drain through the relay before
    # the fetch starts; the gap sits outside both measured windows
    time.sleep(min(0.06, profile.rtt_ms / 2000.0 + 0.002))

    ticket = None
    if combo.web == "h3_0rtt":
        ticket = cache.take(addrs.server_name)
        if ticket is None:
            raise VisitError("no primed session ticket for a 0-RTT visit")
    fetched = fetch_h3(
        (resolution.addresses[0], addrs.quic[1]),
        addrs,
        f"/{page_id}/index.txt",
        mode=combo.web,
        ticket=ticket,
        request_emission=request_emission,
        timeout=timeout,
        render_cost_ms=render_cost_ms,
    )
    cache.put_all(fetched.tickets)
    record.connect_ms = fetched.connect_ms
    record.ttfrs_ms = fetched.ttfrs_ms
    record.fetch_ms = fetched.fetch_ms
    record.early_data_used = fetched.early_data_used
    record.plt_ms = record.dns_lookup_ms + record.fetch_ms
    return record


def visit_coalesced(
    mode: str,
    profile: AccessProfile,
    page_id: str,
    addrs: ServiceAddresses,
    timeout: float = DEFAULT_TIMEOUT_S,
    render_cost_ms: float = 0.0,
) -> VisitRecord:
    """One doq-h3 connection carrying the DNS query and the whole page fetch.

    Paper mode opens the client control stream only after the DNS exchange and
    waits for the server's SETTINGS before the first GET (three round-trips to
    the request); optimized mode opens control streams right at the handshake
    and does not wait, saving a full round-trip.
    """
    if mode not in COALESCE_MODES:
        raise ValueError(f"mode must be one of {COALESCE_MODES}")
    combo = ProtocolCombo("doq", "h3_0rtt", coalesced=True, coalesce_mode=mode)
    record = _base_record(combo, profile, page_id, "after_handshake")
    record.single_connection = True
    conn = ClientConnection(
        addrs.quic,
        server_name=addrs.server_name,
        alpn="doq-h3",
        pinned_fingerprint=addrs.fingerprint,
        timeout=timeout,
    )
    try:
        with _gc_paused():
            _run_coalesced(record, conn, mode, page_id, addrs, timeout, render_cost_ms)
    except (VisitError, TransportError, OSError) as exc:
        record.failed = True
        record.fail_reason = str(exc) or type(exc).__name__
    finally:
        conn.close()
    record.normalize(profile)
    return record


def _run_coalesced(record, conn, mode, page_id, addrs, timeout, render_cost_ms) -> None:
    def server_settings_seen() -> bool:
        for sid, stream in conn.streams.items():
            if sid % 4 == 3 and stream.buffer:
                return True
        return False

    def send_client_settings() -> None:
        control = conn.open_uni_stream()
        conn.write_stream(
            control,
            h3lite.varint_encode(h3lite.STREAM_CONTROL)
            + h3lite.build_settings({h3lite.SETTINGS_QPACK_MAX_TABLE_CAPACITY: 0}),
        )

    conn.connect()
    record.connect_ms = (conn.t_ready - conn.t_first_send) * 1000.0
    if mode == "optimized":
        send_client_settings()

    # DNS on a tagged stream
    t0 = time.monotonic()
    query = dnswire.encode(dnswire.make_query(addrs.server_name, dnswire.QTYPE_A, id=0))
    dns_sid = conn.open_stream()
    conn.write_stream(
        dns_sid,
        bytes([h3lite.TAG_COALESCED_DNS]) + len(query).to_bytes(2, "big") + query,
        fin=True,
    )
    raw = conn.read_stream(dns_sid, timeout=timeout)
    want = int.from_bytes(raw[:2], "big")
    _answer_addresses(dnswire.decode(raw[2 : 2 + want]))
    dns_ms = (time.monotonic() - t0) * 1000.0
    record.dns_handshake_ms = 0.0
    record.dns_query_ms = dns_ms
    record.dns_lookup_ms = dns_ms

    if mode == "paper":
        send_client_settings()
        conn.pump_until(server_settings_seen, timeout=timeout)

    index_sid = conn.open_stream()
    conn.write_stream(
        index_sid,
        bytes([h3lite.TAG_REQUEST]) + h3lite.build_request(addrs.server_name, f"/{page_id}/index.txt"),
        fin=True,
    )
    record.ttfrs_ms = (time.monotonic() - conn.t_first_send) * 1000.0

    status, index_body = _parse_h3_response(conn.read_stream(index_sid, timeout=timeout))
    if status != 200:
        raise VisitError(f"index fetch returned :status {status}")
    manifest = parse_manifest(index_body)
    asset_sids = []
    for asset in manifest.assets:
        sid = conn.open_stream()
        conn.write_stream(
            sid,
            bytes([h3lite.TAG_REQUEST]) + h3lite.build_request(addrs.server_name, asset.path),
            fin=True,
        )
        asset_sids.append(sid)
    if asset_sids:
        conn.wait_streams_fin(asset_sids, timeout=timeout)
        for sid in asset_sids:
            status, _body = _parse_h3_response(bytes(conn.streams[sid].buffer))
            if status != 200:
                raise VisitError(f"asset fetch returned :status {status}")
    record.fetch_ms = (time.monotonic() - conn.t_first_send) * 1000.0 + render_cost_ms
    record.plt_ms = record.fetch_ms  # single connection: DNS time is inside the fetch


def prime_ticket(
    addrs: ServiceAddresses,
    ticket_cache: TicketCache,
    timeout: float = DEFAULT_TIMEOUT_S,
) -> TicketGrant:
    """Unmeasured H3 connection whose only purpose is collecting a fresh ticket."""
    conn = ClientConnection(
        addrs.quic,
        server_name=addrs.server_name,
        alpn="h3",
        pinned_fingerprint=addrs.fingerprint,
        timeout=timeout,
    )
    try:
        conn.connect()
        conn.pump_until(lambda: bool(conn.tickets), timeout=timeout)
        grant = conn.tickets[0]
        ticket_cache.put(grant)
        return grant
    except TransportError as exc:
        raise VisitError(f"ticket priming failed: {exc}") from exc
    finally:
        conn.close()
