import time

import pytest

from quiclab.transport import (
    ClientConnection,
    HandshakeError,
    ServerIdentity,
    TicketKeyring,
    TransportServer,
    TransportServerConfig,
)


class EchoApp:
    """Echoes every finished stream back on the same stream."""

    def __init__(self):
        self.connections = []
        self.early_streams = []

    def on_connection(self, conn):
        self.connections.append(conn)

    def on_stream_data(self, conn, stream_id, data, fin):
        if fin:
            if not conn.handshake_confirmed:
                self.early_streams.append((conn, stream_id))
            conn.write_stream(stream_id, bytes(conn.streams[stream_id].buffer), fin=True)


IDENTITY = ServerIdentity.generate(("test.example", "alt.example"))


@pytest.fixture
def server():
    app = EchoApp()
    config = TransportServerConfig(
        identity=IDENTITY, keyring=TicketKeyring(), alpns=("doq", "h3", "doq-h3")
    )
    srv = TransportServer(("127.0.0.1", 0), config, app)
    srv.start()
    yield srv, app
    srv.stop()


def _client(srv, alpn="h3", name="test.example", fingerprint=None):
    return ClientConnection(
        srv.address,
        server_name=name,
        alpn=alpn,
        pinned_fingerprint=fingerprint or IDENTITY.fingerprint,
        timeout=5.0,
    )


def test_full_handshake_and_echo(server):
    srv, app = server
    conn = _client(srv)
    conn.connect()
    assert conn.alpn_selected == "h3"
    assert not conn.resumed
    assert conn.t_ready is not None and conn.t_first_send is not None
    sid = conn.open_stream()
    conn.write_stream(sid, b"ping", fin=True)
    assert conn.read_stream(sid) == b"ping"
    conn.close()


def test_large_transfer_chunks_and_reassembles(server):
    srv, _ = server
    conn = _client(srv)
    conn.connect()
    blob = bytes(range(256)) * 400  # 102400 bytes
    sid = conn.open_stream()
    conn.write_stream(sid, blob, fin=True)
    assert conn.read_stream(sid) == blob
    sent_sizes = [e["size"] for e in conn.events.find("datagram_sent") if e["ptype"] == "app_data"]
    assert len(sent_sizes) >= 80  # chunked, not one giant datagram
    conn.close()


def test_ticket_issued_after_handshake(server):
    srv, _ = server
    conn = _client(srv)
    conn.connect()
    sid = conn.open_stream()
    conn.write_stream(sid, b"x", fin=True)
    conn.read_stream(sid)
    conn.pump_until(lambda: bool(conn.tickets), timeout=5)
    grant = conn.tickets[0]
    assert grant.server_name == "test.example"
    assert grant.ticket and grant.token and grant.psk
    conn.close()


def _get_ticket(srv, alpn="h3"):
    conn = _client(srv, alpn=alpn)
    conn.connect()
    sid = conn.open_stream()
    conn.write_stream(sid, b"prime", fin=True)
    conn.read_stream(sid)
    conn.pump_until(lambda: bool(conn.tickets), timeout=5)
    grant = conn.tickets[0]
    conn.close()
    return grant


def test_psk_resumption_skips_certificate(server):
    srv, _ = server
    grant = _get_ticket(srv)
    conn = _client(srv)
    conn.connect(ticket=grant)
    assert conn.resumed
    sid = conn.open_stream()
    conn.write_stream(sid, b"resumed", fin=True)
    assert conn.read_stream(sid) == b"resumed"
    # resumed server flight carries no certificate, so it is much smaller
    flight = [e for e in conn.events.find("datagram_received") or []] # noqa: F841
    conn.close()


def test_cross_alpn_resumption_and_early_data(server):
    srv, app = server
    grant = _get_ticket(srv, alpn="doq")  # ticket obtained under the DNS role
    conn = _client(srv, alpn="h3")
    sid = conn.open_stream()
    conn.connect(ticket=grant, early_writes=[(sid, b"early-request", True)])
    assert conn.resumed
    assert conn.early_data_accepted is True
    assert conn.read_stream(sid) == b"early-request"
    # the request left in the very first flight, before anything was received
    first_flight = [e for e in conn.events.find("datagram_sent") if e["flight"] == 0]
    early = [e for e in first_flight if e["ptype"] == "early_data"]
    assert early and any(
        f.get("stream_id") == sid and f["len"] == len(b"early-request")
        for e in early
        for f in e["frames"]
    )
    assert app.early_streams  # server handled it before handshake confirmation
    conn.close()


def test_early_data_rejected_replays_transparently(server):
    srv, _ = server
    grant = _get_ticket(srv)
    srv.config.keyring = TicketKeyring()  # sealing keys lost -> full handshake
    conn = _client(srv)
    sid = conn.open_stream()
    conn.connect(ticket=grant, early_writes=[(sid, b"req", True)])
    assert conn.early_data_accepted is False
    assert not conn.resumed
    assert conn.read_stream(sid) == b"req"  # replayed after the handshake
    conn.close()


def test_early_data_disabled_by_server_config():
    app = EchoApp()
    config = TransportServerConfig(
        identity=IDENTITY, keyring=TicketKeyring(), alpns=("h3",), early_data=False
    )
    srv = TransportServer(("127.0.0.1", 0), config, app)
    srv.start()
    try:
        grant = _get_ticket(srv)
        conn = _client(srv)
        sid = conn.open_stream()
        conn.connect(ticket=grant, early_writes=[(sid, b"req", True)])
        assert conn.early_data_accepted is False
        assert conn.resumed  # PSK still fine, only early data refused
        assert conn.read_stream(sid) == b"req"
        conn.close()
    finally:
        srv.stop()


def test_alpn_mismatch_aborts():
    app = EchoApp()
    config = TransportServerConfig(identity=IDENTITY, keyring=TicketKeyring(), alpns=("doq",))
    srv = TransportServer(("127.0.0.1", 0), config, app)
    srv.start()
    try:
        conn = _client(srv, alpn="h3")
        with pytest.raises(HandshakeError, match="ALPN|aborted"):
            conn.connect()
    finally:
        srv.stop()


def test_pinned_fingerprint_mismatch_fails(server):
    srv, _ = server
    conn = _client(srv, fingerprint=b"\x00" * 32)
    with pytest.raises(HandshakeError, match="pinned"):
        conn.connect()


def test_unknown_server_name_aborts(server):
    srv, _ = server
    conn = _client(srv, name="other.example")
    with pytest.raises(HandshakeError):
        conn.connect()


def test_stream_reset_surfaces_as_error(server):
    srv, app = server
    conn = _client(srv)
    conn.connect()
    sid = conn.open_stream()
    conn.write_stream(sid, b"data", fin=False)
    deadline = time.monotonic() + 5
    while not (app.connections and sid in app.connections[-1].streams):
        assert time.monotonic() < deadline, "server never saw the stream"
        time.sleep(0.002)
    app.connections[-1].reset_stream(sid, code=0x77)
    with pytest.raises(Exception, match="reset"):
        conn.read_stream(sid, timeout=5)
    conn.close()


def test_first_flight_never_answered_with_retry(server):
    srv, app = server
    conn = _client(srv)
    conn.connect()
    sid = conn.open_stream()
    conn.write_stream(sid, b"x", fin=True)
    conn.read_stream(sid)
    server_conn = app.connections[-1]
    sent_types = [e["ptype"] for e in server_conn.events.find("datagram_sent")]
    assert sent_types[0] == "server_flight"
    assert all(t in {"server_flight", "app_data"} for t in sent_types)
    conn.close()


def test_retry_validation_cannot_be_enabled():
    with pytest.raises(ValueError):
        TransportServerConfig(
            identity=IDENTITY, keyring=TicketKeyring(), alpns=("h3",), retry_validation=True
        )


def test_resumed_flight_smaller_than_full(server):
    srv, _ = server
    full = _client(srv)
    full.connect()
    grant = _get_ticket(srv)
    resumed = _client(srv)
    resumed.connect(ticket=grant)
    full.close()
    resumed.close()

    def flight_size(conn):
        return next(
            e["size"]
            for e in conn.events.find("datagram_received_raw")
            if e["ptype"] == "server_flight"
        )

    # the full flight carries the certificate chain; the resumed one does not
    assert flight_size(full) > flight_size(resumed) + 500


def test_ephemeral_port_reuse_gets_fresh_connection(server):
    """A new connection reusing a previous client's source port must not be
    mistaken for a duplicate of the dead connection."""
    import socket as socketlib

    srv, _ = server
    first = _client(srv)
    first.connect()
    local = first._sock.getsockname()
    first.close()  # releases the ephemeral port

    second = _client(srv)
    second._sock.close()
    sock = socketlib.socket(socketlib.AF_INET, socketlib.SOCK_DGRAM)
    sock.setsockopt(socketlib.SOL_SOCKET, socketlib.SO_REUSEADDR, 1)
    sock.bind(local)
    sock.connect(srv.address)
    second._sock = sock
    second.connect()
    sid = second.open_stream()
    second.write_stream(sid, b"fresh", fin=True)
    assert second.read_stream(sid, timeout=5) == b"fresh"
    second.close()
