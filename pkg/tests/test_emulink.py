import socket
import statistics
import threading
import time

import pytest

from quiclab.emulink import start_datagram_relay, start_stream_relay
from quiclab.scenario import (
    AccessProfile,
    builtin_profiles,
    one_way_delay_ms,
    profile_by_name,
    serialization_delay_ms,
)

FAST = AccessProfile("fast", 0.0001, 10000.0, 10000.0)


@pytest.fixture
def udp_sink():
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind(("127.0.0.1", 0))
    sock.settimeout(5)
    yield sock
    sock.close()


def _drain(sock, n):
    out = []
    for _ in range(n):
        data, _ = sock.recvfrom(65535)
        out.append((time.monotonic(), data))
    return out


def test_passthrough_bound_near_zero_profile(udp_sink):
    relay = start_datagram_relay(FAST, udp_sink.getsockname())
    client = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        t0 = time.monotonic()
        client.sendto(b"ping", relay.listen_address)
        udp_sink.recvfrom(65535)
        assert (time.monotonic() - t0) * 1000 < 2.0
    finally:
        client.close()
        relay.shutdown()


@pytest.mark.parametrize("profile_name", [p.name for p in builtin_profiles()])
def test_isolated_datagram_latency_calibration(profile_name, udp_sink):
    """Median one-way latency of isolated 100 B datagrams matches the analytic
    delay within max(1 ms, 5%), in both directions."""
    profile = profile_by_name(profile_name)
    relay = start_datagram_relay(profile, udp_sink.getsockname())
    client = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    client.settimeout(5)
    try:
        up_errs, down_errs = [], []
        expected_up = one_way_delay_ms(profile) + serialization_delay_ms(100, "up", profile)
        expected_down = one_way_delay_ms(profile) + serialization_delay_ms(100, "down", profile)
        for _ in range(7):
            t0 = time.monotonic()
            client.sendto(b"x" * 100, relay.listen_address)
            _, addr = udp_sink.recvfrom(65535)
            up_errs.append((time.monotonic() - t0) * 1000 - expected_up)
            time.sleep(0.01)  # keep datagrams isolated
            t0 = time.monotonic()
            udp_sink.sendto(b"y" * 100, addr)
            client.recvfrom(65535)
            down_errs.append((time.monotonic() - t0) * 1000 - expected_down)
            time.sleep(0.01)
        tol_up = max(1.0, 0.05 * expected_up)
        tol_down = max(1.0, 0.05 * expected_down)
        assert abs(statistics.median(up_errs)) < tol_up
        assert abs(statistics.median(down_errs)) < tol_down
    finally:
        client.close()
        relay.shutdown()


def test_back_to_back_datagrams_spaced_by_serialization(udp_sink):
    dsl = profile_by_name("dsl")
    relay = start_datagram_relay(dsl, udp_sink.getsockname())
    client = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        gaps = []
        for _ in range(5):
            client.sendto(b"a" * 1250, relay.listen_address)
            client.sendto(b"b" * 1250, relay.listen_address)
            arrivals = _drain(udp_sink, 2)
            gaps.append((arrivals[1][0] - arrivals[0][0]) * 1000)
            time.sleep(0.01)  # isolate the pairs
        gap_ms = statistics.median(gaps)
        assert gap_ms >= 0.93  # at least one serialization time apart
        # store-and-forward: the gap is the uplink serialization time, not an RTT
        assert gap_ms == pytest.approx(serialization_delay_ms(1250, "up", dsl), abs=1.5)
    finally:
        client.close()
        relay.shutdown()


def test_datagrams_delivered_in_order(udp_sink):
    relay = start_datagram_relay(FAST, udp_sink.getsockname())
    client = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        for i in range(100):
            client.sendto(i.to_bytes(2, "big"), relay.listen_address)
        got = [int.from_bytes(d, "big") for _, d in _drain(udp_sink, 100)]
        assert got == list(range(100))
    finally:
        client.close()
        relay.shutdown()


def test_shutdown_idempotent_and_immediate(udp_sink):
    relay = start_datagram_relay(FAST, udp_sink.getsockname())
    t0 = time.monotonic()
    relay.shutdown()
    relay.shutdown()  # second call is a no-op
    assert time.monotonic() - t0 < 1.0


def test_shutdown_drain_delivers_queued_unit(udp_sink):
    slow = AccessProfile("slowlink", 60.0, 100.0, 100.0)
    relay = start_datagram_relay(slow, udp_sink.getsockname())
    client = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        client.sendto(b"queued", relay.listen_address)
        time.sleep(0.005)  # let the reader enqueue it
        relay.shutdown(drain=True)
        data, _ = udp_sink.recvfrom(65535)
        assert data == b"queued"
    finally:
        client.close()


def _echo_server():
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind(("127.0.0.1", 0))
    srv.listen(4)

    def loop():
        while True:
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            threading.Thread(target=_echo_conn, args=(conn,), daemon=True).start()

    threading.Thread(target=loop, daemon=True).start()
    return srv


def _echo_conn(conn):
    while True:
        try:
            data = conn.recv(65536)
        except OSError:
            return
        if not data:
            conn.close()
            return
        conn.sendall(data)


def _stream_echo_ms(relay):
    client = socket.create_connection(relay.listen_address, timeout=5)
    client.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    try:
        t0 = time.monotonic()
        client.sendall(b"hello")
        assert client.recv(64) == b"hello"
        return (time.monotonic() - t0) * 1000
    finally:
        client.close()


def test_stream_relay_echo_includes_handshake_hold():
    srv = _echo_server()
    fibre = profile_by_name("fibre")
    relay = start_stream_relay(fibre, srv.getsockname(), hold_first_flight=True)
    try:
        took = statistics.median(_stream_echo_ms(relay) for _ in range(3))
        assert took == pytest.approx(2 * fibre.rtt_ms, abs=3.0)
    finally:
        relay.shutdown()
        srv.close()


def test_stream_relay_echo_without_hold():
    srv = _echo_server()
    fibre = profile_by_name("fibre")
    relay = start_stream_relay(fibre, srv.getsockname(), hold_first_flight=False)
    try:
        took = statistics.median(_stream_echo_ms(relay) for _ in range(3))
        assert took == pytest.approx(fibre.rtt_ms, abs=3.0)
    finally:
        relay.shutdown()
        srv.close()


def test_stream_relay_zero_delay_fast():
    srv = _echo_server()
    relay = start_stream_relay(FAST, srv.getsockname(), hold_first_flight=False)
    try:
        assert _stream_echo_ms(relay) < 2.0
    finally:
        relay.shutdown()
        srv.close()


def test_stream_relay_upstream_refused_resets_client():
    # a bound-but-closed port nobody listens on
    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    probe.bind(("127.0.0.1", 0))
    dead_addr = probe.getsockname()
    probe.close()
    relay = start_stream_relay(FAST, dead_addr, hold_first_flight=False)
    try:
        client = socket.create_connection(relay.listen_address, timeout=5)
        client.settimeout(5)
        try:
            assert client.recv(16) == b""  # closed or reset
        except ConnectionError:
            pass
        finally:
            client.close()
    finally:
        relay.shutdown()


def test_latency_independent_of_payload_content(udp_sink):
    """Same length, different bytes: the schedule must not care."""
    import os

    dsl = profile_by_name("dsl")
    relay = start_datagram_relay(dsl, udp_sink.getsockname())
    client = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        def one_way(payload):
            t0 = time.monotonic()
            client.sendto(payload, relay.listen_address)
            udp_sink.recvfrom(65535)
            return (time.monotonic() - t0) * 1000

        zeros = statistics.median(one_way(b"\x00" * 600) for _ in range(5))
        noise = statistics.median(one_way(os.urandom(600)) for _ in range(5))
        assert abs(zeros - noise) < 1.5
    finally:
        client.close()
        relay.shutdown()
