"""Userspace network emulation on loopback sockets.

Two relay flavors impose an access profile's one-way delay plus
store-and-forward serialization delay: a datagram relay for all UDP/QUIC
traffic and a byte-stream relay for the TCP path. Each direction models one
shared link: units depart in arrival order, a unit's transmission begins when
the previous one finished, and delivery happens one propagation delay after
transmission ends. Queues are unbounded and lossless; there is no jitter,
reordering, or cross-traffic.

The stream relay additionally holds the first client flight of every
connection for one extra RTT: the kernel answers the TCP handshake locally,
so the delay a real SYN/SYN-ACK would suffer has to be re-applied to the
first payload bytes.

Timing uses a sleep-then-spin wait, keeping per-unit scheduling error well
under a millisecond at the cost of briefly burning a core right before each
release.
"""

from __future__ import annotations

import collections
import selectors
import socket
import threading
import time
from dataclasses import dataclass

from .scenario import AccessProfile, one_way_delay_ms, serialization_delay_ms

__all__ = [
    "RelayEndpoint",
    "DatagramRelay",
    "StreamRelay",
    "start_datagram_relay",
    "start_stream_relay",
]

_SPIN_THRESHOLD = 0.0015  # seconds of sleep left before switching to spinning
_SOCK_BUF = 16 * 1024 * 1024  # page bursts must never overflow a relay socket


def _wait_until(target: float) -> None:
    while True:
        remaining = target - time.monotonic()
        if remaining <= 0:
            return
        if remaining > _SPIN_THRESHOLD:
            time.sleep(remaining - _SPIN_THRESHOLD * 0.7)
        else:
            while time.monotonic() < target:
                time.sleep(0)  # yield the GIL while spinning
            return


@dataclass(frozen=True)
class RelayEndpoint:
    listen_address: tuple[str, int]
    upstream_address: tuple[str, int]
    profile: AccessProfile
    kind: str  # "datagram" | "stream"


class _DirectionLink(threading.Thread):
    """One direction of the emulated access link.

    Arrival order is release order: each queued unit departs when the link
    is free, takes its serialization time, then lands one propagation delay
    later. `send` callbacks run on this thread.
    """

    def __init__(self, name: str, profile: AccessProfile, direction: str) -> None:
        super().__init__(name=name, daemon=True)
        self._one_way_s = one_way_delay_ms(profile) / 1000.0
        self._profile = profile
        self._direction = direction
        self._queue: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self._running = True
        self._last_departure = 0.0

    def submit(self, size: int, action, extra_delay_s: float = 0.0) -> None:
        """Schedule `action` to run after link traversal of `size` bytes."""
        now = time.monotonic()
        ser_s = serialization_delay_ms(size, self._direction, self._profile) / 1000.0
        departure = max(self._last_departure, now + extra_delay_s) + ser_s
        self._last_departure = departure
        release = departure + self._one_way_s
        with self._cond:
            self._queue.append((release, action))
            self._cond.notify()

    def run(self) -> None:
        while True:
            with self._cond:
                while self._running and not self._queue:
                    self._cond.wait(timeout=0.2)
                if not self._running and not self._queue:
                    return
                release, action = self._queue.popleft()
            _wait_until(release)
            try:
                action()
            except OSError:
                pass  # peer went away; relay stays up

    def pending(self) -> int:
        with self._cond:
            return len(self._queue)

    def stop(self, drain: bool) -> None:
        if drain:
            deadline = time.monotonic() + 30.0
            while self.pending() and time.monotonic() < deadline:
                time.sleep(0.005)
        with self._cond:
            self._running = False
            if not drain:
                self._queue.clear()
            self._cond.notify_all()


class DatagramRelay:
    """Bidirectional UDP relay: client <-> listen socket <-> upstream.

    Each distinct client source address gets its own upstream socket, so the
    upstream server observes one peer per client flow.
    """

    def __init__(self, profile: AccessProfile, upstream: tuple[str, int]) -> None:
        self.profile = profile
        self.upstream = upstream
        self._listen = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        self._listen.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, _SOCK_BUF)
        self._listen.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, _SOCK_BUF)
        self._listen.bind(("127.0.0.1", 0))
        self._listen.setblocking(False)
        self._flows: dict[tuple[str, int], socket.socket] = {}
        self._selector = selectors.DefaultSelector()
        self._selector.register(self._listen, selectors.EVENT_READ, ("listen", None))
        self._up = _DirectionLink("relay-up", profile, "up")
        self._down = _DirectionLink("relay-down", profile, "down")
        self._running = True
        self._closed = False
        self._reader = threading.Thread(target=self._read_loop, name="relay-reader", daemon=True)
        self._up.start()
        self._down.start()
        self._reader.start()

    @property
    def listen_address(self) -> tuple[str, int]:
        return self._listen.getsockname()

    @property
    def endpoint(self) -> RelayEndpoint:
        return RelayEndpoint(self.listen_address, self.upstream, self.profile, "datagram")

    def _flow_socket(self, client: tuple[str, int]) -> socket.socket:
        sock = self._flows.get(client)
        if sock is None:
            sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_RCVBUF, _SOCK_BUF)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_SNDBUF, _SOCK_BUF)
            sock.connect(self.upstream)
            sock.setblocking(False)
            self._flows[client] = sock
            self._selector.register(sock, selectors.EVENT_READ, ("flow", client))
        return sock

    def _read_loop(self) -> None:
        while self._running:
            for key, _ in self._selector.select(timeout=0.2):
                role, client = key.data
                try:
                    if role == "listen":
                        data, addr = self._listen.recvfrom(65535)
                        sock = self._flow_socket(addr)
                        self._up.submit(len(data), lambda s=sock, d=data: s.send(d))
                    else:
                        data = key.fileobj.recv(65535)
                        self._down.submit(
                            len(data),
                            lambda d=data, a=client: self._listen.sendto(d, a),
                        )
                except OSError:
                    continue

    def shutdown(self, drain: bool = False) -> None:
        """Stop relaying; with `drain` queued datagrams are delivered first."""
        if self._closed:
            return
        self._up.stop(drain)
        self._down.stop(drain)
        self._up.join(timeout=35)
        self._down.join(timeout=35)
        self._running = False
        self._reader.join(timeout=1)
        self._selector.close()
        self._listen.close()
        for sock in self._flows.values():
            sock.close()
        self._closed = True


class StreamRelay:
    """Bidirectional TCP relay with the same per-direction link model.

    With `hold_first_flight` (the default) the first client chunk of every
    connection waits one extra RTT before entering the uplink. A small pool of
    pre-spawned workers blocks in accept() directly, so the first client bytes
    are picked up without thread-creation or handoff latency.
    """

    _WORKERS = 4

    def __init__(
        self,
        profile: AccessProfile,
        upstream: tuple[str, int],
        hold_first_flight: bool = True,
    ) -> None:
        self.profile = profile
        self.upstream = upstream
        self.hold_first_flight = hold_first_flight
        self._listen = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listen.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listen.bind(("127.0.0.1", 0))
        self._listen.listen(32)
        self._up = _DirectionLink("srelay-up", profile, "up")
        self._down = _DirectionLink("srelay-down", profile, "down")
        self._running = True
        self._closed = False
        self._conn_socks: list[socket.socket] = []
        self._workers = [
            threading.Thread(target=self._worker_loop, name=f"srelay-worker-{i}", daemon=True)
            for i in range(self._WORKERS)
        ]
        self._up.start()
        self._down.start()
        for worker in self._workers:
            worker.start()

    @property
    def listen_address(self) -> tuple[str, int]:
        return self._listen.getsockname()

    @property
    def endpoint(self) -> RelayEndpoint:
        return RelayEndpoint(self.listen_address, self.upstream, self.profile, "stream")

    def _worker_loop(self) -> None:
        # workers block in accept() themselves: the kernel wakes exactly one,
        # and the first client bytes are read without any handoff hop
        while self._running:
            try:
                client, _ = self._listen.accept()
            except OSError:
                return
            client.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._serve(client)

    def _serve(self, client: socket.socket) -> None:
        """Dial upstream, spawn the downlink pipe, run the uplink pipe inline."""
        try:
            remote = socket.create_connection(self.upstream, timeout=5)
        except OSError:
            client.close()  # upstream refused -> client sees a reset
            return
        remote.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._conn_socks += [client, remote]
        threading.Thread(
            target=self._pipe, args=(remote, client, self._down, False), daemon=True
        ).start()
        self._pipe(client, remote, self._up, True)

    def _pipe(self, source: socket.socket, sink: socket.socket, link: _DirectionLink, is_up: bool) -> None:
        first = True
        hold_s = self.profile.rtt_ms / 1000.0 if (is_up and self.hold_first_flight) else 0.0
        while True:
            try:
                chunk = source.recv(65536)
            except OSError:
                chunk = b""
            if not chunk:
                link.submit(0, lambda s=sink: s.shutdown(socket.SHUT_WR))
                return
            link.submit(len(chunk), lambda s=sink, c=chunk: s.sendall(c), extra_delay_s=hold_s if first else 0.0)
            first = False

    def shutdown(self, drain: bool = False) -> None:
        if self._closed:
            return
        self._up.stop(drain)
        self._down.stop(drain)
        self._up.join(timeout=35)
        self._down.join(timeout=35)
        self._running = False
        self._listen.close()  # wakes every worker blocked in accept()
        for worker in self._workers:
            worker.join(timeout=1)
        for sock in self._conn_socks:
            try:
                sock.close()
            except OSError:
                pass
        self._closed = True


def start_datagram_relay(profile: AccessProfile, upstream: tuple[str, int]) -> DatagramRelay:
    return DatagramRelay(profile, upstream)


def start_stream_relay(
    profile: AccessProfile,
    upstream: tuple[str, int],
    hold_first_flight: bool = True,
) -> StreamRelay:
    return StreamRelay(profile, upstream, hold_first_flight)
