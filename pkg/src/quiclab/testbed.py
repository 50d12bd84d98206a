"""Local testbed wiring: the combined server plus per-profile relay trios.

Every service gets its own relay (two datagram relays for DoUDP and QUIC, one
stream relay for DoH) so all client traffic crosses the emulated access link.
The zone maps the test host to loopback; clients then dial the relay's port at
the resolved address, exactly as the campaign driver expects.
"""

from __future__ import annotations

import os
import tempfile

from .corpus import generate_corpus
from .emulink import DatagramRelay, StreamRelay, start_datagram_relay, start_stream_relay
from .endpoint import ContentStore, EndpointConfig, TestbedServer, ZoneStore
from .scenario import AccessProfile
from .visit import ServiceAddresses

__all__ = ["LocalTestbed", "RelayTrio"]

SERVER_NAME = "test.example"


class RelayTrio:
    """The three relays carrying one profile's traffic."""

    def __init__(self, profile: AccessProfile, server: TestbedServer, ca_pem: str) -> None:
        self.profile = profile
        self.dns_relay: DatagramRelay = start_datagram_relay(profile, server.udp_address)
        self.quic_relay: DatagramRelay = start_datagram_relay(profile, server.quic_address)
        self.tls_relay: StreamRelay = start_stream_relay(profile, server.tls_address)
        self.addresses = ServiceAddresses(
            udp=self.dns_relay.listen_address,
            tls=self.tls_relay.listen_address,
            quic=self.quic_relay.listen_address,
            fingerprint=server.fingerprint,
            server_name=SERVER_NAME,
            tls_ca_pem=ca_pem,
        )

    def shutdown(self) -> None:
        self.dns_relay.shutdown()
        self.quic_relay.shutdown()
        self.tls_relay.shutdown()


class LocalTestbed:
    """Combined server on loopback plus relays started per profile on demand."""

    def __init__(
        self,
        corpus_root: str | None = None,
        seed: int = 1,
        settings_policy: str = "deferred",
        early_data: bool = True,
    ) -> None:
        self._tmp = tempfile.TemporaryDirectory(prefix="quiclab-testbed-")
        self.corpus_root = corpus_root or os.path.join(self._tmp.name, "corpus")
        if not os.path.isdir(self.corpus_root) or not os.listdir(self.corpus_root):
            generate_corpus(self.corpus_root, seed)
        self.server = TestbedServer(
            EndpointConfig(
                zone=ZoneStore.from_records({SERVER_NAME: "127.0.0.1"}),
                content=ContentStore.from_directory(self.corpus_root),
                settings_policy=settings_policy,
                early_data=early_data,
            )
        )
        self.ca_pem, _ = self.server.identity.tls_pem_files(self._tmp.name)
        self._trios: list[RelayTrio] = []
        self._started = False

    def start(self) -> "LocalTestbed":
        self.server.start()
        self._started = True
        return self

    def relays_for(self, profile: AccessProfile) -> RelayTrio:
        trio = RelayTrio(profile, self.server, self.ca_pem)
        self._trios.append(trio)
        return trio

    def direct_addresses(self) -> ServiceAddresses:
        """Addresses bypassing any relay (zero emulated delay)."""
        return ServiceAddresses(
            udp=self.server.udp_address,
            tls=self.server.tls_address,
            quic=self.server.quic_address,
            fingerprint=self.server.fingerprint,
            server_name=SERVER_NAME,
            tls_ca_pem=self.ca_pem,
        )

    def stop(self) -> None:
        for trio in self._trios:
            trio.shutdown()
        self._trios.clear()
        if self._started:
            self.server.stop()
            self._started = False
        self._tmp.cleanup()

    def __enter__(self) -> "LocalTestbed":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
