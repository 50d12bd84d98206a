"""Command-line interface.

Subcommands: `serve` (the combined endpoint), `relay` (a standalone emulated
link), `visit` (one measured page visit printed as JSON), `corpus gen`,
`campaign run`, and `campaign summarize`.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

from .campaign import (
    CampaignConfig,
    format_summary_table,
    run_campaign,
    summarize,
    write_summary_csv,
)
from .corpus import generate_corpus
from .emulink import start_datagram_relay, start_stream_relay
from .endpoint import ContentStore, EndpointConfig, TestbedServer, ZoneStore
from .scenario import load_profiles, profile_by_name
from .visit import (
    ProtocolCombo,
    ServiceAddresses,
    TicketCache,
    prime_ticket,
    visit,
)

DEFAULT_UDP = "127.0.0.1:8853"
DEFAULT_TLS = "127.0.0.1:8443"
DEFAULT_QUIC = "127.0.0.1:8784"


def _addr(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host, int(port)


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _cmd_serve(args) -> int:
    zone = ZoneStore.from_file(args.zone)
    content = ContentStore.from_directory(args.root)
    server = TestbedServer(
        EndpointConfig(
            zone=zone,
            content=content,
            settings_policy=args.settings_policy,
            udp_bind=args.udp,
            tls_bind=args.tls,
            quic_bind=args.quic,
        )
    ).start()
    cert_pem, _ = server.identity.tls_pem_files(args.root)
    print(f"doudp   {server.udp_address[0]}:{server.udp_address[1]}")
    print(f"doh     {server.tls_address[0]}:{server.tls_address[1]}")
    print(f"quic    {server.quic_address[0]}:{server.quic_address[1]} (alpns: doq, h3, doq-h3)")
    print(f"cert    {cert_pem}")
    print(f"pin     {server.fingerprint.hex()}")
    print("serving; ctrl-c to stop", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def _cmd_relay(args) -> int:
    profile = profile_by_name(args.profile, load_profiles(args.profiles) if args.profiles else ())
    if args.kind == "datagram":
        relay = start_datagram_relay(profile, args.upstream)
    else:
        relay = start_stream_relay(profile, args.upstream, hold_first_flight=args.hold_first_flight)
    host, port = relay.listen_address
    print(f"{args.kind} relay {host}:{port} -> {args.upstream[0]}:{args.upstream[1]} ({profile.name})")
    print("relaying; ctrl-c to stop", flush=True)
    try:
        while True:
            time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        relay.shutdown(drain=args.drain)
    return 0


def _cmd_visit(args) -> int:
    profile = profile_by_name(args.profile, load_profiles(args.profiles) if args.profiles else ())
    combo = ProtocolCombo.parse(args.combo)
    addrs = ServiceAddresses(
        udp=args.udp,
        tls=args.tls,
        quic=args.server,
        fingerprint=bytes.fromhex(args.pin),
        server_name=args.server_name,
        tls_ca_pem=args.ca,
    )
    cache = TicketCache()
    if combo.web == "h3_0rtt" and not combo.coalesced:
        prime_ticket(addrs, cache, timeout=args.timeout)
    record = visit(
        combo,
        profile,
        args.page,
        addrs,
        ticket_cache=cache,
        request_emission=args.emission,
        timeout=args.timeout,
        query_type=args.query_type,
    )
    print(json.dumps(record.to_dict()))
    return 1 if record.failed else 0


def _cmd_corpus_gen(args) -> int:
    manifests = generate_corpus(args.root, args.seed)
    for m in manifests:
        print(f"{m.page_id}: index {m.index_size} B, {len(m.assets)} assets")
    return 0


def _cmd_campaign_run(args) -> int:
    config = CampaignConfig.from_json(args.config)

    def progress(done, total, record):
        status = "FAIL" if record.failed else "ok"
        print(
            f"[{done}/{total}] {record.profile} {record.page} "
            f"{record.combo.label}: {status}",
            file=sys.stderr,
            flush=True,
        )

    paths = run_campaign(config, progress=progress if args.verbose else None)
    for key, value in paths.items():
        print(f"{key}: {value}")
    return 0


def _cmd_campaign_summarize(args) -> int:
    rows, failures, malformed = summarize(args.infile)
    write_summary_csv(rows, args.out)
    print(format_summary_table(rows, failures, malformed), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quiclab",
        description="QUIC connection-coalescing testbed: encrypted DNS x HTTP/3 measurements",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the combined DNS+content endpoint")
    serve.add_argument("--zone", required=True, help="zone file: <name> <A|AAAA> <ttl> <address>")
    serve.add_argument("--root", required=True, help="content directory (corpus root)")
    serve.add_argument("--udp", type=_addr, default=_addr(DEFAULT_UDP), help="DoUDP bind address")
    serve.add_argument("--tls", type=_addr, default=_addr(DEFAULT_TLS), help="DoH bind address")
    serve.add_argument("--quic", type=_addr, default=_addr(DEFAULT_QUIC), help="QUIC bind address")
    serve.add_argument(
        "--settings-policy", choices=("deferred", "immediate"), default="deferred",
        help="when the doq-h3 role sends its SETTINGS",
    )
    serve.set_defaults(func=_cmd_serve)

    relay = sub.add_parser("relay", help="run one emulated access link")
    relay.add_argument("kind", choices=("datagram", "stream"))
    relay.add_argument("--profile", required=True)
    relay.add_argument("--profiles", help="extra profiles JSON file")
    relay.add_argument("--upstream", type=_addr, required=True)
    relay.add_argument("--hold-first-flight", type=_bool, default=True,
                       help="stream relays: delay the first client flight one RTT (default true)")
    relay.add_argument("--drain", action="store_true", help="deliver queued units on shutdown")
    relay.set_defaults(func=_cmd_relay)

    visit_cmd = sub.add_parser("visit", help="run one measured page visit")
    visit_cmd.add_argument("--combo", required=True, help="e.g. doudp+h3_1rtt or coalesced_paper")
    visit_cmd.add_argument("--profile", required=True, help="profile name for normalization")
    visit_cmd.add_argument("--profiles", help="extra profiles JSON file")
    visit_cmd.add_argument("--page", required=True, help="page id, e.g. doc_plus_assets")
    visit_cmd.add_argument("--server", type=_addr, required=True, help="QUIC address (host:port)")
    visit_cmd.add_argument("--udp", type=_addr, default=_addr(DEFAULT_UDP), help="DoUDP address")
    visit_cmd.add_argument("--tls", type=_addr, default=_addr(DEFAULT_TLS), help="DoH address")
    visit_cmd.add_argument("--pin", required=True, help="server certificate fingerprint (hex)")
    visit_cmd.add_argument("--ca", help="server certificate PEM (needed for DoH)")
    visit_cmd.add_argument("--server-name", default="test.example")
    visit_cmd.add_argument("--emission", choices=("after_handshake", "early_data"),
                           default="after_handshake")
    visit_cmd.add_argument("--query-type", choices=("A", "AAAA", "both"), default="A")
    visit_cmd.add_argument("--timeout", type=float, default=10.0)
    visit_cmd.set_defaults(func=_cmd_visit)

    corpus = sub.add_parser("corpus", help="corpus tools")
    corpus_sub = corpus.add_subparsers(dest="corpus_command", required=True)
    gen = corpus_sub.add_parser("gen", help="generate the three-page corpus")
    gen.add_argument("--root", required=True)
    gen.add_argument("--seed", type=int, default=1)
    gen.set_defaults(func=_cmd_corpus_gen)

    campaign = sub.add_parser("campaign", help="campaign tools")
    campaign_sub = campaign.add_subparsers(dest="campaign_command", required=True)
    run = campaign_sub.add_parser("run", help="run a measurement campaign")
    run.add_argument("--config", required=True, help="campaign config JSON")
    run.add_argument("--verbose", action="store_true", help="per-visit progress on stderr")
    run.set_defaults(func=_cmd_campaign_run)
    summ = campaign_sub.add_parser("summarize", help="summarize a dataset")
    summ.add_argument("--in", dest="infile", required=True, help="dataset JSONL")
    summ.add_argument("--out", required=True, help="summary CSV path")
    summ.set_defaults(func=_cmd_campaign_summarize)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
