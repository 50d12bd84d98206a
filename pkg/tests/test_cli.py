import json
import re
import subprocess
import sys
import time

import pytest

from quiclab.cli import build_parser, main


def test_parser_rejects_bad_address():
    parser = build_parser()
    with pytest.raises(SystemExit):
        parser.parse_args(["visit", "--combo", "doudp+h3_1rtt", "--profile", "fibre",
                           "--page", "p", "--server", "nonsense", "--pin", "00"])


def test_corpus_gen_cli(tmp_path, capsys):
    rc = main(["corpus", "gen", "--root", str(tmp_path / "c"), "--seed", "3"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "doc_plus_assets: index 18252 B, 4 assets" in out


def test_campaign_run_and_summarize_cli(tmp_path, capsys):
    profile_file = tmp_path / "profiles.json"
    profile_file.write_text(json.dumps([
        {"name": "lab1", "rtt_ms": 0.5, "downlink_mbps": 5000.0, "uplink_mbps": 5000.0},
    ]))
    config = {
        "profiles": ["lab1"],
        "pages": ["single_doc"],
        "combos": ["doudp+h3_1rtt"],
        "repetitions": 2,
        "output_path": str(tmp_path / "ds.jsonl"),
        "profile_file": str(profile_file),
        "timeout_s": 5.0,
    }
    config_path = tmp_path / "config.json"
    config_path.write_text(json.dumps(config))
    rc = main(["campaign", "run", "--config", str(config_path)])
    assert rc == 0
    out = capsys.readouterr().out
    assert "dataset:" in out and "summary_csv:" in out

    rc = main(["campaign", "summarize", "--in", str(tmp_path / "ds.jsonl"),
               "--out", str(tmp_path / "s.csv")])
    assert rc == 0
    assert (tmp_path / "s.csv").read_text().startswith("profile,page,combo,")


@pytest.mark.slow
def test_serve_and_visit_subprocess(tmp_path):
    """End-to-end over the installed console script surface."""
    corpus_root = tmp_path / "corpus"
    assert main(["corpus", "gen", "--root", str(corpus_root), "--seed", "1"]) == 0
    zone = tmp_path / "zone.txt"
    zone.write_text("test.example A 300 127.0.0.1\n")

    server = subprocess.Popen(
        [sys.executable, "-m", "quiclab.cli", "serve",
         "--zone", str(zone), "--root", str(corpus_root),
         "--udp", "127.0.0.1:18853", "--tls", "127.0.0.1:18443",
         "--quic", "127.0.0.1:18784"],
        stdout=subprocess.PIPE, text=True,
    )
    try:
        header = ""
        deadline = time.monotonic() + 10
        while "serving" not in header:
            assert time.monotonic() < deadline
            header += server.stdout.readline()
        pin = re.search(r"pin\s+([0-9a-f]{64})", header).group(1)
        ca = re.search(r"cert\s+(\S+)", header).group(1)

        result = subprocess.run(
            [sys.executable, "-m", "quiclab.cli", "visit",
             "--combo", "doq+h3_1rtt", "--profile", "fibre", "--page", "single_doc",
             "--server", "127.0.0.1:18784", "--udp", "127.0.0.1:18853",
             "--tls", "127.0.0.1:18443", "--pin", pin, "--ca", ca],
            capture_output=True, text=True, timeout=30,
        )
        assert result.returncode == 0, result.stderr
        record = json.loads(result.stdout)
        assert record["failed"] is False
        assert record["plt_ms"] > 0
        # direct connection, no relay: the profile only scales normalization
        assert record["combo_dns"] == "doq"

        coalesced = subprocess.run(
            [sys.executable, "-m", "quiclab.cli", "visit",
             "--combo", "coalesced_paper", "--profile", "fibre", "--page", "doc_plus_assets",
             "--server", "127.0.0.1:18784", "--pin", pin],
            capture_output=True, text=True, timeout=30,
        )
        assert coalesced.returncode == 0, coalesced.stderr
        assert json.loads(coalesced.stdout)["single_connection"] is True
    finally:
        server.terminate()
        server.wait(timeout=5)


def test_relay_cli_banner_and_forwarding(tmp_path):
    import socket

    sink = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sink.bind(("127.0.0.1", 0))
    sink.settimeout(10)
    upstream = f"127.0.0.1:{sink.getsockname()[1]}"
    proc = subprocess.Popen(
        [sys.executable, "-m", "quiclab.cli", "relay", "datagram",
         "--profile", "fibre", "--upstream", upstream],
        stdout=subprocess.PIPE, text=True,
    )
    try:
        banner = proc.stdout.readline()
        m = re.search(r"datagram relay (\S+):(\d+) ->", banner)
        assert m, banner
        listen = (m.group(1), int(m.group(2)))
        client = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        t0 = time.monotonic()
        client.sendto(b"ping", listen)
        data, _ = sink.recvfrom(64)
        took_ms = (time.monotonic() - t0) * 1000
        assert data == b"ping"
        assert 6.0 < took_ms < 12.0  # one-way fibre delay is 7.4 ms
        client.close()
    finally:
        proc.terminate()
        proc.wait(timeout=5)
        sink.close()
