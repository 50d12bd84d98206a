import json

import pytest

from quiclab.campaign import (
    CampaignConfig,
    format_summary_table,
    median,
    quantile,
    relative_increase,
    run_campaign,
    summarize,
    write_summary_csv,
    SUMMARY_CSV_HEADER,
)
from quiclab.scenario import AccessProfile


def test_median_examples():
    assert median([3, 1, 2]) == 2
    assert median([1, 2, 3, 4]) == 2  # lower median
    assert median([7]) == 7


def test_quantile_nearest_rank():
    values = list(range(10, 101, 10))
    assert quantile(values, 0.25) == 30
    assert quantile(values, 0.5) == 50
    assert quantile(values, 1.0) == 100
    assert quantile(values, 0.0) == 10
    with pytest.raises(ValueError):
        quantile([], 0.5)
    with pytest.raises(ValueError):
        quantile([1], 1.5)


def test_relative_increase_paper_arithmetic():
    assert relative_increase(655.7, 630.4) == pytest.approx(0.0401, abs=0.0005)
    assert relative_increase(669.8, 630.4) == pytest.approx(0.0625, abs=0.0005)
    assert relative_increase(5.0, 5.0) == 0.0
    with pytest.raises(ValueError):
        relative_increase(1.0, 0.0)


def test_config_inserts_baseline_first():
    config = CampaignConfig(combos=["doq+h3_1rtt", "doh+h3_1rtt"], repetitions=1)
    assert config.combos[0] == "doudp+h3_1rtt"
    config = CampaignConfig(combos=["doh+h3_1rtt", "doudp+h3_1rtt"], repetitions=2)
    assert config.combos[0] == "doudp+h3_1rtt" and len(config.combos) == 2


def test_config_rejects_zero_reps():
    with pytest.raises(ValueError):
        CampaignConfig(repetitions=0)


def test_config_from_json(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"profiles": ["fibre"], "repetitions": 2, "seed": 9}))
    config = CampaignConfig.from_json(str(path))
    assert config.profiles == ["fibre"] and config.repetitions == 2


FAST_PROFILE = {"name": "lab0", "rtt_ms": 0.5, "downlink_mbps": 5000.0, "uplink_mbps": 5000.0}


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    """1 profile x 1 page x 2 combos x 3 reps -> 6 records."""
    root = tmp_path_factory.mktemp("campaign")
    profile_file = root / "profiles.json"
    profile_file.write_text(json.dumps([FAST_PROFILE]))
    config = CampaignConfig(
        profiles=["lab0"],
        pages=["single_doc"],
        combos=["doudp+h3_1rtt", "doq+h3_1rtt"],
        repetitions=3,
        seed=5,
        output_path=str(root / "dataset.jsonl"),
        profile_file=str(profile_file),
        timeout_s=5.0,
    )
    paths = run_campaign(config)
    return config, paths


def test_small_campaign_record_count(small_dataset):
    config, paths = small_dataset
    lines = [json.loads(l) for l in open(paths["dataset"]) if l.strip()]
    assert len(lines) == 6
    assert all(rec["schema_version"] == 1 for rec in lines)
    assert {rec["combo_dns"] for rec in lines} == {"doudp", "doq"}
    # interleaved, baseline first within each repetition
    assert [rec["combo_dns"] for rec in lines] == ["doudp", "doq"] * 3


def test_jsonl_schema_fields(small_dataset):
    _, paths = small_dataset
    rec = json.loads(open(paths["dataset"]).readline())
    expected = {
        "schema_version", "ts_unix_ms", "profile", "page", "combo_dns", "combo_web",
        "coalesced", "coalesce_mode", "request_emission", "dns_handshake_ms",
        "dns_query_ms", "dns_lookup_ms", "connect_ms", "ttfrs_ms", "fetch_ms",
        "plt_ms", "early_data_used", "single_connection", "failed", "fail_reason",
        "dns_handshake_rtt", "dns_query_rtt", "dns_lookup_rtt", "connect_rtt",
        "ttfrs_rtt", "fetch_rtt", "plt_rtt",
    }
    assert set(rec) == expected


def test_summary_csv_shape(small_dataset):
    _, paths = small_dataset
    lines = open(paths["summary_csv"]).read().splitlines()
    assert lines[0] == SUMMARY_CSV_HEADER
    assert len(lines) == 3  # header + 2 combos
    baseline = lines[1].split(",")
    assert baseline[2] == "doudp+h3_1rtt" and float(baseline[-1]) == 0.0


def test_summarize_deterministic(small_dataset, tmp_path):
    _, paths = small_dataset
    rows, failures, malformed = summarize(paths["dataset"])
    write_summary_csv(rows, str(tmp_path / "again.csv"))
    assert open(paths["summary_csv"]).read() == open(tmp_path / "again.csv").read()
    assert failures == [] and malformed == []


def test_summary_table_groups_and_footer(small_dataset):
    _, paths = small_dataset
    text = open(paths["summary_table"]).read()
    assert text.startswith("page: single_doc")
    assert "failed visits: 0" in text


def test_summarize_handles_malformed_and_failed(tmp_path):
    good = {
        "profile": "fibre", "page": "p", "combo_dns": "doudp", "combo_web": "h3_1rtt",
        "coalesced": False, "coalesce_mode": None, "plt_ms": 100.0, "plt_rtt": 6.76,
        "failed": False,
    }
    bad_visit = dict(good, failed=True, fail_reason="timeout", plt_ms=None, plt_rtt=None)
    other = dict(good, combo_dns="doq", plt_ms=110.0, plt_rtt=7.43)
    path = tmp_path / "mixed.jsonl"
    with open(path, "w") as fh:
        fh.write(json.dumps(good) + "\n")
        fh.write("this is not json\n")
        fh.write(json.dumps(bad_visit) + "\n")
        fh.write(json.dumps(other) + "\n")
    rows, failures, malformed = summarize(str(path))
    assert malformed == [2]
    assert len(failures) == 1 and failures[0]["fail_reason"] == "timeout"
    by_combo = {r.combo: r for r in rows}
    assert by_combo["doudp+h3_1rtt"].n == 1
    assert by_combo["doq+h3_1rtt"].rel_increase == pytest.approx(0.10)
    table = format_summary_table(rows, failures, malformed)
    assert "failed visits: 1" in table and "timeout" in table


def test_summary_golden_fixture(tmp_path):
    """Frozen dataset -> byte-identical CSV (regression golden)."""
    records = []
    for combo_dns, plts in (("doudp", [100.0, 104.0, 102.0]), ("doh", [130.0, 132.0, 128.0])):
        for plt in plts:
            records.append({
                "profile": "fibre", "page": "single_doc",
                "combo_dns": combo_dns, "combo_web": "h3_1rtt",
                "coalesced": False, "coalesce_mode": None,
                "plt_ms": plt, "plt_rtt": plt / 14.8, "failed": False,
            })
    path = tmp_path / "golden.jsonl"
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    rows, _, _ = summarize(str(path))
    out = tmp_path / "golden.csv"
    write_summary_csv(rows, str(out))
    expected = (
        SUMMARY_CSV_HEADER + "\n"
        "fibre,single_doc,doudp+h3_1rtt,3,102.000,100.000,104.000,4.000,6.8919,0.0000\n"
        "fibre,single_doc,doh+h3_1rtt,3,130.000,128.000,132.000,4.000,8.7838,0.2745\n"
    )
    assert open(out).read() == expected


def test_lab_profile_validation():
    with pytest.raises(ValueError):
        AccessProfile("bad", -1.0, 1.0, 1.0)
