import csv
import json
import os

import pytest

from quiclab_report.cli import main
from quiclab_report.dataset import Dataset, DatasetError
from quiclab_report.render import FigureSpec, render

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")
DATASET = os.path.join(FIXTURES, "dataset.jsonl")
SUMMARY_CSV = os.path.join(FIXTURES, "summary.csv")


def _summary_rows():
    with open(SUMMARY_CSV) as fh:
        return list(csv.DictReader(fh))


def _record_count(profile=None, page=None, combo=None):
    data = Dataset.load(DATASET)
    from quiclab_report.dataset import combo_label

    count = 0
    for rec in data.records:
        if profile and rec["profile"] != profile:
            continue
        if page and rec["page"] != page:
            continue
        if combo and combo_label(rec) != combo:
            continue
        count += 1
    return count


def test_heatmap_cells_match_summary_csv(tmp_path):
    spec = FigureSpec(kind="heatmap", output_path=str(tmp_path / "heatmap.png"))
    result = render(DATASET, spec)
    assert os.path.exists(result.path)
    rows = {(r["page"], r["profile"], r["combo"]): float(r["rel_increase"]) for r in _summary_rows()}
    checked = 0
    for (page, profile, combo), rel in result.numbers["cells"].items():
        expected = rows[(page, profile, combo)]
        assert abs(rel - expected) <= 0.001  # 0.1 percentage points
        checked += 1
    assert checked >= 6


def test_cdf_step_counts_equal_record_counts(tmp_path):
    spec = FigureSpec(kind="cdf_plt_grid", output_path=str(tmp_path / "grid.png"))
    result = render(DATASET, spec)
    for (profile, page, combo), steps in result.numbers["step_counts"].items():
        assert steps == _record_count(profile, page, combo)

    dns_spec = FigureSpec(kind="cdf_dns", output_path=str(tmp_path / "dns.png"))
    dns_result = render(DATASET, dns_spec)
    data = Dataset.load(DATASET)
    for (profile, dns), steps in dns_result.numbers["step_counts"].items():
        expected = sum(
            1
            for r in data.records
            if r["profile"] == profile and r["combo_dns"] == dns
            and not r.get("single_connection")
        )
        assert steps == expected


def test_cdf_single_record_single_step(tmp_path):
    one = json.loads(open(DATASET).readline())
    path = tmp_path / "one.jsonl"
    path.write_text(json.dumps(one) + "\n")
    spec = FigureSpec(kind="cdf_plt_grid", output_path=str(tmp_path / "one.png"))
    result = render(str(path), spec)
    assert list(result.numbers["step_counts"].values()) == [1]


def test_summary_md_restates_csv_medians(tmp_path):
    spec = FigureSpec(kind="summary_md", output_path=str(tmp_path / "summary.md"))
    result = render(DATASET, spec)
    text = open(result.path).read()
    rows = _summary_rows()
    for row in rows:
        med, rel = result.numbers["rows"][(row["page"], row["profile"], row["combo"])]
        assert abs(med - float(row["median_ms"])) <= 0.1  # within 0.1 ms
        assert abs(rel - float(row["rel_increase"])) <= 0.001
        assert f"| {row['profile']} | {row['combo']} |" in text
    # combos appear ordered by median within each (page, profile) block
    for page in {r["page"] for r in rows}:
        block = text.split(f"## page: {page}")[1].split("##")[0]
        medians = [
            float(line.split("|")[3]) for line in block.splitlines() if line.startswith("| fibre")
        ]
        assert medians == sorted(medians)


def test_rerender_identical_numbers(tmp_path):
    spec_a = FigureSpec(kind="heatmap", output_path=str(tmp_path / "a.png"))
    spec_b = FigureSpec(kind="heatmap", output_path=str(tmp_path / "b.png"))
    assert render(DATASET, spec_a).numbers == render(DATASET, spec_b).numbers


def test_unsupported_schema_version_rejected(tmp_path):
    rec = json.loads(open(DATASET).readline())
    rec["schema_version"] = 99
    path = tmp_path / "bad.jsonl"
    path.write_text(json.dumps(rec) + "\n")
    with pytest.raises(DatasetError, match="schema_version"):
        Dataset.load(str(path))


def test_empty_filter_rejected(tmp_path):
    spec = FigureSpec(
        kind="cdf_plt_grid", output_path=str(tmp_path / "x.png"), profiles=["fibre"],
        pages=["single_doc"], combos=["doh+h3_1rtt"],
    )
    render(DATASET, spec)  # existing selection works
    with pytest.raises(DatasetError, match="unknown"):
        render(DATASET, FigureSpec(
            kind="cdf_plt_grid", output_path=str(tmp_path / "y.png"), profiles=["dialup"],
        ))


def test_failed_records_never_plotted(tmp_path):
    records = [json.loads(line) for line in open(DATASET)]
    failed = dict(records[0])
    failed.update(failed=True, fail_reason="synthetic", plt_ms=None, plt_rtt=None)
    path = tmp_path / "with_failure.jsonl"
    with open(path, "w") as fh:
        for rec in records + [failed]:
            fh.write(json.dumps(rec) + "\n")
    spec = FigureSpec(kind="cdf_plt_grid", output_path=str(tmp_path / "f.png"))
    result = render(str(path), spec)
    clean = render(DATASET, FigureSpec(kind="cdf_plt_grid", output_path=str(tmp_path / "g.png")))
    assert result.numbers == clean.numbers


def test_cli_renders_all_kinds(tmp_path, capsys):
    rc = main(["--in", DATASET, "--figures", str(tmp_path / "figs")])
    assert rc == 0
    produced = sorted(os.listdir(tmp_path / "figs"))
    assert produced == [
        "cdf_connect.png", "cdf_dns.png", "cdf_plt_grid.png", "heatmap.png", "summary_md.md",
    ]
