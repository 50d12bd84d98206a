"""Experiment orchestration: run the full grid, write the dataset, summarize it.

A campaign iterates profiles × repetitions × combos (baseline first, all
combos back-to-back inside a repetition so drift hits every combo equally),
appends one JSON line per visit as it happens, and finally emits a summary CSV
plus a human-readable table grouped the way the results are usually read:
pages, then profiles by delay, then combos.

Statistics are deliberately simple and implementation-independent:
nearest-rank quantiles on sorted values, the lower median for even-sized
samples, and relative increase computed on medians against the unencrypted
DoUDP + H3 1-RTT baseline.
"""

from __future__ import annotations

import json
import math
import os
import time
from dataclasses import dataclass, field

from .corpus import PAGE_CLASSES
from .scenario import AccessProfile, builtin_profiles, load_profiles, profile_by_name
from .testbed import LocalTestbed
from .visit import (
    BASELINE_COMBO,
    ProtocolCombo,
    TicketCache,
    prime_ticket,
    visit,
)

__all__ = [
    "CampaignConfig",
    "SummaryRow",
    "DEFAULT_COMBOS",
    "median",
    "quantile",
    "relative_increase",
    "run_campaign",
    "summarize",
    "write_summary_csv",
    "format_summary_table",
    "SUMMARY_CSV_HEADER",
]

DEFAULT_COMBOS = (
    "doudp+h3_1rtt",
    "coalesced_paper",
    "coalesced_optimized",
    "doq+h3_0rtt",
    "doq+h3_1rtt",
    "doh+h3_1rtt",
)

SUMMARY_CSV_HEADER = "profile,page,combo,n,median_ms,q1_ms,q3_ms,iqr_ms,median_rtt_multiple,rel_increase"


# --- statistics -----------------------------------------------------------------


def quantile(values: list[float], q: float) -> float:
    """Nearest-rank quantile on sorted values; q=0.5 is the lower median."""
    if not values:
        raise ValueError("quantile of an empty sequence")
    if not 0.0 <= q <= 1.0:
        raise ValueError(f"q must be within [0, 1], got {q}")
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


def median(values: list[float]) -> float:
    return quantile(values, 0.5)


def relative_increase(combo_median: float, baseline_median: float) -> float:
    """(combo - baseline) / baseline, against the DoUDP + 1-RTT baseline."""
    if baseline_median <= 0:
        raise ValueError(f"baseline median must be positive, got {baseline_median}")
    return (combo_median - baseline_median) / baseline_median


# --- configuration ----------------------------------------------------------------


@dataclass
class CampaignConfig:
    profiles: list[str] = field(default_factory=lambda: [p.name for p in builtin_profiles()])
    pages: list[str] = field(default_factory=lambda: list(PAGE_CLASSES))
    combos: list[str] = field(default_factory=lambda: list(DEFAULT_COMBOS))
    repetitions: int = 30
    seed: int = 1
    output_path: str = "dataset.jsonl"
    request_emission: str = "after_handshake"
    settings_policy: str = "deferred"
    corpus_root: str | None = None
    profile_file: str | None = None
    query_type: str = "A"
    timeout_s: float = 10.0
    render_cost_ms: float = 0.0

    def __post_init__(self) -> None:
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        parsed = [ProtocolCombo.parse(c) for c in self.combos]
        if BASELINE_COMBO not in parsed:
            # the relative-increase reference is non-negotiable
            self.combos = [BASELINE_COMBO.label] + list(self.combos)
        else:
            ordered = [BASELINE_COMBO.label] + [
                c for c in self.combos if ProtocolCombo.parse(c) != BASELINE_COMBO
            ]
            self.combos = ordered

    @classmethod
    def from_json(cls, path: str) -> "CampaignConfig":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        return cls(**raw)

    def resolved_profiles(self) -> list[AccessProfile]:
        extra = load_profiles(self.profile_file) if self.profile_file else []
        return [profile_by_name(name, extra) for name in self.profiles]


# --- the run ------------------------------------------------------------------------


def run_campaign(config: CampaignConfig, progress=None) -> dict[str, str]:
    """Execute the grid; returns the paths of the dataset, CSV, and text table.

    Per profile the three relays start once; every repetition then runs all
    combos in fixed order. 0-RTT combos get a fresh ticket primed out-of-band
    immediately before the measured visit. Failed visits are recorded with a
    reason and excluded from medians later.
    """
    combos = [ProtocolCombo.parse(c) for c in config.combos]
    profiles = config.resolved_profiles()
    out_dir = os.path.dirname(os.path.abspath(config.output_path))
    os.makedirs(out_dir, exist_ok=True)

    started = time.monotonic()
    total = len(profiles) * config.repetitions * len(combos) * len(config.pages)
    done = 0
    with LocalTestbed(
        corpus_root=config.corpus_root,
        seed=config.seed,
        settings_policy=config.settings_policy,
    ) as bed, open(config.output_path, "w", encoding="utf-8") as out:
        for profile in profiles:
            trio = bed.relays_for(profile)
            addrs = trio.addresses
            cache = TicketCache()
            try:
                for _rep in range(config.repetitions):
                    for page in config.pages:
                        for combo in combos:
                            # let the previous visit's teardown drain before
                            # the next measurement starts
                            time.sleep(min(0.06, profile.rtt_ms / 2000.0 + 0.002))
                            if combo.web == "h3_0rtt" and not combo.coalesced:
                                prime_ticket(addrs, cache, timeout=config.timeout_s)
                            record = visit(
                                combo,
                                profile,
                                page,
                                addrs,
                                ticket_cache=cache,
                                request_emission=config.request_emission,
                                timeout=config.timeout_s,
                                query_type=config.query_type,
                                render_cost_ms=config.render_cost_ms,
                            )
                            out.write(json.dumps(record.to_dict()) + "\n")
                            out.flush()
                            done += 1
                            if progress is not None:
                                progress(done, total, record)
            finally:
                trio.shutdown()

    rows, failures, malformed = summarize(config.output_path)
    csv_path = os.path.splitext(config.output_path)[0] + "_summary.csv"
    table_path = os.path.splitext(config.output_path)[0] + "_summary.txt"
    write_summary_csv(rows, csv_path)
    with open(table_path, "w", encoding="utf-8") as fh:
        fh.write(format_summary_table(rows, failures, malformed))
    elapsed = time.monotonic() - started
    return {
        "dataset": config.output_path,
        "summary_csv": csv_path,
        "summary_table": table_path,
        "elapsed_s": f"{elapsed:.1f}",
    }


# --- summaries ------------------------------------------------------------------------


@dataclass
class SummaryRow:
    profile: str
    page: str
    combo: str
    n: int
    median_ms: float
    q1_ms: float
    q3_ms: float
    iqr_ms: float
    median_rtt_multiple: float
    rel_increase: float


def _profile_rank(name: str) -> tuple[int, str]:
    order = [p.name for p in builtin_profiles()]
    return (order.index(name), name) if name in order else (len(order), name)


def _combo_rank(label: str) -> tuple[int, str]:
    order = list(DEFAULT_COMBOS)
    return (order.index(label), label) if label in order else (len(order), label)


def _record_combo_label(rec: dict) -> str:
    if rec.get("coalesced"):
        return f"coalesced_{rec.get('coalesce_mode')}"
    return f"{rec.get('combo_dns')}+{rec.get('combo_web')}"


def summarize(jsonl_path: str) -> tuple[list[SummaryRow], list[dict], list[int]]:
    """Aggregate a dataset into one row per (profile, page, combo).

    Returns (rows, failed records, malformed line numbers). Failed visits and
    malformed lines never contribute to medians.
    """
    groups: dict[tuple[str, str, str], list[dict]] = {}
    failures: list[dict] = []
    malformed: list[int] = []
    with open(jsonl_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                key = (rec["profile"], rec["page"], _record_combo_label(rec))
            except (json.JSONDecodeError, KeyError):
                malformed.append(lineno)
                continue
            if rec.get("failed"):
                failures.append(rec)
                continue
            groups.setdefault(key, []).append(rec)

    medians: dict[tuple[str, str, str], float] = {
        key: median([r["plt_ms"] for r in recs]) for key, recs in groups.items()
    }
    rows: list[SummaryRow] = []
    for key in sorted(
        groups, key=lambda k: (k[1], _profile_rank(k[0]), _combo_rank(k[2]))
    ):
        profile, page, combo = key
        recs = groups[key]
        plts = [r["plt_ms"] for r in recs]
        baseline = medians.get((profile, page, BASELINE_COMBO.label))
        rel = relative_increase(medians[key], baseline) if baseline else 0.0
        rows.append(
            SummaryRow(
                profile=profile,
                page=page,
                combo=combo,
                n=len(recs),
                median_ms=median(plts),
                q1_ms=quantile(plts, 0.25),
                q3_ms=quantile(plts, 0.75),
                iqr_ms=quantile(plts, 0.75) - quantile(plts, 0.25),
                median_rtt_multiple=median([r["plt_rtt"] for r in recs]),
                rel_increase=rel,
            )
        )
    return rows, failures, malformed


def write_summary_csv(rows: list[SummaryRow], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(SUMMARY_CSV_HEADER + "\n")
        for r in rows:
            fh.write(
                f"{r.profile},{r.page},{r.combo},{r.n},"
                f"{r.median_ms:.3f},{r.q1_ms:.3f},{r.q3_ms:.3f},{r.iqr_ms:.3f},"
                f"{r.median_rtt_multiple:.4f},{r.rel_increase:.4f}\n"
            )


def format_summary_table(
    rows: list[SummaryRow], failures: list[dict], malformed: list[int] | None = None
) -> str:
    lines: list[str] = []
    header = (
        f"{'profile':<10} {'combo':<20} {'n':>4} {'median_ms':>10} "
        f"{'q1_ms':>9} {'q3_ms':>9} {'iqr_ms':>8} {'rtt_x':>7} {'rel_incr':>9}"
    )
    for page in sorted({r.page for r in rows}):
        lines.append(f"page: {page}")
        lines.append(header)
        page_rows = [r for r in rows if r.page == page]
        page_rows.sort(key=lambda r: (_profile_rank(r.profile), _combo_rank(r.combo)))
        for r in page_rows:
            lines.append(
                f"{r.profile:<10} {r.combo:<20} {r.n:>4} {r.median_ms:>10.1f} "
                f"{r.q1_ms:>9.1f} {r.q3_ms:>9.1f} {r.iqr_ms:>8.1f} "
                f"{r.median_rtt_multiple:>7.2f} {r.rel_increase:>8.1%}"
            )
        lines.append("")
    lines.append(f"failed visits: {len(failures)}")
    for rec in failures:
        lines.append(
            f"  - ({rec.get('profile')}, {rec.get('page')}, {_record_combo_label(rec)}): "
            f"{rec.get('fail_reason')}"
        )
    if malformed:
        lines.append(f"malformed lines skipped: {malformed}")
    return "\n".join(lines) + "\n"
