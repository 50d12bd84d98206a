"""Dataset access: JSONL loading, filtering, and the summary statistics.

Everything here is recomputed from the dataset file alone; the renderer never
talks to the testbed. Statistics mirror the dataset producer's definitions:
nearest-rank quantiles, lower median, relative increase on medians against the
DoUDP + H3 1-RTT baseline.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

SUPPORTED_SCHEMA_VERSIONS = {1}
BASELINE_COMBO = "doudp+h3_1rtt"

# canonical display orders
PROFILE_ORDER = ["fibre", "cable", "dsl", "4g", "4g_medium"]
COMBO_ORDER = [
    "doudp+h3_1rtt",
    "coalesced_paper",
    "coalesced_optimized",
    "doq+h3_0rtt",
    "doq+h3_1rtt",
    "doh+h3_1rtt",
]


class DatasetError(ValueError):
    pass


def combo_label(record: dict) -> str:
    if record.get("coalesced"):
        return f"coalesced_{record.get('coalesce_mode')}"
    return f"{record.get('combo_dns')}+{record.get('combo_web')}"


def quantile(values: list[float], q: float) -> float:
    if not values:
        raise DatasetError("quantile of an empty sequence")
    ordered = sorted(values)
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


def median(values: list[float]) -> float:
    return quantile(values, 0.5)


@dataclass
class Dataset:
    records: list[dict] = field(default_factory=list)
    failed: list[dict] = field(default_factory=list)

    @classmethod
    def load(cls, path: str) -> "Dataset":
        records: list[dict] = []
        failed: list[dict] = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise DatasetError(f"{path}:{lineno}: not valid JSON") from exc
                version = rec.get("schema_version")
                if version not in SUPPORTED_SCHEMA_VERSIONS:
                    raise DatasetError(
                        f"{path}:{lineno}: unsupported schema_version {version!r}"
                    )
                (failed if rec.get("failed") else records).append(rec)
        return cls(records, failed)

    def profiles(self) -> list[str]:
        names = {r["profile"] for r in self.records}
        return sorted(names, key=_profile_rank)

    def pages(self) -> list[str]:
        return sorted({r["page"] for r in self.records})

    def combos(self) -> list[str]:
        return sorted({combo_label(r) for r in self.records}, key=_combo_rank)

    def select(
        self,
        profiles: list[str] | None = None,
        pages: list[str] | None = None,
        combos: list[str] | None = None,
    ) -> list[dict]:
        for wanted, known, what in (
            (profiles, set(self.profiles()), "profile"),
            (pages, set(self.pages()), "page"),
            (combos, set(self.combos()), "combo"),
        ):
            if wanted:
                unknown = set(wanted) - known
                if unknown:
                    raise DatasetError(f"unknown {what}(s) in filter: {sorted(unknown)}")
        out = []
        for rec in self.records:
            if profiles and rec["profile"] not in profiles:
                continue
            if pages and rec["page"] not in pages:
                continue
            if combos and combo_label(rec) not in combos:
                continue
            out.append(rec)
        if not out:
            raise DatasetError("filter selected no records")
        return out

    def plt_median(self, profile: str, page: str, combo: str) -> float:
        values = [
            r["plt_ms"]
            for r in self.records
            if r["profile"] == profile and r["page"] == page and combo_label(r) == combo
        ]
        return median(values)

    def relative_increase(self, profile: str, page: str, combo: str) -> float:
        baseline = self.plt_median(profile, page, BASELINE_COMBO)
        return (self.plt_median(profile, page, combo) - baseline) / baseline


def _profile_rank(name: str) -> tuple[int, str]:
    return (PROFILE_ORDER.index(name), name) if name in PROFILE_ORDER else (len(PROFILE_ORDER), name)


def _combo_rank(label: str) -> tuple[int, str]:
    return (COMBO_ORDER.index(label), label) if label in COMBO_ORDER else (len(COMBO_ORDER), label)
