"""Figure rendering: per-profile CDFs, PLT CDF grids, the relative-increase
heat map, and a markdown summary.

Each renderer returns the numbers it drew alongside the output path, so tests
can compare them against the campaign's summary CSV without image parsing.
Normalized axes use the dataset's `*_rtt` fields verbatim.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .dataset import (
    BASELINE_COMBO,
    Dataset,
    DatasetError,
    combo_label,
)

__all__ = ["FigureSpec", "RenderResult", "render", "render_all"]

FIGURE_KINDS = ("cdf_dns", "cdf_connect", "cdf_plt_grid", "heatmap", "summary_md")

_DNS_LABELS = {"doudp": "DoUDP", "doq": "DoQ", "doh": "DoH"}


@dataclass
class FigureSpec:
    kind: str
    output_path: str
    profiles: list[str] = field(default_factory=list)
    pages: list[str] = field(default_factory=list)
    combos: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.kind not in FIGURE_KINDS:
            raise DatasetError(f"unknown figure kind {self.kind!r}")


@dataclass
class RenderResult:
    path: str
    numbers: dict


def _cdf_points(values: list[float]) -> tuple[list[float], list[float]]:
    ordered = sorted(values)
    return ordered, [(i + 1) / len(ordered) for i in range(len(ordered))]


def render(dataset_path: str, spec: FigureSpec) -> RenderResult:
    data = Dataset.load(dataset_path)
    profiles = spec.profiles or data.profiles()
    pages = spec.pages or data.pages()
    combos = spec.combos or data.combos()
    renderer = {
        "cdf_dns": _render_cdf_dns,
        "cdf_connect": _render_cdf_connect,
        "cdf_plt_grid": _render_cdf_plt_grid,
        "heatmap": _render_heatmap,
        "summary_md": _render_summary_md,
    }[spec.kind]
    os.makedirs(os.path.dirname(os.path.abspath(spec.output_path)), exist_ok=True)
    return renderer(data, profiles, pages, combos, spec.output_path)


def render_all(dataset_path: str, figures_dir: str) -> list[RenderResult]:
    """The default figure set, one file per kind."""
    results = []
    for kind in FIGURE_KINDS:
        suffix = "md" if kind == "summary_md" else "png"
        spec = FigureSpec(kind=kind, output_path=os.path.join(figures_dir, f"{kind}.{suffix}"))
        results.append(render(dataset_path, spec))
    return results


def _render_cdf_dns(data: Dataset, profiles, pages, combos, out: str) -> RenderResult:
    records = data.select(profiles=profiles, pages=pages)
    fig, axes = plt.subplots(1, len(profiles), figsize=(4 * len(profiles), 3.2), squeeze=False)
    step_counts: dict = {}
    for ax, profile in zip(axes[0], profiles):
        for dns, label in _DNS_LABELS.items():
            values = [
                r["dns_lookup_rtt"]
                for r in records
                if r["profile"] == profile and r["combo_dns"] == dns
                and not r.get("single_connection") and r["dns_lookup_rtt"] is not None
            ]
            if not values:
                continue
            xs, ys = _cdf_points(values)
            ax.plot(xs, ys, drawstyle="steps-post", label=label)
            step_counts[(profile, dns)] = len(xs)
        ax.set_title(profile)
        ax.set_xlabel("DNS exchange duration [RTT multiples]")
        ax.set_ylabel("CDF")
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return RenderResult(out, {"step_counts": step_counts})


def _render_cdf_connect(data: Dataset, profiles, pages, combos, out: str) -> RenderResult:
    records = data.select(profiles=profiles, pages=pages)
    fig, axes = plt.subplots(1, len(profiles), figsize=(4 * len(profiles), 3.2), squeeze=False)
    step_counts: dict = {}
    for ax, profile in zip(axes[0], profiles):
        for combo in combos:
            values = [
                r["connect_rtt"]
                for r in records
                if r["profile"] == profile and combo_label(r) == combo
                and r["connect_rtt"] is not None
            ]
            if not values:
                continue
            xs, ys = _cdf_points(values)
            ax.plot(xs, ys, drawstyle="steps-post", label=combo)
            step_counts[(profile, combo)] = len(xs)
        ax.set_title(profile)
        ax.set_xlabel("connect duration [RTT multiples]")
        ax.set_ylabel("CDF")
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return RenderResult(out, {"step_counts": step_counts})


def _render_cdf_plt_grid(data: Dataset, profiles, pages, combos, out: str) -> RenderResult:
    records = data.select(profiles=profiles, pages=pages, combos=combos)
    fig, axes = plt.subplots(
        len(profiles), len(pages), figsize=(4 * len(pages), 2.6 * len(profiles)), squeeze=False
    )
    step_counts: dict = {}
    for row, profile in enumerate(profiles):
        for col, page in enumerate(pages):
            ax = axes[row][col]
            for combo in combos:
                values = [
                    r["plt_ms"]
                    for r in records
                    if r["profile"] == profile and r["page"] == page
                    and combo_label(r) == combo and r["plt_ms"] is not None
                ]
                if not values:
                    continue
                xs, ys = _cdf_points(values)
                ax.plot(xs, ys, drawstyle="steps-post", label=combo)
                step_counts[(profile, page, combo)] = len(xs)
            if row == 0:
                ax.set_title(page)
            if col == 0:
                ax.set_ylabel(f"{profile}\nCDF")
            ax.grid(alpha=0.3)
            if row == col == 0:
                ax.legend(fontsize=7)
            ax.set_xlabel("PLT [ms]")
    fig.tight_layout()
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return RenderResult(out, {"step_counts": step_counts})


def _render_heatmap(data: Dataset, profiles, pages, combos, out: str) -> RenderResult:
    comparators = [c for c in combos if c != BASELINE_COMBO]
    if not comparators:
        raise DatasetError("heat map needs at least one non-baseline combo")
    cells: dict = {}
    fig, axes = plt.subplots(
        1, len(comparators), figsize=(1.2 * len(pages) * len(comparators) + 3, 0.6 * len(profiles) + 2),
        squeeze=False,
    )
    for ax, combo in zip(axes[0], comparators):
        grid = []
        for profile in profiles:
            row = []
            for page in pages:
                rel = data.relative_increase(profile, page, combo)
                cells[(page, profile, combo)] = rel
                row.append(rel * 100.0)
            grid.append(row)
        image = ax.imshow(grid, cmap="YlOrRd", aspect="auto", vmin=0)
        ax.set_xticks(range(len(pages)), pages, rotation=30, ha="right", fontsize=8)
        ax.set_yticks(range(len(profiles)), profiles, fontsize=8)
        ax.set_title(combo, fontsize=9)
        for i in range(len(profiles)):
            for j in range(len(pages)):
                ax.text(j, i, f"{grid[i][j]:.1f}%", ha="center", va="center", fontsize=7)
        fig.colorbar(image, ax=ax, label="PLT increase over baseline [%]")
    fig.tight_layout()
    fig.savefig(out, dpi=110)
    plt.close(fig)
    return RenderResult(out, {"cells": cells})


def _render_summary_md(data: Dataset, profiles, pages, combos, out: str) -> RenderResult:
    lines = ["# Measurement summary", ""]
    numbers: dict = {}
    for page in pages:
        lines.append(f"## page: {page}")
        lines.append("")
        lines.append("| profile | combo | median PLT (ms) | vs baseline |")
        lines.append("|---|---|---:|---:|")
        for profile in profiles:
            ranked = sorted(combos, key=lambda c: data.plt_median(profile, page, c))
            for combo in ranked:
                med = data.plt_median(profile, page, combo)
                rel = data.relative_increase(profile, page, combo)
                numbers[(page, profile, combo)] = (med, rel)
                lines.append(f"| {profile} | {combo} | {med:.1f} | {rel:+.1%} |")
        lines.append("")
    if data.failed:
        lines.append(f"failed visits excluded from medians: {len(data.failed)}")
        lines.append("")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    return RenderResult(out, {"rows": numbers})
