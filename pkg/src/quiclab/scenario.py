"""Access-technology profiles and the delay arithmetic shared by the emulator and analysis.

A profile is a (round-trip delay, downlink rate, uplink rate) triple describing
the emulated access link of a user at the network edge. One-way delay is half
the RTT (symmetric link), and bandwidth is modeled as store-and-forward
serialization delay per transmitted unit.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable

__all__ = [
    "AccessProfile",
    "builtin_profiles",
    "profile_by_name",
    "load_profiles",
    "one_way_delay_ms",
    "serialization_delay_ms",
    "normalize_rtt",
]


@dataclass(frozen=True)
class AccessProfile:
    """One emulated access technology."""

    name: str
    rtt_ms: float
    downlink_mbps: float
    uplink_mbps: float

    def __post_init__(self) -> None:
        if self.rtt_ms <= 0:
            raise ValueError(f"rtt_ms must be > 0, got {self.rtt_ms}")
        if self.downlink_mbps <= 0:
            raise ValueError(f"downlink_mbps must be > 0, got {self.downlink_mbps}")
        if self.uplink_mbps <= 0:
            raise ValueError(f"uplink_mbps must be > 0, got {self.uplink_mbps}")


# Fixed-line rows from the FCC MBA dataset averages, mobile rows from ERRANT.
_BUILTINS = (
    AccessProfile("fibre", 14.8, 99.9, 109.1),
    AccessProfile("cable", 25.2, 165.1, 11.6),
    AccessProfile("dsl", 42.4, 10.7, 0.8),
    AccessProfile("4g", 91.9, 54.0, 21.2),
    AccessProfile("4g_medium", 104.5, 28.7, 4.2),
)


def builtin_profiles() -> list[AccessProfile]:
    """The five built-in access profiles, slowest delay last."""
    return list(_BUILTINS)


def profile_by_name(name: str, extra: Iterable[AccessProfile] = ()) -> AccessProfile:
    """Look up a profile among the built-ins plus optional extras."""
    for p in list(extra) + list(_BUILTINS):
        if p.name == name:
            return p
    known = ", ".join(p.name for p in _BUILTINS)
    raise KeyError(f"unknown profile {name!r} (built-ins: {known})")


def load_profiles(path: str) -> list[AccessProfile]:
    """Load extra profiles from a JSON array of {name, rtt_ms, downlink_mbps, uplink_mbps}."""
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError("profile file must contain a JSON array")
    return [
        AccessProfile(
            name=str(entry["name"]),
            rtt_ms=float(entry["rtt_ms"]),
            downlink_mbps=float(entry["downlink_mbps"]),
            uplink_mbps=float(entry["uplink_mbps"]),
        )
        for entry in raw
    ]


def one_way_delay_ms(profile: AccessProfile) -> float:
    """Half the profile RTT; the link delay is symmetric."""
    return profile.rtt_ms / 2.0


def serialization_delay_ms(num_bytes: int, direction: str, profile: AccessProfile) -> float:
    """Time to clock `num_bytes` onto the link in the given direction ("up"|"down")."""
    if num_bytes < 0:
        raise ValueError(f"num_bytes must be >= 0, got {num_bytes}")
    if direction == "up":
        rate_mbps = profile.uplink_mbps
    elif direction == "down":
        rate_mbps = profile.downlink_mbps
    else:
        raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    # rate in Mbps == kilobits per millisecond
    return num_bytes * 8.0 / (rate_mbps * 1000.0)


def normalize_rtt(duration_ms: float, profile: AccessProfile) -> float:
    """Express a duration as a multiple of the profile's round-trip time."""
    if duration_ms < 0:
        raise ValueError(f"duration_ms must be >= 0, got {duration_ms}")
    return duration_ms / profile.rtt_ms
