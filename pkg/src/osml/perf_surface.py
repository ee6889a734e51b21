"""Synthetic per-service latency surfaces with resource cliffs.

Latency is a separable product::

    base(rps) * F_core(cores) * F_llc(ways) * G_threads * H_bw * noise

where each ``F`` combines a cliff term (a one-unit ramp from ``severity`` down
to 1 ending at the cliff position) with a mild hyperbolic tail ``1 + a/x``
normalized to 1 at the platform maximum.  Full allocation therefore returns the
base latency exactly.  The cliff positions move with offered load.

Profiles are TOML files, one per service, under ``osml/profiles``.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable

import numpy as np

from .resources import (
    DEFAULT_PLATFORM,
    NO_CONTENTION,
    Allocation,
    ContentionState,
    Platform,
    PreconditionError,
    SaturationError,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

NOISE_SIGMA = 0.03
# Fraction of the lowest-level base latency retained as load tends to zero.
IDLE_BASE_FRACTION = 0.5


@dataclass(frozen=True)
class CliffSpec:
    position_at_ref_rps: int
    rps_shift_slope: float
    severity: float

    def __post_init__(self):
        if self.severity < 1.0:
            raise ValueError("cliff severity must be >= 1")
        if self.rps_shift_slope < 0:
            raise ValueError("cliff position must not fall as load rises")

    def position(self, load: float, ref_load: float) -> int:
        """Integer cliff position (first unit that is off the cliff) at ``load``."""
        raw = self.position_at_ref_rps + self.rps_shift_slope * (load - ref_load)
        return max(1, math.floor(raw + 0.5))


@dataclass(frozen=True)
class ServiceProfile:
    name: str
    base_latency_ms: tuple[float, ...]
    qos_target_ms: float
    max_rps: float
    rps_levels: tuple[float, ...]
    core_cliff: CliffSpec | None = None
    llc_cliff: CliffSpec | None = None
    thread_penalty_coeff: float = 0.01
    bw_demand_gbs: float = 10.0
    memory_footprint_mb: float = 1024.0
    ref_rps: float | None = None
    display_name: str = ""
    cliff_class: str = "mild"
    trained: bool = True
    core_hyper: float = 0.3
    llc_hyper: float = 0.3
    ipc_max: float = 1.5
    miss_base_per_s: float = 1.0e6
    virt_memory_mb: float = 2048.0
    res_memory_mb: float = 1024.0
    extras: dict = field(default_factory=dict, compare=False, hash=False)

    def __post_init__(self):
        if len(self.base_latency_ms) != len(self.rps_levels):
            raise ValueError(f"{self.name}: one base latency per rps level required")
        if list(self.rps_levels) != sorted(self.rps_levels):
            raise ValueError(f"{self.name}: rps levels must be ascending")
        if any(b <= 0 for b in self.base_latency_ms):
            raise ValueError(f"{self.name}: base latencies must be positive")
        if any(self.qos_target_ms <= b for b in self.base_latency_ms):
            raise ValueError(f"{self.name}: QoS target must exceed every base latency")
        if self.max_rps < self.rps_levels[-1]:
            raise ValueError(f"{self.name}: max_rps below the highest rps level")

    @property
    def reference_rps(self) -> float:
        return self.rps_levels[0] if self.ref_rps is None else self.ref_rps

    def load(self, rps: float) -> float:
        return rps / self.max_rps

    def cliff_positions(self, rps: float) -> tuple[int | None, int | None]:
        u, ref = self.load(rps), self.load(self.reference_rps)
        core = self.core_cliff.position(u, ref) if self.core_cliff else None
        llc = self.llc_cliff.position(u, ref) if self.llc_cliff else None
        return core, llc

    def base_at(self, rps: float) -> float:
        """Latency floor at ``rps``: interpolated between levels, ramped below."""
        lo = self.rps_levels[0]
        if rps < lo:
            frac = IDLE_BASE_FRACTION + (1.0 - IDLE_BASE_FRACTION) * rps / lo
            return self.base_latency_ms[0] * frac
        return float(np.interp(rps, self.rps_levels, self.base_latency_ms))

    def bw_demand_at(self, rps: float) -> float:
        return self.bw_demand_gbs * self.load(rps)


def _dim_factor(x, cliff_pos, severity, hyper, x_max):
    """Cliff ramp times normalized hyperbolic tail; scalar or ndarray ``x``."""
    if cliff_pos is None:
        cliff = 1.0
    else:
        ramp = np.clip(cliff_pos - x, 0.0, 1.0)
        cliff = 1.0 + (severity - 1.0) * ramp
    return cliff * (1.0 + hyper / x) / (1.0 + hyper / x_max)


def core_factor(profile: ServiceProfile, cores, rps: float,
                platform: Platform = DEFAULT_PLATFORM):
    pos, _ = profile.cliff_positions(rps)
    sev = profile.core_cliff.severity if profile.core_cliff else 1.0
    return _dim_factor(cores, pos, sev, profile.core_hyper, platform.total_cores)


def llc_factor(profile: ServiceProfile, ways, rps: float,
               platform: Platform = DEFAULT_PLATFORM):
    _, pos = profile.cliff_positions(rps)
    sev = profile.llc_cliff.severity if profile.llc_cliff else 1.0
    return _dim_factor(ways, pos, sev, profile.llc_hyper, platform.total_ways)


def thread_factor(profile: ServiceProfile, threads, cores):
    excess = np.maximum(0, np.asarray(threads) - np.asarray(cores))
    g = 1.0 + profile.thread_penalty_coeff * excess / np.asarray(cores)
    return float(g) if np.ndim(g) == 0 else g


def surface(profile: ServiceProfile, cores, ways, rps: float, threads=None,
            platform: Platform = DEFAULT_PLATFORM):
    """Zero-noise latency with ample bandwidth; broadcasts over arrays.

    ``cores`` and ``ways`` may be fractional (effective) amounts.  When
    ``threads`` is given, only ``min(cores, threads)`` cores do useful work and
    oversubscription adds the context-switch penalty.
    """
    cores = np.asarray(cores, dtype=float)
    ways = np.asarray(ways, dtype=float)
    if threads is None:
        busy, g = cores, 1.0
    else:
        threads = np.asarray(threads, dtype=float)
        busy = np.minimum(cores, threads)
        g = thread_factor(profile, threads, cores)
    lat = (profile.base_at(rps) * core_factor(profile, busy, rps, platform)
           * llc_factor(profile, ways, rps, platform) * g)
    return float(lat) if np.ndim(lat) == 0 else lat


def bandwidth_factor(profile: ServiceProfile, alloc: Allocation, rps: float,
                     contention: ContentionState = NO_CONTENTION,
                     platform: Platform = DEFAULT_PLATFORM) -> float:
    demand = profile.bw_demand_at(rps)
    if contention.bw_partitioned:
        granted = alloc.bw_share * platform.total_bw_gbs
        return max(1.0, demand / granted) if demand > 0 else 1.0
    return max(1.0, contention.total_bw_demand_gbs / contention.platform_bw_gbs)


def granted_bandwidth(profile: ServiceProfile, alloc: Allocation, rps: float,
                      contention: ContentionState = NO_CONTENTION,
                      platform: Platform = DEFAULT_PLATFORM) -> float:
    """Bandwidth actually consumed (GB/s)."""
    demand = profile.bw_demand_at(rps)
    return demand / bandwidth_factor(profile, alloc, rps, contention, platform)


def check_allocation(alloc: Allocation, platform: Platform = DEFAULT_PLATFORM) -> None:
    if alloc.cores < 1 or alloc.cores > platform.total_cores:
        raise PreconditionError(f"cores={alloc.cores} outside [1, {platform.total_cores}]")
    if alloc.ways < 1 or alloc.ways > platform.total_ways:
        raise PreconditionError(f"ways={alloc.ways} outside [1, {platform.total_ways}]")
    if not 0.0 < alloc.bw_share <= 1.0 + 1e-12:
        raise PreconditionError(f"bw_share={alloc.bw_share} outside (0, 1]")
    if alloc.thread_count < 1:
        raise PreconditionError("threads must be positive")


def noise_multiplier(noise_seed) -> float:
    if noise_seed is None:
        return 1.0
    rng = np.random.default_rng(noise_seed)
    return float(np.exp(NOISE_SIGMA * rng.standard_normal()))


def latency_of(profile: ServiceProfile, alloc: Allocation, rps: float,
               contention: ContentionState = NO_CONTENTION, noise_seed=None,
               platform: Platform = DEFAULT_PLATFORM,
               effective_cores: float | None = None) -> float:
    """Response latency (ms) of ``profile`` under ``alloc`` at ``rps``.

    ``noise_seed=None`` gives the zero-noise surface; any other value seeds a
    multiplicative lognormal disturbance.  ``effective_cores`` overrides the
    core count for unmanaged placements where threads time-share cores.
    """
    check_allocation(alloc, platform)
    if rps > profile.max_rps * (1 + 1e-9):
        raise SaturationError(f"{profile.name}: rps {rps} exceeds max {profile.max_rps}")
    if rps <= 0:
        raise PreconditionError("rps must be positive")
    threads = alloc.thread_count
    cores = float(alloc.cores if effective_cores is None else effective_cores)
    busy = min(cores, float(threads))
    ways = contention.effective_ways(alloc)
    lat = (profile.base_at(rps)
           * core_factor(profile, busy, rps, platform)
           * llc_factor(profile, ways, rps, platform)
           * thread_factor(profile, threads, alloc.cores)
           * bandwidth_factor(profile, alloc, rps, contention, platform))
    return float(lat) * noise_multiplier(noise_seed)


@dataclass(frozen=True)
class GroundTruth:
    rcliff: tuple[int, int]
    oaa: tuple[int, int]
    oaa_bw_gbs: float


def _min_units(factor_at, limit: int, budget: float, cliff_pos, severity, hyper, x_max) -> int:
    """Smallest integer x in [1, limit] with factor_at(x) <= budget.

    Closed form on each branch of the factor (below the cliff the ramp is
    saturated at ``severity``; at or above it the ramp is 1), then a boundary
    check against direct evaluation to absorb rounding.
    """
    norm = 1.0 + hyper / x_max
    candidates = []
    branches = [(1.0, cliff_pos if cliff_pos is not None else 1, limit)]
    if cliff_pos is not None and cliff_pos > 1:
        branches.append((severity, 1, cliff_pos - 1))
    for mult, lo, hi in branches:
        lo, hi = max(1, lo), min(limit, hi)
        if lo > hi:
            continue
        r = budget * norm / mult - 1.0
        if r <= 0:
            continue
        x = max(lo, math.ceil(hyper / r) if hyper > 0 else lo)
        while x > lo and factor_at(x - 1) <= budget:
            x -= 1
        while x <= hi and factor_at(x) > budget:
            x += 1
        if x <= hi:
            candidates.append(x)
    if not candidates:
        raise ValueError("QoS target unreachable on this platform")
    return min(candidates)


def analytic_ground_truth(profile: ServiceProfile, rps: float,
                          margin: tuple[int, int] = (2, 2),
                          platform: Platform = DEFAULT_PLATFORM) -> GroundTruth:
    """RCliff, OAA and OAA bandwidth from the closed-form surface.

    The RCliff corner is the smallest core count meeting QoS with every way
    allocated, paired with the smallest way count meeting QoS with every core
    allocated; the OAA adds ``margin`` and clamps to the platform.
    """
    if rps > profile.max_rps * (1 + 1e-9):
        raise SaturationError(f"{profile.name}: rps {rps} exceeds max {profile.max_rps}")
    base = profile.base_at(rps)
    cpos, wpos = profile.cliff_positions(rps)
    C, W = platform.total_cores, platform.total_ways
    qos = profile.qos_target_ms

    full_ways = float(llc_factor(profile, W, rps, platform))
    full_cores = float(core_factor(profile, C, rps, platform))
    csev = profile.core_cliff.severity if profile.core_cliff else 1.0
    wsev = profile.llc_cliff.severity if profile.llc_cliff else 1.0
    rc = _min_units(lambda c: float(core_factor(profile, c, rps, platform)), C,
                    qos / (base * full_ways), cpos, csev, profile.core_hyper, C)
    rw = _min_units(lambda w: float(llc_factor(profile, w, rps, platform)), W,
                    qos / (base * full_cores), wpos, wsev, profile.llc_hyper, W)
    oaa = (min(C, rc + margin[0]), min(W, rw + margin[1]))
    return GroundTruth((rc, rw), oaa, profile.bw_demand_at(rps))


def meets_qos(profile: ServiceProfile, cores, ways, rps: float, threads=None,
              platform: Platform = DEFAULT_PLATFORM):
    return surface(profile, cores, ways, rps, threads, platform) <= profile.qos_target_ms


def rcliff_variation(profile: ServiceProfile, platform: Platform = DEFAULT_PLATFORM) -> float:
    """Spread of the RCliff across the profile's rps levels, as a fraction of the axis.

    Taken over the cliff-bearing dimensions; the larger of the two is reported.
    """
    gts = [analytic_ground_truth(profile, r, platform=platform) for r in profile.rps_levels]
    spreads = []
    if profile.core_cliff:
        cs = [g.rcliff[0] for g in gts]
        spreads.append((max(cs) - min(cs)) / platform.total_cores)
    if profile.llc_cliff:
        ws = [g.rcliff[1] for g in gts]
        spreads.append((max(ws) - min(ws)) / platform.total_ways)
    return max(spreads) if spreads else 0.0


# -- profile files ---------------------------------------------------------

def _cliff(d: dict | None) -> CliffSpec | None:
    if not d:
        return None
    return CliffSpec(int(d["position_at_ref_rps"]), float(d["rps_shift_slope"]),
                     float(d["severity"]))


def profile_from_dict(d: dict) -> ServiceProfile:
    tele = d.get("telemetry", {})
    surf = d.get("surface", {})
    known = {"name", "display_name", "cliff_class", "trained", "max_rps", "ref_rps",
             "rps_levels", "base_latency_ms", "qos_target_ms", "thread_penalty_coeff",
             "bw_demand_gbs", "memory_footprint_mb", "telemetry", "surface",
             "core_cliff", "llc_cliff"}
    return ServiceProfile(
        name=d["name"],
        display_name=d.get("display_name", d["name"]),
        cliff_class=d.get("cliff_class", "mild"),
        trained=bool(d.get("trained", True)),
        base_latency_ms=tuple(float(x) for x in d["base_latency_ms"]),
        qos_target_ms=float(d["qos_target_ms"]),
        max_rps=float(d["max_rps"]),
        rps_levels=tuple(float(x) for x in d["rps_levels"]),
        ref_rps=float(d["ref_rps"]) if "ref_rps" in d else None,
        core_cliff=_cliff(d.get("core_cliff")),
        llc_cliff=_cliff(d.get("llc_cliff")),
        thread_penalty_coeff=float(d.get("thread_penalty_coeff", 0.01)),
        bw_demand_gbs=float(d["bw_demand_gbs"]),
        memory_footprint_mb=float(d["memory_footprint_mb"]),
        core_hyper=float(surf.get("core_hyper", 0.3)),
        llc_hyper=float(surf.get("llc_hyper", 0.3)),
        ipc_max=float(tele.get("ipc_max", 1.5)),
        miss_base_per_s=float(tele.get("miss_base_per_s", 1.0e6)),
        virt_memory_mb=float(tele.get("virt_memory_mb", 2048.0)),
        res_memory_mb=float(tele.get("res_memory_mb", 1024.0)),
        extras={k: v for k, v in d.items() if k not in known},
    )


def load_profile(path: str | Path) -> ServiceProfile:
    with open(path, "rb") as fh:
        return profile_from_dict(tomllib.load(fh))


@lru_cache(maxsize=None)
def builtin_profiles() -> dict[str, ServiceProfile]:
    """Every packaged profile, keyed by name, in name order."""
    out = {}
    root = resources.files("osml") / "profiles"
    for entry in sorted(root.iterdir(), key=lambda p: p.name):
        if entry.name.endswith(".toml"):
            prof = profile_from_dict(tomllib.loads(entry.read_text()))
            out[prof.name] = prof
    return out


def trained_profiles() -> dict[str, ServiceProfile]:
    return {k: p for k, p in builtin_profiles().items() if p.trained}


def get_profile(name: str) -> ServiceProfile:
    try:
        return builtin_profiles()[name]
    except KeyError:
        raise KeyError(f"unknown profile {name!r}; known: {sorted(builtin_profiles())}") from None


def profile_names(profiles: Iterable[ServiceProfile]) -> list[str]:
    return [p.name for p in profiles]
