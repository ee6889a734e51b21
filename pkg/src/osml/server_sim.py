"""One simulated server: resource ledger, clock, scenario replay and telemetry.

Time advances in 1-second ticks.  Each tick the server fires the scenario
events scheduled for it (arrivals, load changes, departures; ordered by
service id), then measures every placed service under the current ledger.
Controller decisions made while handling tick ``t`` show up in the
measurements of tick ``t + 1``.
"""

from __future__ import annotations

import csv
import io
import sys
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .perf_surface import (
    ServiceProfile,
    get_profile,
    granted_bandwidth,
    latency_of,
)
from .resources import (
    DEFAULT_PLATFORM,
    Allocation,
    CapacityError,
    ContentionState,
    Platform,
    PreconditionError,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

BW_QUANTUM = 0.01


# -- telemetry -------------------------------------------------------------

@dataclass(frozen=True)
class TelemetrySnapshot:
    """Per-service feature record, fields in feature-table order."""

    ipc: float
    cache_misses_per_s: float
    mbl_gbs: float
    cpu_usage: float
    memory_util_mb: float
    virt_memory_mb: float
    res_memory_mb: float
    llc_occupied_mb: float
    allocated_cores: int
    allocated_ways: int
    core_freq_ghz: float
    qos_slowdown_pct: float
    resp_latency_ms: float

    def vector(self, names: Iterable[str]) -> np.ndarray:
        return np.array([getattr(self, n) for n in names], dtype=float)


TELEMETRY_FIELDS = tuple(f.name for f in fields(TelemetrySnapshot))
MODEL_A_FEATURES = TELEMETRY_FIELDS[:11]
MODEL_C_FEATURES = ("ipc", "cache_misses_per_s", "mbl_gbs", "cpu_usage", "memory_util_mb",
                    "llc_occupied_mb", "allocated_cores", "allocated_ways", "core_freq_ghz",
                    "resp_latency_ms")


def telemetry_columns(profile: ServiceProfile, cores, ways, rps: float, latency_ms,
                      threads, ways_eff=None, mbl_gbs=None, busy_cores=None,
                      platform: Platform = DEFAULT_PLATFORM) -> dict[str, np.ndarray]:
    """Closed-form counters for one service; broadcasts over allocation arrays.

    ipc            = ipc_max * base / latency
    cache misses   = miss_base * load * (1 + way_deficit / allocated_ways)
    cpu usage      = busy cores * min(1, demand / busy cores),
                     demand = core_cliff - 0.5 + 0.4 load
    memory util    = footprint * (0.6 + 0.4 load); virt/res likewise, static per profile
    llc occupied   = min(footprint, working set, effective ways * way size),
                     working set = (llc_cliff - 0.5 + 0.4 load) * way size

    Demand and working set sit strictly between the cliff and one unit below
    it, so cores run saturated (and the cache partition is full) exactly when
    the allocation is below the corresponding cliff.

    ``ways_eff`` defaults to ``ways`` (no sharing), ``mbl_gbs`` to the full
    demand, ``busy_cores`` to ``min(cores, threads)``.
    """
    cores = np.asarray(cores, dtype=float)
    ways = np.asarray(ways, dtype=float)
    latency_ms = np.asarray(latency_ms, dtype=float)
    ways_eff = ways if ways_eff is None else np.asarray(ways_eff, dtype=float)
    busy = (np.minimum(cores, np.asarray(threads, dtype=float)) if busy_cores is None
            else np.asarray(busy_cores, dtype=float))
    u = profile.load(rps)
    cpos, wpos = profile.cliff_positions(rps)
    deficit = np.maximum(0.0, wpos - ways_eff) if wpos is not None else np.zeros_like(ways_eff)
    need = (cpos or 1) - 0.5 + 0.4 * u
    wset = np.inf if wpos is None else (wpos - 0.5 + 0.4 * u) * platform.way_mb
    qos = profile.qos_target_ms
    shape = np.broadcast(cores, ways, latency_ms, busy).shape
    full = lambda v: np.broadcast_to(np.asarray(v, dtype=float), shape)  # noqa: E731
    return {
        "ipc": full(profile.ipc_max * profile.base_at(rps) / latency_ms),
        "cache_misses_per_s": full(profile.miss_base_per_s * u * (1.0 + deficit / ways)),
        "mbl_gbs": full(profile.bw_demand_at(rps) if mbl_gbs is None else mbl_gbs),
        "cpu_usage": full(busy * np.minimum(1.0, need / busy)),
        "memory_util_mb": full(profile.memory_footprint_mb * (0.6 + 0.4 * u)),
        "virt_memory_mb": full(profile.virt_memory_mb * (0.8 + 0.2 * u)),
        "res_memory_mb": full(profile.res_memory_mb * (0.7 + 0.3 * u)),
        "llc_occupied_mb": full(np.minimum(min(profile.memory_footprint_mb, wset), ways_eff * platform.way_mb)),
        "allocated_cores": full(cores),
        "allocated_ways": full(ways),
        "core_freq_ghz": full(platform.core_freq_ghz),
        "qos_slowdown_pct": full(np.maximum(0.0, (latency_ms - qos) / qos) * 100.0),
        "resp_latency_ms": full(latency_ms),
    }


def telemetry(profile: ServiceProfile, alloc: Allocation, rps: float, latency_ms: float,
              contention: ContentionState | None = None,
              platform: Platform = DEFAULT_PLATFORM,
              effective_cores: float | None = None) -> TelemetrySnapshot:
    """Snapshot of one service under ``alloc`` (see :func:`telemetry_columns`)."""
    contention = contention or ContentionState(platform_bw_gbs=platform.total_bw_gbs)
    cores = float(alloc.cores if effective_cores is None else effective_cores)
    cols = telemetry_columns(
        profile, alloc.cores, alloc.ways, rps, latency_ms, alloc.thread_count,
        ways_eff=contention.effective_ways(alloc),
        mbl_gbs=granted_bandwidth(profile, alloc, rps, contention, platform),
        busy_cores=min(cores, float(alloc.thread_count)), platform=platform)
    vals = {k: float(v) for k, v in cols.items()}
    vals["allocated_cores"] = alloc.cores
    vals["allocated_ways"] = alloc.ways
    return TelemetrySnapshot(**vals)


# -- ledger ----------------------------------------------------------------

class ResourceLedger:
    """Per-service allocations with atomic, validated updates.

    Every mutation goes through :meth:`apply`, which checks the whole proposed
    state and either swaps it in or raises leaving the ledger untouched.
    """

    def __init__(self, platform: Platform = DEFAULT_PLATFORM):
        self.platform = platform
        self._allocs: dict[str, Allocation] = {}

    # read side
    @property
    def allocations(self) -> Mapping[str, Allocation]:
        return dict(self._allocs)

    def __contains__(self, sid: str) -> bool:
        return sid in self._allocs

    def __getitem__(self, sid: str) -> Allocation:
        try:
            return self._allocs[sid]
        except KeyError:
            raise KeyError(f"service {sid!r} holds no allocation") from None

    def services(self) -> list[str]:
        return sorted(self._allocs)

    def used_ways(self) -> set[int]:
        out: set[int] = set()
        for a in self._allocs.values():
            out |= a.way_ids
        return out

    def idle(self) -> tuple[int, int, float]:
        cores = self.platform.total_cores - sum(a.cores for a in self._allocs.values())
        ways = self.platform.total_ways - len(self.used_ways())
        bw = 1.0 - sum(a.bw_share for a in self._allocs.values())
        return cores, ways, max(0.0, round(bw, 12))

    def idle_way_ids(self) -> list[int]:
        used = self.used_ways()
        return [w for w in range(self.platform.total_ways) if w not in used]

    def way_holders(self) -> dict[int, frozenset[str]]:
        holders: dict[int, set[str]] = {}
        for sid, a in self._allocs.items():
            for w in a.way_ids:
                holders.setdefault(w, set()).add(sid)
        return {w: frozenset(s) for w, s in holders.items() if len(s) > 1}

    def state(self) -> dict[str, Allocation]:
        return dict(self._allocs)

    def contention(self, total_bw_demand_gbs: float = 0.0,
                   bw_partitioned: bool = True) -> ContentionState:
        return ContentionState(shared_way_sets=self.way_holders(),
                               total_bw_demand_gbs=total_bw_demand_gbs,
                               platform_bw_gbs=self.platform.total_bw_gbs,
                               bw_partitioned=bw_partitioned)

    # validation
    def violations(self, allocs: Mapping[str, Allocation] | None = None) -> list[str]:
        allocs = self._allocs if allocs is None else allocs
        p = self.platform
        out = []
        for sid, a in allocs.items():
            if not 1 <= a.cores <= p.total_cores:
                out.append(f"{sid}: cores {a.cores}")
            if not 1 <= a.ways <= p.total_ways:
                out.append(f"{sid}: ways {a.ways}")
            if any(not 0 <= w < p.total_ways for w in a.way_ids):
                out.append(f"{sid}: way id out of range")
            if not 0 < a.bw_share <= 1 + 1e-12:
                out.append(f"{sid}: bw_share {a.bw_share}")
            if not a.shared_ways <= a.way_ids:
                out.append(f"{sid}: shared flag on unheld way")
        if sum(a.cores for a in allocs.values()) > p.total_cores:
            out.append("cores over-committed")
        if sum(a.bw_share for a in allocs.values()) > 1 + 1e-9:
            out.append("bandwidth over-committed")
        holders: dict[int, list[str]] = {}
        for sid, a in allocs.items():
            for w in a.way_ids:
                holders.setdefault(w, []).append(sid)
        for w, sids in holders.items():
            if len(sids) > 1 and any(w not in allocs[s].shared_ways for s in sids):
                out.append(f"way {w} held by {sorted(sids)} without sharing flag")
        exclusive = sum(len(a.exclusive_ways) for a in allocs.values())
        if exclusive > p.total_ways:
            out.append("exclusive ways over-committed")
        return out

    # mutation
    def apply(self, updates: Mapping[str, Allocation | None]) -> None:
        """Atomically replace (or, with ``None``, remove) the given allocations."""
        proposed = dict(self._allocs)
        for sid, a in updates.items():
            if a is None:
                proposed.pop(sid, None)
            else:
                proposed[sid] = a
        proposed = _drop_stale_share_flags(proposed)
        bad = self.violations(proposed)
        if bad:
            raise CapacityError("; ".join(bad))
        self._allocs = proposed

    def restore(self, state: Mapping[str, Allocation]) -> None:
        self.apply({**{s: None for s in self._allocs}, **state})

    def grant(self, service_id: str, requested: Allocation, sharing: bool = False,
              pin_ways: bool = False) -> Allocation:
        """Grant ``requested`` to a new service.

        By default only the way count of ``requested`` matters and the lowest
        idle way ids are assigned.  With ``pin_ways`` or ``sharing`` the named
        way ids are used as given; under ``sharing`` any overlap with other
        services is flagged shared on every holder.
        """
        if service_id in self._allocs:
            raise PreconditionError(f"{service_id} already holds an allocation")
        idle_c, _, idle_bw = self.idle()
        if requested.cores > idle_c:
            raise CapacityError(f"{requested.cores} cores requested, {idle_c} idle")
        if requested.bw_share > idle_bw + 1e-9:
            raise CapacityError(f"bw {requested.bw_share} requested, {idle_bw} idle")
        updates: dict[str, Allocation] = {}
        if not (sharing or pin_ways):
            free = self.idle_way_ids()
            if requested.ways > len(free):
                raise CapacityError(f"{requested.ways} ways requested, {len(free)} idle")
            new = requested.with_(way_ids=frozenset(free[: requested.ways]),
                                  shared_ways=frozenset())
        else:
            taken = {w: s for s, a in self._allocs.items() for w in a.way_ids}
            overlap = {w for w in requested.way_ids if w in taken}
            for w in overlap:
                owner = taken[w]
                cur = updates.get(owner, self._allocs[owner])
                updates[owner] = cur.with_(shared_ways=cur.shared_ways | {w})
            if overlap and not sharing:
                raise CapacityError(f"ways {sorted(overlap)} already held (sharing not permitted)")
            new = requested.with_(shared_ways=frozenset(overlap))
        updates[service_id] = new
        self.apply(updates)
        return new

    def grant_counts(self, service_id: str, cores: int, ways: int, bw_share: float,
                     threads: int | None = None) -> Allocation:
        return self.grant(service_id, Allocation.of(cores, ways, bw_share, threads))

    def resized(self, service_id: str, cores: int | None = None,
                ways: int | None = None) -> Allocation:
        """The allocation ``service_id`` would hold after a resize (not applied).

        Growing takes the lowest idle way ids; shrinking gives up shared ways
        first, then the highest exclusive ids.
        """
        cur = self[service_id]
        ids = set(cur.way_ids)
        shared = set(cur.shared_ways)
        if ways is not None and ways > cur.ways:
            free = self.idle_way_ids()
            need = ways - cur.ways
            if need > len(free):
                raise CapacityError(f"{need} more ways requested, {len(free)} idle")
            ids |= set(free[:need])
        elif ways is not None and ways < cur.ways:
            drop = sorted(shared, reverse=True) + sorted(ids - shared, reverse=True)
            for w in drop[: cur.ways - ways]:
                ids.discard(w)
                shared.discard(w)
        return cur.with_(cores=cur.cores if cores is None else cores,
                         way_ids=frozenset(ids), shared_ways=frozenset(shared & ids))

    def resize(self, service_id: str, cores: int | None = None,
               ways: int | None = None) -> Allocation:
        new = self.resized(service_id, cores, ways)
        self.apply({service_id: new})
        return new

    def share_ways(self, to: str, from_: str, n: int) -> Allocation:
        """Let ``to`` additionally occupy ``n`` of ``from_``'s exclusive ways."""
        donor = self[from_]
        cand = sorted(donor.exclusive_ways - self[to].way_ids, reverse=True)[:n]
        if len(cand) < n:
            raise CapacityError(f"{from_} has only {len(cand)} shareable ways")
        recv = self[to]
        new_to = recv.with_(way_ids=recv.way_ids | set(cand),
                            shared_ways=recv.shared_ways | set(cand))
        new_from = donor.with_(shared_ways=donor.shared_ways | set(cand))
        self.apply({to: new_to, from_: new_from})
        return new_to

    def set_bw_shares(self, shares: Mapping[str, float]) -> None:
        self.apply({s: self[s].with_(bw_share=v) for s, v in shares.items()})

    def release(self, service_id: str) -> Allocation:
        old = self[service_id]
        self.apply({service_id: None})
        return old


def _drop_stale_share_flags(allocs: dict[str, Allocation]) -> dict[str, Allocation]:
    count: dict[int, int] = {}
    for a in allocs.values():
        for w in a.way_ids:
            count[w] = count.get(w, 0) + 1
    out = {}
    for sid, a in allocs.items():
        stale = {w for w in a.shared_ways if count.get(w, 0) <= 1}
        out[sid] = a.with_(shared_ways=a.shared_ways - stale) if stale else a
    return out


# -- scenarios -------------------------------------------------------------

@dataclass(frozen=True)
class ServiceSpec:
    service_id: str
    profile: ServiceProfile
    arrival: int
    rps_timeline: tuple[tuple[int, float], ...]
    qos_tolerance_pct: float = 10.0
    priority: int = 0
    threads: int = 24
    departure: int | None = None

    def rps_at(self, tick: int) -> float:
        rps = self.rps_timeline[0][1]
        for t, r in self.rps_timeline:
            if t <= tick:
                rps = r
        return rps


@dataclass(frozen=True)
class Scenario:
    services: tuple[ServiceSpec, ...] = ()
    duration: int = 0
    name: str = "scenario"
    notes: str = ""

    def events(self) -> list[SimEvent]:
        out = []
        for s in self.services:
            out.append(SimEvent(s.arrival, "arrival", s.service_id, s.rps_at(s.arrival)))
            for t, r in s.rps_timeline:
                if t > s.arrival and (s.departure is None or t < s.departure):
                    out.append(SimEvent(t, "load", s.service_id, r))
            if s.departure is not None:
                out.append(SimEvent(s.departure, "departure", s.service_id, 0.0))
        return sorted(out, key=SimEvent.order_key)


_KIND_RANK = {"arrival": 0, "load": 1, "departure": 2}


@dataclass(frozen=True)
class SimEvent:
    tick: int
    kind: str
    service_id: str
    value: float = 0.0

    def order_key(self):
        return (self.tick, self.service_id, _KIND_RANK[self.kind])


class ScenarioError(ValueError):
    pass


def _timeline(entry: dict, profile: ServiceProfile, where: str) -> tuple[tuple[int, float], ...]:
    if "rps" in entry and "load" in entry:
        raise ScenarioError(f"{where}: give either 'rps' or 'load', not both")
    if "rps" in entry:
        raw = entry["rps"]
        scale = 1.0
    elif "load" in entry:
        raw = entry["load"]
        scale = profile.max_rps
    else:
        raise ScenarioError(f"{where}: missing 'rps' or 'load' timeline")
    if isinstance(raw, (int, float)):
        raw = [[entry.get("arrival", 0), raw]]
    pts = []
    for item in raw:
        if len(item) != 2:
            raise ScenarioError(f"{where}: timeline entries are [tick, value] pairs")
        t, v = int(item[0]), float(item[1]) * scale
        if not 0 < v <= profile.max_rps * (1 + 1e-9):
            raise ScenarioError(f"{where}: rps {v} outside (0, {profile.max_rps}]")
        pts.append((t, v))
    return tuple(sorted(pts))


def _line_of(text: str, needle: str) -> int:
    for i, line in enumerate(text.splitlines(), 1):
        if needle in line:
            return i
    return 0


def scenario_from_text(text: str, profiles: Mapping[str, ServiceProfile] | None = None,
                       name: str = "scenario") -> Scenario:
    """Parse a TOML scenario; errors carry the offending line number."""
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ScenarioError(f"malformed scenario: {exc}") from None
    specs = []
    seen = set()
    for i, entry in enumerate(doc.get("service", [])):
        sid = entry.get("id")
        line = _line_of(text, f'"{sid}"') if sid else 0
        where = f"line {line}" if line else f"service #{i + 1}"
        if not sid:
            raise ScenarioError(f"{where}: service without id")
        if sid in seen:
            raise ScenarioError(f"{where}: duplicate service id {sid!r}")
        seen.add(sid)
        pname = entry.get("profile", sid)
        try:
            prof = (profiles or {}).get(pname) or get_profile(pname)
        except KeyError as exc:
            raise ScenarioError(f"{where}: {exc.args[0]}") from None
        arrival = int(entry.get("arrival", 0))
        dep = entry.get("departure")
        specs.append(ServiceSpec(
            service_id=sid, profile=prof, arrival=arrival,
            rps_timeline=_timeline({**entry, "arrival": arrival}, prof, where),
            qos_tolerance_pct=float(entry.get("qos_tolerance_pct", 10.0)),
            priority=int(entry.get("priority", 0)),
            threads=int(entry.get("threads", 24)),
            departure=None if dep is None else int(dep),
        ))
    return Scenario(tuple(specs), int(doc.get("duration", 0)), doc.get("name", name),
                    doc.get("notes", ""))


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    return scenario_from_text(path.read_text(), name=path.stem)


# -- the server ------------------------------------------------------------

@dataclass
class RunningService:
    spec: ServiceSpec
    rps: float
    latencies: list[tuple[int, float]] = field(default_factory=list)
    effective_cores: float | None = None

    @property
    def profile(self) -> ServiceProfile:
        return self.spec.profile


def _sid_hash(sid: str) -> int:
    return zlib.crc32(sid.encode())


class Server:
    """Discrete-time single-server simulator."""

    def __init__(self, scenario: Scenario | None = None, seed: int = 0,
                 platform: Platform = DEFAULT_PLATFORM, noise: bool = True,
                 bw_partitioned: bool = True, record_telemetry: bool = False):
        self.platform = platform
        self.scenario = scenario or Scenario()
        self.seed = seed
        self.noise = noise
        self.bw_partitioned = bw_partitioned
        self.ledger = ResourceLedger(platform)
        self.tick = 0
        self.services: dict[str, RunningService] = {}
        self._pending = list(self.scenario.events())
        self._probe_counter = 0
        self.record_telemetry = record_telemetry
        self.telemetry_log: list[tuple[int, str, TelemetrySnapshot]] = []
        self.event_log: list[SimEvent] = []

    # scenario events
    def add_events(self, events: Iterable[SimEvent]) -> None:
        self._pending = sorted(self._pending + list(events), key=SimEvent.order_key)

    def _fire(self, tick: int) -> list[SimEvent]:
        due = [e for e in self._pending if e.tick <= tick]
        self._pending = [e for e in self._pending if e.tick > tick]
        specs = {s.service_id: s for s in self.scenario.services}
        for e in due:
            if e.kind == "arrival":
                self.services[e.service_id] = RunningService(specs[e.service_id], e.value)
            elif e.kind == "load" and e.service_id in self.services:
                self.services[e.service_id].rps = e.value
            elif e.kind == "departure":
                self.services.pop(e.service_id, None)
                if e.service_id in self.ledger:
                    self.ledger.release(e.service_id)
        self.event_log.extend(due)
        return due

    def add_service(self, spec: ServiceSpec) -> RunningService:
        """Bring a service up immediately, outside the scenario timeline."""
        rs = RunningService(spec, spec.rps_at(self.tick))
        self.services[spec.service_id] = rs
        return rs

    def remove_service(self, sid: str) -> None:
        self.services.pop(sid, None)
        if sid in self.ledger:
            self.ledger.release(sid)

    # measurement
    def contention(self) -> ContentionState:
        demand = sum(rs.profile.bw_demand_at(rs.rps) for sid, rs in self.services.items()
                     if sid in self.ledger)
        return self.ledger.contention(demand, self.bw_partitioned)

    def _noise_seed(self, tick: int, sid: str, probe: int = 0):
        if not self.noise:
            return None
        return [self.seed, tick, _sid_hash(sid), probe]

    def measure(self, sid: str, probe: bool = False) -> float:
        """Latency of ``sid`` under the current ledger.

        Regular measurements are keyed on the tick; probe measurements draw
        from a separate, counter-keyed noise stream.
        """
        rs = self.services[sid]
        if probe:
            self._probe_counter += 1
            seed = self._noise_seed(self.tick, sid, self._probe_counter)
        else:
            seed = self._noise_seed(self.tick, sid)
        return latency_of(rs.profile, self.ledger[sid], rs.rps, self.contention(), seed,
                          self.platform, rs.effective_cores)

    def _measure_all(self) -> None:
        for sid in sorted(self.services):
            if sid in self.ledger:
                lat = self.measure(sid)
                rs = self.services[sid]
                rs.latencies.append((self.tick, lat))
                if self.record_telemetry:
                    self.telemetry_log.append((self.tick, sid, self.snapshot(sid, lat)))

    def step(self, on_tick: Callable[[int, list[SimEvent]], None] | None = None) -> list[SimEvent]:
        """Process the current tick, let ``on_tick`` react, then advance the clock."""
        events = self._fire(self.tick)
        self._measure_all()
        if on_tick is not None:
            on_tick(self.tick, events)
        self.tick += 1
        return events

    def advance(self, ticks: int,
                on_tick: Callable[[int, list[SimEvent]], None] | None = None) -> list[SimEvent]:
        out = []
        for _ in range(ticks):
            out.extend(self.step(on_tick))
        return out

    # telemetry
    def snapshot(self, sid: str, latency_ms: float) -> TelemetrySnapshot:
        rs = self.services[sid]
        return telemetry(rs.profile, self.ledger[sid], rs.rps, latency_ms, self.contention(),
                         self.platform, rs.effective_cores)

    def sample(self, sid: str, window_ticks: int = 2) -> TelemetrySnapshot:
        """Snapshot averaged over the last ``window_ticks`` measurements."""
        if sid not in self.services:
            raise KeyError(f"unknown service {sid!r}")
        lats = self.services[sid].latencies
        if len(lats) < window_ticks:
            raise ValueError(f"{sid}: {len(lats)} measurements, window needs {window_ticks}")
        window = [lat for _, lat in lats[-window_ticks:]]
        return self.snapshot(sid, float(np.mean(window)))

    def last_latency(self, sid: str) -> float | None:
        lats = self.services[sid].latencies
        return lats[-1][1] if lats else None

    def qos_met(self, sid: str, latency_ms: float | None = None) -> bool:
        lat = self.last_latency(sid) if latency_ms is None else latency_ms
        return lat is not None and lat <= self.services[sid].profile.qos_target_ms


def conservation_violations(ledger: ResourceLedger, expect_full_bw: bool = False) -> list[str]:
    """Ledger invariants; with ``expect_full_bw`` the shares must sum to 1."""
    out = ledger.violations()
    if expect_full_bw and ledger.allocations:
        total = sum(a.bw_share for a in ledger.allocations.values())
        if abs(total - 1.0) > BW_QUANTUM + 1e-9:
            out.append(f"bandwidth shares sum to {total}")
    return out


def write_telemetry_csv(rows: Iterable[tuple[int, str, TelemetrySnapshot]], path: str | Path | None = None) -> str:
    """Telemetry as CSV, one row per (tick, service), feature columns in table order."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("tick", "service") + TELEMETRY_FIELDS)
    for tick, sid, snap in rows:
        d = asdict(snap)
        w.writerow([tick, sid] + [repr(d[f]) if isinstance(d[f], float) else d[f]
                                  for f in TELEMETRY_FIELDS])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_telemetry_csv(text: str) -> list[tuple[int, str, TelemetrySnapshot]]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        kwargs = {}
        for f in fields(TelemetrySnapshot):
            kwargs[f.name] = int(row[f.name]) if f.type in (int, "int") else float(row[f.name])
        out.append((int(row["tick"]), row["service"], TelemetrySnapshot(**kwargs)))
    return out


def partition_quantized(weights: Mapping[str, float], quantum: float = BW_QUANTUM) -> dict[str, float]:
    """Shares proportional to ``weights`` in multiples of ``quantum`` summing to 1.

    Largest-remainder rounding; every entry receives at least one quantum.
    Zero total weight yields equal shares.
    """
    keys = sorted(weights)
    if not keys:
        return {}
    units = round(1.0 / quantum)
    if len(keys) > units:
        raise CapacityError("more services than bandwidth quanta")
    w = np.array([max(0.0, weights[k]) for k in keys], dtype=float)
    if w.sum() <= 0:
        w = np.ones(len(keys))
    raw = w / w.sum() * units
    base = np.maximum(np.floor(raw).astype(int), 1)
    while base.sum() > units:
        i = int(np.argmax(np.where(base > 1, base - raw, -np.inf)))
        base[i] -= 1
    rem = raw - base
    left = units - int(base.sum())
    order = sorted(range(len(keys)), key=lambda i: (-rem[i], keys[i]))
    for i in order[:left]:
        base[i] += 1
    return {k: int(b) / units for k, b in zip(keys, base)}
