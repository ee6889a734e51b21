"""Comparison policies: PARTIES-style trial and error, an unmanaged server, and an oracle."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .perf_surface import ServiceProfile, latency_of
from .resources import DEFAULT_PLATFORM, Allocation, ContentionState, Platform
from .scheduler import Controller
from .server_sim import BW_QUANTUM, Server, SimEvent, partition_quantized

DIMENSIONS = ("cores", "ways", "bandwidth")


# -- PARTIES ---------------------------------------------------------------

@dataclass
class PartiesConfig:
    slack_threshold: float = 0.2
    bw_step: float = 0.05
    improvement: float = 0.95
    dimensions: tuple[str, ...] = DIMENSIONS

    def __post_init__(self):
        self.dimensions = tuple(self.dimensions)
        if not 0 < self.slack_threshold < 1:
            raise ValueError("slack_threshold must lie in (0, 1)")
        if set(self.dimensions) - set(DIMENSIONS) or not self.dimensions:
            raise ValueError(f"dimensions must be drawn from {DIMENSIONS}")


@dataclass
class Probe:
    dim: str
    partner: str | None = None
    way: int | None = None


@dataclass
class Fsm:
    up_dim: int = 0
    down_dim: int = 0
    settled: set[str] = field(default_factory=set)
    probe: Probe | None = None
    last_up: tuple[str, float] | None = None


class Parties(Controller):
    """Per-service finite state machines adjusting one resource unit per step.

    A violating service gains one unit in the next dimension of its rotation,
    taken from idle resources or from the satisfied service with the most
    slack.  A service whose latency is below ``1 - slack_threshold`` of its
    target probes downward one unit; if the next measurement violates QoS the
    unit is handed back and that dimension is marked settled until the next
    violation.  Units released by a pending probe stay reserved so the revert
    is always possible.  Each service takes at most one action per tick.
    """

    name = "parties"

    def __init__(self, config: PartiesConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = config or PartiesConfig()
        self.seed = seed
        self.fsm: dict[str, Fsm] = {}
        self._reserved_cores = 0
        self._reserved_ways: set[int] = set()
        self._arriving: str | None = None

    def bw_weights(self, services):
        led = self.ledger
        n = len(services)
        return {s: (led[s].bw_share if s in led and s != self._arriving else 1.0 / max(1, n - 1))
                for s in services}

    def _qos(self, sid):
        return self.server.services[sid].profile.qos_target_ms

    def _slack(self, sid):
        lat = self.server.last_latency(sid)
        return 0.0 if lat is None else 1.0 - lat / self._qos(sid)

    def _free(self) -> tuple[int, list[int]]:
        idle_c, _, _ = self.ledger.idle()
        ways = [w for w in self.ledger.idle_way_ids() if w not in self._reserved_ways]
        return idle_c - self._reserved_cores, ways

    def on_tick(self, tick: int, sim_events: list[SimEvent]):
        self.tick = tick
        start = len(self.events)
        for e in sim_events:
            if e.kind == "arrival":
                self.arrive(e.service_id)
            elif e.kind == "departure":
                self.depart(e.service_id)
        for sid in sorted(self.fsm):
            if sid not in self.ledger:
                continue
            lats = self.server.services[sid].latencies
            if not lats or lats[-1][0] != tick:
                continue
            self.step_service(sid, lats[-1][1])
        return self.events[start:]

    def arrive(self, sid: str) -> None:
        """Re-divide cores and ways evenly, shrinking services above the even share."""
        led = self.ledger
        p = self.server.platform
        n = len(led.allocations) + 1
        want_c, want_w = p.total_cores // n, p.total_ways // n
        if want_c < 1 or want_w < 1:
            self._migrate(sid, "no resources for an initial share")
            return
        for s in led.services():
            a = led[s]
            if self.fsm.get(s) and self.fsm[s].probe is not None:
                self._release_reservation(self.fsm[s].probe)
                self.fsm[s].probe = None
            if a.cores > want_c or len(a.exclusive_ways) > want_w:
                excl = sorted(a.exclusive_ways)[:min(want_w, len(a.exclusive_ways))]
                self._commit("deprive", (s, sid),
                             {s: a.with_(cores=min(a.cores, want_c), way_ids=frozenset(excl) | a.shared_ways)},
                             f"even share for {sid}", rebalance=False)
        free_c, free_w = self._free()
        c, w = min(want_c, free_c), min(want_w, len(free_w))
        alloc = Allocation(c, frozenset(free_w[:w]), threads=self.server.services[sid].spec.threads)
        self._arriving = sid
        try:
            self._commit("admit", (sid,), {sid: alloc}, "even share")
        finally:
            self._arriving = None
        self.fsm[sid] = Fsm()

    def depart(self, sid: str) -> None:
        fsm = self.fsm.pop(sid, None)
        if fsm is not None and fsm.probe is not None:
            self._release_reservation(fsm.probe)
        if self.ledger.allocations:
            self._commit("partition", tuple(self.ledger.services()), {}, f"{sid} departed")

    def _release_reservation(self, probe: Probe) -> None:
        if probe.dim == "cores":
            self._reserved_cores -= 1
        elif probe.dim == "ways":
            self._reserved_ways.discard(probe.way)

    def step_service(self, sid: str, lat: float) -> None:
        fsm = self.fsm[sid]
        qos = self._qos(sid)
        if fsm.probe is not None:
            probe, fsm.probe = fsm.probe, None
            self._release_reservation(probe)
            if lat > qos:
                self._revert(sid, probe)
                fsm.settled.add(probe.dim)
                return
        if lat > qos:
            fsm.settled.clear()
            if fsm.last_up is not None:
                dim, before = fsm.last_up
                if lat < self.cfg.improvement * before:
                    # the last step helped, so stay on that dimension
                    fsm.up_dim = self.cfg.dimensions.index(dim)
            fsm.last_up = None
            self._upsize(sid, fsm, lat)
            return
        fsm.last_up = None
        if lat < (1.0 - self.cfg.slack_threshold) * qos:
            self._downsize(sid, fsm)

    def _donor(self, sid: str, dim: str) -> str | None:
        led = self.ledger
        best = None
        for s in led.services():
            if s == sid or s not in self.fsm or self.fsm[s].probe is not None:
                continue
            lat = self.server.last_latency(s)
            if lat is None or lat > self._qos(s):
                continue
            a = led[s]
            ok = {"cores": a.cores > 1, "ways": len(a.exclusive_ways) > 1,
                  "bandwidth": a.bw_share > self.cfg.bw_step + BW_QUANTUM / 2}[dim]
            if ok:
                key = (self._slack(s), s)
                if best is None or key > best[0]:
                    best = (key, s)
        return None if best is None else best[1]

    def _upsize(self, sid: str, fsm: Fsm, lat: float) -> None:
        led = self.ledger
        dims = self.cfg.dimensions
        for k in range(len(dims)):
            dim = dims[(fsm.up_dim + k) % len(dims)]
            a = led[sid]
            free_c, free_w = self._free()
            updates = None
            if dim == "cores" and a.cores < led.platform.total_cores:
                if free_c > 0:
                    updates, why = {sid: a.with_(cores=a.cores + 1)}, "idle core"
                elif (d := self._donor(sid, dim)) is not None:
                    updates = {sid: a.with_(cores=a.cores + 1), d: led[d].with_(cores=led[d].cores - 1)}
                    why = f"core from {d}"
            elif dim == "ways" and a.ways < led.platform.total_ways:
                if free_w:
                    updates, why = {sid: a.with_(way_ids=a.way_ids | {free_w[0]})}, "idle way"
                elif (d := self._donor(sid, dim)) is not None:
                    way = max(led[d].exclusive_ways)
                    updates = {sid: a.with_(way_ids=a.way_ids | {way}),
                               d: led[d].with_(way_ids=led[d].way_ids - {way})}
                    why = f"way from {d}"
            elif dim == "bandwidth" and (d := self._donor(sid, dim)) is not None:
                step = self.cfg.bw_step
                updates = {sid: a.with_(bw_share=round(a.bw_share + step, 12)),
                           d: led[d].with_(bw_share=round(led[d].bw_share - step, 12))}
                why = f"bandwidth from {d}"
            if updates is not None:
                self._commit("adjust", (sid,), updates, f"up {dim}: {why}", rebalance=False)
                fsm.up_dim = (fsm.up_dim + k + 1) % len(dims)
                fsm.last_up = (dim, lat)
                return

    def _downsize(self, sid: str, fsm: Fsm) -> None:
        led = self.ledger
        dims = self.cfg.dimensions
        for k in range(len(dims)):
            dim = dims[(fsm.down_dim + k) % len(dims)]
            if dim in fsm.settled:
                continue
            a = led[sid]
            if dim == "cores" and a.cores > 1:
                self._commit("reclaim", (sid,), {sid: a.with_(cores=a.cores - 1)}, "probe down cores",
                             rebalance=False)
                self._reserved_cores += 1
                fsm.probe = Probe(dim)
            elif dim == "ways" and len(a.exclusive_ways) > 1:
                way = max(a.exclusive_ways)
                self._commit("reclaim", (sid,), {sid: a.with_(way_ids=a.way_ids - {way})},
                             "probe down ways", rebalance=False)
                self._reserved_ways.add(way)
                fsm.probe = Probe(dim, way=way)
            elif dim == "bandwidth" and a.bw_share > self.cfg.bw_step + BW_QUANTUM / 2:
                others = [s for s in led.services() if s != sid]
                if not others:
                    continue
                partner = max(others, key=lambda s: (-self._slack(s), s))
                step = self.cfg.bw_step
                self._commit("reclaim", (sid,),
                             {sid: a.with_(bw_share=round(a.bw_share - step, 12)),
                              partner: led[partner].with_(bw_share=round(led[partner].bw_share + step, 12))},
                             f"probe down bandwidth to {partner}", rebalance=False)
                fsm.probe = Probe(dim, partner=partner)
            else:
                continue
            fsm.down_dim = (fsm.down_dim + k + 1) % len(dims)
            return
        # every dimension settled or at its minimum

    def _revert(self, sid: str, probe: Probe) -> None:
        led = self.ledger
        a = led[sid]
        if probe.dim == "cores":
            updates = {sid: a.with_(cores=a.cores + 1)}
        elif probe.dim == "ways":
            updates = {sid: a.with_(way_ids=a.way_ids | {probe.way})}
        else:
            p = probe.partner
            if p not in led or led[p].bw_share <= self.cfg.bw_step + BW_QUANTUM / 2:
                return
            step = self.cfg.bw_step
            updates = {sid: a.with_(bw_share=round(a.bw_share + step, 12)),
                       p: led[p].with_(bw_share=round(led[p].bw_share - step, 12))}
        self._commit("rollback", (sid,), updates, f"probe down {probe.dim} violated QoS", rebalance=False)


# -- unmanaged -------------------------------------------------------------

def thread_map(threads: dict[str, int], total_cores: int, rng: np.random.Generator) -> dict[str, float]:
    """Effective cores per service when threads are spread over cores at random.

    Threads are shuffled and dealt round-robin over a random core order, so
    core loads differ by at most one thread.  A thread on a core shared by
    ``k`` threads receives ``1/k`` of it.
    """
    owners = [s for s in sorted(threads) for _ in range(threads[s])]
    if not owners:
        return {}
    order = rng.permutation(len(owners))
    cores = rng.permutation(total_cores)
    placed = [(owners[i], cores[j % total_cores]) for j, i in enumerate(order)]
    load: dict[int, int] = {}
    for _, c in placed:
        load[c] = load.get(c, 0) + 1
    eff = dict.fromkeys(threads, 0.0)
    for s, c in placed:
        eff[s] += 1.0 / load[c]
    return eff


class Unmanaged(Controller):
    """No partitioning: threads land on random cores, all LLC ways and bandwidth are shared.

    The ledger records ``max(1, floor(effective cores))`` cores per service and
    every way, flagged shared when more than one service runs; the simulator
    is told the exact effective core count.
    """

    name = "unmanaged"
    bw_partitioned = False

    def __init__(self, seed: int = 0):
        super().__init__()
        self.seed = seed

    def attach(self, server: Server) -> Unmanaged:
        server.bw_partitioned = False
        return super().attach(server)

    def on_tick(self, tick: int, sim_events: list[SimEvent]):
        self.tick = tick
        start = len(self.events)
        if any(e.kind in ("arrival", "departure") for e in sim_events):
            self.remap()
        return self.events[start:]

    def remap(self) -> None:
        srv = self.server
        p = srv.platform
        running = sorted(srv.services)
        before = self.ledger.state()
        if not running:
            return
        rng = np.random.default_rng([self.seed, self.tick])
        eff = thread_map({s: srv.services[s].spec.threads for s in running}, p.total_cores, rng)
        cores = {s: max(1, int(np.floor(eff[s] + 1e-9))) for s in running}
        while sum(cores.values()) > p.total_cores:
            s = max(running, key=lambda x: (cores[x], x))
            cores[s] -= 1
        shares = partition_quantized(dict.fromkeys(running, 1.0))
        ways = frozenset(range(p.total_ways))
        shared = ways if len(running) > 1 else frozenset()
        updates = {s: Allocation(cores[s], ways, shares[s], srv.services[s].spec.threads, shared)
                   for s in running}
        updates.update({s: None for s in before if s not in srv.services})
        for s in running:
            srv.services[s].effective_cores = eff[s]
        self.ledger.apply(updates)
        self._record("place", tuple(running), before, "random thread placement")


# -- oracle ----------------------------------------------------------------

@dataclass(frozen=True)
class OracleService:
    profile: ServiceProfile
    rps: float
    threads: int | None = None


@dataclass(frozen=True)
class OracleResult:
    feasible: bool
    allocations: tuple[tuple[int, int], ...] = ()
    bw_shares: tuple[float, ...] = ()

    @property
    def total(self) -> int:
        return sum(c + w for c, w in self.allocations)


def oracle_bw_shares(services: Sequence[OracleService]) -> tuple[float, ...]:
    """Bandwidth shares in proportion to demand, quantized as the scheduler does."""
    shares = partition_quantized({i: s.profile.bw_demand_at(s.rps) for i, s in enumerate(services)})
    return tuple(shares[i] for i in range(len(services)))


def meets(service: OracleService, cores: int, ways: int, bw_share: float,
          platform: Platform = DEFAULT_PLATFORM) -> bool:
    """Zero-noise QoS check for one exclusively partitioned service."""
    alloc = Allocation.of(cores, ways, bw_share, service.threads)
    lat = latency_of(service.profile, alloc, service.rps, ContentionState(platform_bw_gbs=platform.total_bw_gbs),
                     None, platform)
    return lat <= service.profile.qos_target_ms


def frontier(service: OracleService, bw_share: float,
             platform: Platform = DEFAULT_PLATFORM) -> list[tuple[int, int]]:
    """Pareto-minimal feasible (cores, ways) points, cores ascending."""
    out = []
    best_w = platform.total_ways + 1
    for c in range(1, platform.total_cores + 1):
        w = next((w for w in range(1, best_w) if meets(service, c, w, bw_share, platform)), None)
        if w is not None:
            out.append((c, w))
            best_w = w
            if w == 1:
                break
    return out


ORACLE_MAX_SERVICES = 4


def oracle_search(services: Sequence[OracleService], platform: Platform = DEFAULT_PLATFORM,
                  max_services: int = ORACLE_MAX_SERVICES) -> OracleResult:
    """Exhaustive partition search with zero noise.

    Among partitions of cores and ways (no sharing, bandwidth split by demand
    ratio) meeting every QoS target, returns the one with the fewest total
    units, ties broken by the lexicographically smallest allocation tuple.
    Only Pareto-minimal points can appear in such a partition, so the search
    runs over each service's frontier.  More than ``max_services`` services
    is refused with ``ValueError``.
    """
    if len(services) > max_services:
        raise ValueError(f"oracle search over {len(services)} services exceeds the cap of {max_services}")
    shares = oracle_bw_shares(services)
    fronts = [frontier(s, b, platform) for s, b in zip(services, shares)]
    if any(not f for f in fronts):
        return OracleResult(False, bw_shares=shares)
    min_c = [min(c for c, _ in f) for f in fronts]
    min_w = [min(w for _, w in f) for f in fronts]
    best: list = [None]

    def dfs(i, used_c, used_w, chosen):
        if i == len(fronts):
            key = (sum(c + w for c, w in chosen), tuple(chosen))
            if best[0] is None or key < best[0]:
                best[0] = key
            return
        rest_c, rest_w = sum(min_c[i + 1:]), sum(min_w[i + 1:])
        for c, w in fronts[i]:
            if used_c + c + rest_c <= platform.total_cores and used_w + w + rest_w <= platform.total_ways:
                dfs(i + 1, used_c + c, used_w + w, chosen + [(c, w)])

    dfs(0, 0, 0, [])
    if best[0] is None:
        return OracleResult(False, bw_shares=shares)
    return OracleResult(True, best[0][1], shares)
