"""The central controller and the plumbing shared with the baseline policies.

A controller is attached to a :class:`~osml.server_sim.Server` and called once
per tick (after the server has fired scenario events and measured every placed
service).  Every ledger mutation it performs goes through
:meth:`Controller._commit`, which applies the allocation changes together with
the bandwidth re-partition in one atomic ledger update and records exactly one
:class:`SchedulerEvent`.  Decisions taken at tick ``t`` are visible in the
measurements of tick ``t + 1``.

:class:`Osml` implements the four handlers:

* admission (sample on idle resources, Model-A OAA, Model-B deprivation),
* insufficiency (Model-C growth actions, falling back to sharing),
* surplus reclamation (Model-C reduction actions with exact rollback),
* LLC-way sharing guided by Model-B'.
"""

from __future__ import annotations

import csv
import io
import itertools
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .models import (
    ACTION_INDEX,
    ACTIONS,
    GROWTH_MASK,
    REDUCTION_MASK,
    Dqn,
    Experience,
    OAAPrediction,
    snap_slowdown,
)
from .resources import Allocation, CapacityError
from .server_sim import (
    MODEL_C_FEATURES,
    ResourceLedger,
    Server,
    SimEvent,
    TelemetrySnapshot,
    conservation_violations,
    partition_quantized,
)

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EVENT_KINDS = ("place", "admit", "deprive", "adjust", "reclaim", "rollback", "share",
               "partition", "reject", "report")


@dataclass(frozen=True)
class SchedulerEvent:
    tick: int
    kind: str
    services: tuple[str, ...]
    dcores: int = 0
    dways: int = 0
    dbw: float = 0.0
    reason: str = ""
    mutation: bool = True

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise ValueError(f"unknown event kind {self.kind!r}")

    @property
    def service(self) -> str:
        return self.services[0] if self.services else ""


EVENT_COLUMNS = ("tick", "kind", "service", "dcores", "dways", "dbw", "mutation", "reason")


def events_to_csv(events: Iterable[SchedulerEvent], path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVENT_COLUMNS)
    for e in events:
        w.writerow([e.tick, e.kind, ";".join(e.services), e.dcores, e.dways, repr(float(e.dbw)),
                    int(e.mutation), e.reason])
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def events_from_csv(text: str) -> list[SchedulerEvent]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append(SchedulerEvent(int(row["tick"]), row["kind"],
                                  tuple(s for s in row["service"].split(";") if s),
                                  int(row["dcores"]), int(row["dways"]), float(row["dbw"]),
                                  row["reason"], bool(int(row["mutation"]))))
    return out


# -- configuration ---------------------------------------------------------

@dataclass
class SchedulerConfig:
    sampling_window_ticks: int = 2
    monitor_interval_ticks: int = 1
    max_apps_in_deprivation: int = 3
    oaa_margin: tuple[int, int] = (2, 2)
    qos_tolerances: dict[str, float] = field(default_factory=dict)
    surplus_margin: tuple[int, int] = (2, 2)
    surplus_per_dimension: bool = True
    allow_rcliff_admission: bool = False
    action_budget: int = 10
    explore: bool = True
    epsilon: float = 0.05
    online_training: bool = True
    train_batch: int = 200
    reclaim_backoff_ticks: int = 20
    verify_with_b_prime: bool = True
    unknown_bw_gbs: float = 10.0

    def __post_init__(self):
        self.oaa_margin = tuple(int(v) for v in self.oaa_margin)
        self.surplus_margin = tuple(int(v) for v in self.surplus_margin)
        for name in ("sampling_window_ticks", "monitor_interval_ticks", "max_apps_in_deprivation",
                     "action_budget", "train_batch"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if min(self.oaa_margin) < 0 or min(self.surplus_margin) < 0:
            raise ValueError("margins must be nonnegative")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError("epsilon must lie in [0, 1]")
        if any(v < 0 for v in self.qos_tolerances.values()):
            raise ValueError("tolerances must be nonnegative")

    @classmethod
    def from_dict(cls, d: Mapping) -> SchedulerConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scheduler options: {sorted(unknown)}")
        return cls(**{k: dict(v) if k == "qos_tolerances" else v for k, v in d.items()})

    @classmethod
    def from_toml(cls, text: str) -> SchedulerConfig:
        doc = tomllib.loads(text)
        return cls.from_dict(doc.get("scheduler", doc))

    @classmethod
    def load(cls, path: str | Path) -> SchedulerConfig:
        return cls.from_toml(Path(path).read_text())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["oaa_margin"] = list(self.oaa_margin)
        d["surplus_margin"] = list(self.surplus_margin)
        return d


# -- controller base -------------------------------------------------------

class Controller:
    """Event accounting, atomic commits and bandwidth partitioning."""

    name = "base"
    bw_partitioned = True

    def __init__(self):
        self.server: Server | None = None
        self.events: list[SchedulerEvent] = []
        self.conservation_failures: list[str] = []
        self.migrated: set[str] = set()
        self.tick = 0

    def attach(self, server: Server) -> Controller:
        self.server = server
        return self

    @property
    def ledger(self) -> ResourceLedger:
        return self.server.ledger

    @property
    def action_count(self) -> int:
        return sum(e.mutation for e in self.events)

    def __call__(self, tick: int, sim_events: list[SimEvent]) -> None:
        self.tick = tick
        self.on_tick(tick, sim_events)

    def on_tick(self, tick: int, sim_events: list[SimEvent]) -> list[SchedulerEvent]:
        raise NotImplementedError

    # bandwidth
    def bw_weights(self, services: Iterable[str]) -> dict[str, float]:
        return {s: 1.0 for s in services}

    def _with_bw(self, proposed: dict[str, Allocation]) -> dict[str, Allocation]:
        shares = partition_quantized(self.bw_weights(sorted(proposed)))
        return {s: a.with_(bw_share=shares[s]) for s, a in proposed.items()}

    # mutation
    def _commit(self, kind: str, services: tuple[str, ...],
                updates: Mapping[str, Allocation | None], reason: str = "",
                rebalance: bool = True) -> SchedulerEvent:
        led = self.ledger
        before = led.state()
        proposed = dict(before)
        for s, a in updates.items():
            if a is None:
                proposed.pop(s, None)
            else:
                proposed[s] = a
        if rebalance and self.bw_partitioned and proposed:
            proposed = self._with_bw(proposed)
        changes = {s: proposed.get(s) for s in set(before) | set(proposed)
                   if before.get(s) != proposed.get(s)}
        led.apply(changes)
        return self._record(kind, services, before, reason)

    def _record(self, kind: str, services: tuple[str, ...], before: Mapping[str, Allocation],
                reason: str, mutation: bool = True) -> SchedulerEvent:
        dc = dw = 0
        dbw = 0.0
        if mutation and services:
            s = services[0]
            old, new = before.get(s), self.ledger.state().get(s)
            dc = (new.cores if new else 0) - (old.cores if old else 0)
            dw = (new.ways if new else 0) - (old.ways if old else 0)
            dbw = round((new.bw_share if new else 0.0) - (old.bw_share if old else 0.0), 12)
        ev = SchedulerEvent(self.tick, kind, tuple(services), dc, dw, dbw, reason, mutation)
        self.events.append(ev)
        if mutation:
            bad = conservation_violations(self.ledger, expect_full_bw=True)
            self.conservation_failures += [f"tick {self.tick} {kind}: {b}" for b in bad]
            self._changed(before)
        return ev

    def _changed(self, before: Mapping[str, Allocation]) -> None:
        """Hook called after each mutation with the pre-mutation ledger state."""

    def _report(self, services: tuple[str, ...], reason: str) -> SchedulerEvent:
        return self._record("report", services, {}, reason, mutation=False)

    def _migrate(self, sid: str, reason: str) -> None:
        """Give up on ``sid``: release it (if placed) and hand it to the upper level."""
        if sid in self.ledger:
            self._commit("reject", (sid,), {sid: None}, reason)
        else:
            self._record("reject", (sid,), {}, reason, mutation=False)
        self._report((sid,), f"migrate: {reason}")
        self.server.remove_service(sid)
        self.migrated.add(sid)


# -- OSML ------------------------------------------------------------------

@dataclass
class Tracked:
    phase: str = "sampling"
    changed: int = -1
    bw_gbs: float | None = None
    prediction: OAAPrediction | None = None
    hold_until: int = -1


class Osml(Controller):
    """Model-driven controller; ``models`` is a trained :class:`~osml.pipeline.ModelSuite`."""

    name = "osml"

    def __init__(self, models, config: SchedulerConfig | None = None, seed: int = 0):
        super().__init__()
        self.cfg = config or SchedulerConfig()
        self.model_a = models.model_a
        self.model_b = models.model_b
        self.model_b_prime = models.model_b_prime
        # online training mutates Model-C, so each controller owns a copy
        self.dqn = Dqn.from_dict(models.dqn.to_dict())
        self.rng = np.random.default_rng(seed)
        self.tracked: dict[str, Tracked] = {}
        self.queue: list[str] = []

    # bookkeeping
    def bw_weights(self, services: Iterable[str]) -> dict[str, float]:
        out = {}
        for s in services:
            t = self.tracked.get(s)
            est = t.bw_gbs if t is not None and t.bw_gbs is not None else None
            out[s] = self.cfg.unknown_bw_gbs if est is None else max(est, 0.0)
        return out

    def _changed(self, before: Mapping[str, Allocation]) -> None:
        after = self.ledger.state()
        for s in set(before) | set(after):
            if before.get(s) != after.get(s) and s in self.tracked:
                self.tracked[s].changed = self.tick

    def tolerance(self, sid: str) -> float:
        rs = self.server.services[sid]
        return float(self.cfg.qos_tolerances.get(sid, rs.spec.qos_tolerance_pct))

    def _qos(self, sid: str) -> float:
        return self.server.services[sid].profile.qos_target_ms

    def _fresh(self, sid: str) -> list[float]:
        """Latencies measured since the service's allocation last changed."""
        since = self.tracked[sid].changed
        out = []
        for t, lat in reversed(self.server.services[sid].latencies):
            if t <= since:
                break
            out.append(lat)
        return out[::-1]

    def _sample(self, sid: str) -> TelemetrySnapshot | None:
        fresh = self._fresh(sid)[-self.cfg.sampling_window_ticks:]
        if not fresh:
            return None
        return self.server.snapshot(sid, float(np.mean(fresh)))

    def _running(self, exclude: str | None = None) -> list[str]:
        return [s for s in sorted(self.tracked)
                if s != exclude and self.tracked[s].phase == "running" and s in self.ledger]

    def _effective_tolerance(self, sid: str, latency: float) -> float:
        """Tolerated slowdown, capped so the service stays within its QoS target."""
        headroom = (self._qos(sid) / latency - 1.0) * 100.0
        return max(0.0, min(self.tolerance(sid), headroom))

    # the tick
    def on_tick(self, tick: int, sim_events: list[SimEvent]) -> list[SchedulerEvent]:
        self.tick = tick
        start = len(self.events)
        for e in sim_events:
            if e.kind == "arrival":
                self.queue.append(e.service_id)
            elif e.kind == "departure":
                self.depart(e.service_id)
        for sid in sorted(self.tracked):
            t = self.tracked.get(sid)
            if t is not None and t.phase == "sampling" and \
                    len(self._fresh(sid)) >= self.cfg.sampling_window_ticks:
                self.admit(sid)
        # new services are sampled one at a time, in arrival order
        if self.queue and not any(t.phase == "sampling" for t in self.tracked.values()):
            self.place(self.queue.pop(0))
        if tick % self.cfg.monitor_interval_ticks == 0:
            for sid in self._running():
                if sid not in self.tracked or self.tracked[sid].changed >= tick:
                    continue
                fresh = self._fresh(sid)
                if not fresh:
                    continue
                if fresh[-1] > self._qos(sid):
                    self.handle_insufficient(sid)
                elif (len(fresh) >= self.cfg.sampling_window_ticks
                      and max(fresh[-self.cfg.sampling_window_ticks:]) <= self._qos(sid)
                      and tick >= self.tracked[sid].hold_until):
                    self.reclaim_surplus(sid)
        return self.events[start:]

    # arrivals and departures
    def place(self, sid: str) -> None:
        """Temporarily map a new service onto every idle resource for sampling."""
        led = self.ledger
        rs = self.server.services[sid]
        idle_c, idle_w, _ = led.idle()
        self.tracked[sid] = Tracked(changed=self.tick)
        if idle_c == 0:
            self.tracked.pop(sid)
            self._migrate(sid, "no idle core to sample on")
            return
        threads = rs.spec.threads
        if idle_w >= 1:
            alloc = Allocation(idle_c, frozenset(led.idle_way_ids()), threads=threads)
            self._commit("place", (sid,), {sid: alloc}, "sampling on idle resources")
            return
        donor = None
        best = None
        for n in self._running():
            snap = self._sample(n)
            if snap is None or len(led[n].exclusive_ways) < 2:
                continue
            key = (self.model_b_prime.infer(snap, (0, 0.5)), n)
            if best is None or key < best:
                best, donor = key, n
        if donor is None:
            self.tracked.pop(sid)
            self._migrate(sid, "no way available for sampling")
            return
        way = max(led[donor].exclusive_ways)
        alloc = Allocation(idle_c, frozenset({way}), threads=threads, shared_ways=frozenset({way}))
        d = led[donor]
        self._commit("place", (sid, donor),
                     {sid: alloc, donor: d.with_(shared_ways=d.shared_ways | {way})},
                     "sampling on idle cores with one shared way")

    def depart(self, sid: str) -> None:
        self.tracked.pop(sid, None)
        if sid in self.queue:
            self.queue.remove(sid)
        if self.ledger.allocations:
            current = {s: a.bw_share for s, a in self.ledger.allocations.items()}
            if current != partition_quantized(self.bw_weights(sorted(current))):
                self._commit("partition", tuple(sorted(current)), {}, f"{sid} departed")

    # admission
    def _target(self, pred: OAAPrediction) -> tuple[int, int]:
        p = self.ledger.platform
        mc, mw = self.cfg.oaa_margin
        rc, rw = pred.rcliff
        oc, ow = pred.oaa
        return min(max(oc, rc + mc), p.total_cores), min(max(ow, rw + mw), p.total_ways)

    def admit(self, sid: str) -> None:
        led = self.ledger
        snap = self._sample(sid)
        pred = self.model_a.infer(snap)
        t = self.tracked[sid]
        t.prediction = pred
        t.bw_gbs = pred.oaa_bw_gbs
        t.phase = "running"
        cur = led[sid]
        idle_c, idle_w, _ = led.idle()
        avail = (cur.cores + idle_c, len(cur.exclusive_ways) + idle_w)
        target = self._target(pred)
        if avail[0] >= target[0] and avail[1] >= target[1] and not cur.shared_ways:
            self._commit("admit", (sid,), {sid: led.resized(sid, *target)},
                         f"OAA {target} fits idle resources")
            return
        targets = [("OAA", target)]
        if self.cfg.allow_rcliff_admission:
            targets.append(("RCliff", pred.rcliff))
        for label, (tc, tw) in targets:
            need = (max(0, tc - avail[0]), max(0, tw - avail[1]))
            plan = self.deprivation_plan(sid, need)
            if plan is not None:
                for nsid, (dc, dw), policy, slow in plan:
                    n = led[nsid]
                    self._commit("deprive", (nsid, sid),
                                 {nsid: led.resized(nsid, n.cores - dc, n.ways - dw)},
                                 f"{policy} B-point for {sid}, predicted slowdown {slow:.1f}%")
                self._commit("admit", (sid,), {sid: self._resized_exclusive(sid, tc, tw)},
                             f"{label} {(tc, tw)} after deprivation")
                return
        # fallback: deprive what tolerances allow, then share the rest
        tc, tw = target
        rc, rw = pred.rcliff
        need = (max(0, tc - avail[0]), max(0, tw - avail[1]))
        plan = self.deprivation_plan(sid, need, partial=True) or []
        got = (avail[0] + sum(a[0] for _, a, _, _ in plan), avail[1] + sum(a[1] for _, a, _, _ in plan))
        grant = (min(tc, got[0]), min(tw, got[1]))
        if grant[0] < rc:
            self._migrate(sid, f"{rc - grant[0]} cores short of RCliff; cores are not shared")
            return
        updates = {n: led.resized(n, led[n].cores - dc, led[n].ways - dw) for n, (dc, dw), _, _ in plan}
        before = led.state()
        led.apply(updates)
        # with no exclusive way to give, the sampling share is kept
        alloc = self._resized_exclusive(sid, *grant) if grant[1] else cur.with_(cores=grant[0])
        led.apply({sid: alloc})
        sharing = None
        for ways in (tw, rw):
            sharing = self.share_plan(sid, ways - grant[1])
            if sharing is not None:
                break
        led.restore(before)
        if sharing is None:
            self._migrate(sid, "cannot be located on this server without sharing beyond tolerances "
                               f"(short {tw - grant[1]} ways)")
            return
        for n, (dc, dw), policy, slow in plan:
            self._commit("deprive", (n, sid), {n: updates[n]},
                         f"{policy} B-point for {sid}, predicted slowdown {slow:.1f}%")
        self._commit("admit", (sid,), {sid: alloc}, f"{grant} of OAA {target}")
        self._apply_share(sid, sharing)

    def _resized_exclusive(self, sid: str, cores: int, ways: int) -> Allocation:
        """``sid`` resized to ``ways`` exclusive ways (dropping any sampling share)."""
        led = self.ledger
        cur = led[sid]
        excl = set(cur.exclusive_ways)
        free = [w for w in led.idle_way_ids() if w not in excl]
        if ways > len(excl):
            need = ways - len(excl)
            if need > len(free):
                raise CapacityError(f"{need} more ways requested, {len(free)} idle")
            excl |= set(free[:need])
        else:
            excl = set(sorted(excl)[:ways])
        return cur.with_(cores=cores, way_ids=frozenset(excl), shared_ways=frozenset())

    def deprivation_plan(self, sid: str, need: tuple[int, int], partial: bool = False):
        """Best deprivation covering ``need`` from at most ``max_apps`` neighbours.

        Returns ``[(neighbour, (dcores, dways), policy, predicted_slowdown)]`` or
        ``None``.  Offers are Model-B B-points, capped so that no neighbour is
        pushed below its predicted RCliff; with ``verify_with_b_prime`` each
        neighbour's predicted slowdown at the amount actually taken must stay
        within its tolerance.  Plans are ranked by services touched, then total
        predicted slowdown, then service ids.  With ``partial`` the plan covering
        the most of ``need`` is returned even if it falls short.
        """
        if need == (0, 0):
            return []
        led = self.ledger
        offers: dict[str, list[tuple[str, tuple[int, int]]]] = {}
        ctx: dict[str, tuple[TelemetrySnapshot, float]] = {}
        for n in self._running(exclude=sid):
            snap = self._sample(n)
            if snap is None:
                continue
            tol = self._effective_tolerance(n, snap.resp_latency_ms)
            if snap_slowdown(tol) == 0:
                continue
            bps = self.model_b.infer(snap, tol)
            rc, rw = self.model_a.infer(snap).rcliff
            a = led[n]
            cap = (max(0, a.cores - max(rc, 1)), max(0, min(a.ways - max(rw, 1), len(a.exclusive_ways))))
            opts = []
            for policy, (bc, bw) in bps.policies().items():
                o = (min(bc, cap[0]), min(bw, cap[1]))
                if o != (0, 0) and o not in [x[1] for x in opts]:
                    opts.append((policy, o))
            if opts:
                offers[n] = opts
                ctx[n] = (snap, tol)
        best = None
        names = sorted(offers)
        for k in range(1, min(self.cfg.max_apps_in_deprivation, len(names)) + 1):
            for combo in itertools.combinations(names, k):
                for choice in itertools.product(*(offers[n] for n in combo)):
                    taken = self._take(combo, choice, need)
                    if taken is None or (taken[1] and not partial):
                        continue
                    plan, short = taken
                    slows = []
                    for n, amount, _ in plan:
                        snap, tol = ctx[n]
                        s = self.model_b_prime.infer(snap, amount)
                        if self.cfg.verify_with_b_prime and s > tol:
                            break
                        slows.append(s)
                    else:
                        key = (short, k, round(sum(slows), 9), combo)
                        if best is None or key < best[0]:
                            best = (key, [(n, amt, pol, s) for (n, amt, pol), s in zip(plan, slows)])
            if best is not None and not partial:
                return best[1]
        return None if best is None else best[1]

    @staticmethod
    def _take(combo, choice, need):
        """Amounts taken from each neighbour in turn, and the units still missing."""
        rem_c, rem_w = need
        plan = []
        for n, (policy, (oc, ow)) in zip(combo, choice):
            tc, tw = min(rem_c, oc), min(rem_w, ow)
            if (tc, tw) == (0, 0):
                return None
            plan.append((n, (tc, tw), policy))
            rem_c -= tc
            rem_w -= tw
        return plan, rem_c + rem_w

    # way sharing
    def share_plan(self, sid: str, ways_needed: int):
        """Sharing policy giving ``sid`` ``ways_needed`` more effective ways.

        A way held by two services counts half for each, so covering ``v`` ways
        takes ``2v`` shared ways.  Model-B' predicts each donor's slowdown for
        losing half of every way it shares; donors whose prediction exceeds
        their tolerance are left alone.  The accepted policy touches the fewest
        donors, then has the smallest total predicted slowdown.  Returns
        ``[(donor, way_ids, predicted_slowdown, crosses_rcliff)]`` or ``None``.
        """
        led = self.ledger
        want = 2 * ways_needed
        if want <= 0:
            return []
        options = {}
        for n in self._running(exclude=sid):
            snap = self._sample(n)
            if snap is None:
                continue
            tol = self._effective_tolerance(n, snap.resp_latency_ms)
            excl = sorted(led[n].exclusive_ways - led[sid].way_ids, reverse=True)
            limit = min(len(excl), want)
            if tol <= 0 or limit == 0:
                continue
            slows = self.model_b_prime.infer_many(snap, [(0, k / 2) for k in range(1, limit + 1)])
            ok = 0
            while ok < limit and slows[ok] <= tol:
                ok += 1
            if ok:
                options[n] = (slows[:ok], excl, snap)
        best = None
        names = sorted(options)
        for k in range(1, min(self.cfg.max_apps_in_deprivation, len(names)) + 1):
            for combo in itertools.combinations(names, k):
                if sum(len(options[n][0]) for n in combo) < want:
                    continue
                take = dict.fromkeys(combo, 0)
                for _ in range(want):
                    # next shared way from the donor with the smallest marginal slowdown
                    def marginal(n, take=take):
                        sl = options[n][0]
                        return (sl[take[n]] - (sl[take[n] - 1] if take[n] else 0.0), n)
                    n = min((n for n in combo if take[n] < len(options[n][0])), key=marginal)
                    take[n] += 1
                total = sum(options[n][0][take[n] - 1] for n in combo if take[n])
                key = (k, round(total, 9), combo)
                if best is None or key < best[0]:
                    best = (key, take)
            if best is not None:
                break
        if best is None:
            return None
        plan = []
        for n, k in sorted(best[1].items()):
            if k == 0:
                continue
            slows, excl, snap = options[n]
            rw = self.model_a.infer(snap).rcliff[1]
            cross = len(led[n].exclusive_ways) - k / 2 < rw
            plan.append((n, frozenset(excl[:k]), float(slows[k - 1]), cross))
        return plan

    def share(self, sid: str, need: tuple[int, int]) -> bool:
        """Cover ``need`` for ``sid`` by way sharing; cores are never shared."""
        nc, nw = need
        if nc > 0:
            self._report((sid,), f"{nc} cores short; cores are not shared")
            return False
        plan = self.share_plan(sid, nw)
        if plan is None:
            self._report((sid,), f"no sharing policy within tolerances for {nw} ways")
            return False
        self._apply_share(sid, plan)
        return True

    def _apply_share(self, sid: str, plan) -> None:
        led = self.ledger
        for n, ways, slow, cross in plan:
            recv, donor = led[sid], led[n]
            self._commit("share", (sid, n),
                         {sid: recv.with_(way_ids=recv.way_ids | ways, shared_ways=recv.shared_ways | ways),
                          n: donor.with_(shared_ways=donor.shared_ways | ways)},
                         f"{len(ways)} ways of {n} shared, predicted slowdown {slow:.1f}%"
                         + (" (cross-RCliff)" if cross else ""))

    # insufficient allocation
    def handle_insufficient(self, sid: str) -> int:
        """Grow ``sid`` with Model-C actions until QoS holds; returns actions applied."""
        led = self.ledger
        qos = self._qos(sid)
        snap = self._sample(sid)
        if snap is None or snap.resp_latency_ms <= qos and self.server.qos_met(sid):
            return 0
        lat = self.server.last_latency(sid)
        applied = 0
        if self._bandwidth_bound(sid, snap):
            pred = self.model_a.infer(snap)
            self.tracked[sid].bw_gbs = max(pred.oaa_bw_gbs, snap.mbl_gbs * 1.05)
            before = {s: a.bw_share for s, a in led.allocations.items()}
            if before != partition_quantized(self.bw_weights(sorted(before))):
                self._commit("partition", (sid,), {}, "bandwidth re-estimated")
                applied += 1
                lat = self.server.measure(sid, probe=True)
                snap = self.server.snapshot(sid, lat)
        p = led.platform
        for _ in range(self.cfg.action_budget):
            if lat <= qos:
                return applied
            cur = led[sid]
            allowed = GROWTH_MASK & np.array([cur.cores + dc <= p.total_cores and cur.ways + dw <= p.total_ways
                                              for dc, dw in ACTIONS])
            if not allowed.any():
                self._report((sid,), "at platform limits")
                return applied
            eps = self.cfg.epsilon if self.cfg.explore else 0.0
            status = snap.vector(MODEL_C_FEATURES)
            dc, dw = self.dqn.select(status, self.rng, allowed, eps)
            idle_c, idle_w, _ = led.idle()
            if dc > idle_c or dw > idle_w:
                idle_c, idle_w = self._reclaim_provisional(sid, dc - idle_c, dw - idle_w)
            if dc > idle_c or dw > idle_w:
                grow = (min(dc, idle_c), min(dw, idle_w))
                if grow != (0, 0):
                    self._commit("adjust", (sid,), {sid: led.resized(sid, cur.cores + grow[0], cur.ways + grow[1])},
                                 f"Model-C action {(dc, dw)}, idle part {grow}")
                    applied += 1
                if self.share(sid, (dc - grow[0], dw - grow[1])):
                    applied += 1
                return applied
            self._commit("adjust", (sid,), {sid: led.resized(sid, cur.cores + dc, cur.ways + dw)},
                         f"Model-C action {(dc, dw)}")
            applied += 1
            new_lat = self.server.measure(sid, probe=True)
            new_snap = self.server.snapshot(sid, new_lat)
            self._learn(snap, (dc, dw), new_snap)
            lat, snap = new_lat, new_snap
        if lat > qos:
            self._report((sid,), f"action budget {self.cfg.action_budget} exhausted")
        return applied

    def _reclaim_provisional(self, sid: str, short_c: int, short_w: int) -> tuple[int, int]:
        """Take up to the shortfall back from a service still sampling on idle resources.

        Sampling placements are provisional, so a running service in need comes
        first.  Returns the idle cores and ways afterwards.
        """
        led = self.ledger
        for n in sorted(self.tracked):
            if self.tracked[n].phase != "sampling" or n not in led:
                continue
            a = led[n]
            give_c = min(max(0, short_c), a.cores - 1)
            give_w = min(max(0, short_w), len(a.exclusive_ways) - 1)
            if give_c > 0 or give_w > 0:
                self._commit("deprive", (n, sid), {n: led.resized(n, a.cores - give_c, a.ways - give_w)},
                             f"provisional placement shrunk for {sid}")
            break
        idle_c, idle_w, _ = led.idle()
        return idle_c, idle_w

    def _bandwidth_bound(self, sid: str, snap: TelemetrySnapshot) -> bool:
        granted = self.ledger[sid].bw_share * self.ledger.platform.total_bw_gbs
        return snap.mbl_gbs >= 0.98 * granted

    def _learn(self, snap: TelemetrySnapshot, action: tuple[int, int], snap_next: TelemetrySnapshot) -> None:
        from .models import reward
        r = reward(snap.resp_latency_ms, snap_next.resp_latency_ms, *action)
        self.dqn.pool.add(Experience(snap.vector(MODEL_C_FEATURES), ACTION_INDEX[action], r,
                                     snap_next.vector(MODEL_C_FEATURES)))
        if self.cfg.online_training and len(self.dqn.pool) >= self.cfg.train_batch:
            self.dqn.train_step(self.cfg.train_batch, self.rng)

    # surplus reclaim
    def surplus(self, sid: str, snap: TelemetrySnapshot) -> tuple[bool, bool, tuple[int, int]]:
        rc, rw = self.model_a.infer(snap).rcliff
        a = self.ledger[sid]
        mc, mw = self.cfg.surplus_margin
        sc, sw = a.cores > rc + mc, a.ways > rw + mw
        return sc, sw, (rc, rw)

    def reclaim_surplus(self, sid: str) -> bool:
        """One Model-C reduction on a surplus service; rolled back if QoS breaks.

        Returns True when a reduction was kept.
        """
        led = self.ledger
        snap = self._sample(sid)
        if snap is None:
            return False
        sc, sw, (rc, rw) = self.surplus(sid, snap)
        triggered = (sc or sw) if self.cfg.surplus_per_dimension else (sc and sw)
        if not triggered:
            return False
        a = led[sid]
        allowed = REDUCTION_MASK & np.array([
            (dc == 0 or sc) and (dw == 0 or sw) and a.cores + dc >= max(rc, 1) and a.ways + dw >= max(rw, 1)
            for dc, dw in ACTIONS])
        if not allowed.any():
            return False
        eps = self.cfg.epsilon if self.cfg.explore else 0.0
        dc, dw = self.dqn.select(snap.vector(MODEL_C_FEATURES), self.rng, allowed, eps)
        before = led.state()
        self._commit("reclaim", (sid,), {sid: led.resized(sid, a.cores + dc, a.ways + dw)},
                     f"surplus over RCliff {(rc, rw)}; Model-C action {(dc, dw)}")
        lat = self.server.measure(sid, probe=True)
        new_snap = self.server.snapshot(sid, lat)
        self._learn(snap, (dc, dw), new_snap)
        if lat <= self._qos(sid):
            return True
        self.rollback(before, sid, f"QoS violated after {(dc, dw)}")
        self.tracked[sid].hold_until = self.tick + self.cfg.reclaim_backoff_ticks
        return False

    def rollback(self, before: Mapping[str, Allocation], sid: str, reason: str) -> None:
        pre = self.ledger.state()
        self.ledger.restore(before)
        if self.ledger.state() != dict(before):
            raise AssertionError("rollback did not restore the ledger")
        self._record("rollback", (sid,), pre, reason)


def run_policy(server: Server, policy: Controller, ticks: int) -> list[SchedulerEvent]:
    """Drive ``server`` for ``ticks`` ticks with ``policy`` reacting each tick."""
    policy.attach(server)
    start = len(policy.events)
    server.advance(ticks, policy)
    return policy.events[start:]
