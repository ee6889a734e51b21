from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import pytest

from osml.harness import default_scenario
from osml.models import BPointSet, Dqn, OAAPrediction
from osml.perf_surface import ContentionState, get_profile, latency_of
from osml.resources import Allocation
from osml.scheduler import (
    EVENT_KINDS,
    Osml,
    SchedulerConfig,
    SchedulerEvent,
    Tracked,
    events_from_csv,
    events_to_csv,
    run_policy,
)
from osml.server_sim import Scenario, Server, ServiceSpec, conservation_violations, partition_quantized


@dataclass
class StubA:
    """Model-A returning ``big`` for snapshots taken on at least ``split`` cores."""

    big: OAAPrediction
    small: OAAPrediction
    split: int = 20

    def infer(self, snap):
        return self.big if snap.allocated_cores >= self.split else self.small


@dataclass
class StubB:
    points: BPointSet
    calls: list = field(default_factory=list)

    def infer(self, snap, slowdown):
        self.calls.append(slowdown)
        return self.points


@dataclass
class StubBPrime:
    fn: Callable = lambda dc, dw: 4.0

    def infer(self, snap, deprive):
        return 0.0 if tuple(deprive) == (0, 0) else float(self.fn(*deprive))

    def infer_many(self, snap, deprivations):
        return np.array([self.infer(snap, d) for d in deprivations])


@dataclass
class Suite:
    model_a: object
    model_b: object
    model_b_prime: object
    dqn: Dqn = field(default_factory=lambda: Dqn(seed=0))


def pred(oaa, rcliff, bw=5.0):
    return OAAPrediction(*oaa, bw, *rcliff)


# no reclamation unless a test asks for it
QUIET = dict(surplus_margin=(36, 20), explore=False)


def two_service_server(big_oaa, newcomer="xapian", load=0.4, arrival=10, tol=10.0):
    specs = (
        ServiceSpec("big", get_profile("xapian"), 0, ((0, 0.2 * get_profile("xapian").max_rps),),
                    qos_tolerance_pct=tol),
        ServiceSpec("new", get_profile(newcomer), arrival, ((arrival, load * get_profile(newcomer).max_rps),)),
    )
    return Server(Scenario(specs, 40), seed=0)


def kinds(events, service=None):
    return [e.kind for e in events if service is None or service in e.services]


class TestEvents:
    def test_csv_round_trip(self):
        evs = [SchedulerEvent(3, "deprive", ("a", "b"), -2, -1, -0.05, "why, with comma"),
               SchedulerEvent(4, "report", ("a",), reason="note", mutation=False)]
        assert events_from_csv(events_to_csv(evs)) == evs

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            SchedulerEvent(0, "teleport", ("a",))

    def test_kinds_cover_algorithms(self):
        assert {"admit", "deprive", "adjust", "reclaim", "rollback", "share", "reject", "report"} <= set(EVENT_KINDS)


class TestConfig:
    def test_defaults(self):
        c = SchedulerConfig()
        assert c.sampling_window_ticks == 2 and c.monitor_interval_ticks == 1
        assert c.max_apps_in_deprivation == 3 and c.oaa_margin == (2, 2)
        assert c.action_budget == 10 and c.epsilon == 0.05
        assert not c.allow_rcliff_admission

    def test_toml_and_validation(self):
        c = SchedulerConfig.from_toml("[scheduler]\nsampling_window_ticks = 3\noaa_margin = [1, 2]\n")
        assert c.sampling_window_ticks == 3 and c.oaa_margin == (1, 2)
        assert SchedulerConfig.from_dict(c.to_dict()) == c
        with pytest.raises(ValueError):
            SchedulerConfig.from_dict({"no_such_option": 1})
        with pytest.raises(ValueError):
            SchedulerConfig(sampling_window_ticks=0)
        with pytest.raises(ValueError):
            SchedulerConfig(oaa_margin=(-1, 0))


class TestAdmission:
    def test_idle_covers_oaa(self):
        srv = two_service_server(None)
        mb = StubB(BPointSet((3, 3), (3, 0), (0, 3)))
        models = Suite(StubA(pred((26, 12), (2, 2)), pred((8, 6), (2, 2))), mb, StubBPrime())
        ctrl = Osml(models, SchedulerConfig(**QUIET))
        run_policy(srv, ctrl, 20)
        new = [e for e in ctrl.events if "new" in e.services]
        assert [e.kind for e in new] == ["place", "admit"]
        assert (new[0].tick, new[1].tick) == (10, 12)
        assert (srv.ledger["new"].cores, srv.ledger["new"].ways) == (8, 6)
        assert mb.calls == []

    def test_deprivation_covers_shortfall(self):
        srv = two_service_server(None)
        models = Suite(StubA(pred((34, 19), (2, 2)), pred((5, 4), (2, 2))),
                       StubB(BPointSet((3, 3), (3, 0), (0, 3))), StubBPrime())
        ctrl = Osml(models, SchedulerConfig(**QUIET))
        run_policy(srv, ctrl, 13)
        tail = [e for e in ctrl.events if e.tick == 12]
        assert [(e.kind, e.service) for e in tail] == [("deprive", "big"), ("admit", "new")]
        assert (tail[0].dcores, tail[0].dways) == (-3, -3)
        big, new = srv.ledger["big"], srv.ledger["new"]
        assert (big.cores, big.ways) == (31, 16)
        assert (new.cores, new.ways) == (5, 4) and not new.shared_ways
        # the neighbour's replayed slowdown stays within its tolerance
        prof, rs = get_profile("xapian"), srv.services["big"]
        cont = ContentionState(platform_bw_gbs=76.8)
        before = latency_of(prof, Allocation.of(34, 19, big.bw_share), rs.rps, cont)
        after = latency_of(prof, Allocation.of(31, 16, big.bw_share), rs.rps, cont)
        assert (after - before) / before * 100 <= 10.0

    def test_no_tolerant_neighbour_rejects(self):
        srv = two_service_server(None, tol=0.0)
        models = Suite(StubA(pred((34, 19), (2, 2)), pred((5, 4), (2, 2))),
                       StubB(BPointSet((3, 3), (3, 0), (0, 3))), StubBPrime())
        ctrl = Osml(models, SchedulerConfig(**QUIET))
        run_policy(srv, ctrl, 12)
        big_before = srv.ledger["big"]
        run_policy(srv, ctrl, 1)
        assert "reject" in kinds(ctrl.events, "new")
        assert "new" not in srv.ledger and "new" in ctrl.migrated
        big = srv.ledger["big"]
        assert (big.cores, big.way_ids, big.shared_ways) == (big_before.cores, big_before.way_ids, frozenset())
        assert not any(e.kind == "deprive" for e in ctrl.events)

    def test_deprivation_touches_at_most_max_apps(self):
        specs = tuple(ServiceSpec(f"n{i}", get_profile("login"), 0, ((0, 0.1 * get_profile("login").max_rps),))
                      for i in range(4))
        specs += (ServiceSpec("new", get_profile("xapian"), 20, ((20, 0.3 * get_profile("xapian").max_rps),)),)
        srv = Server(Scenario(specs, 40), seed=0)
        # four neighbours at (8, 4) leave (4, 4) idle; covering (10, 8) takes three of them
        models = Suite(StubA(pred((8, 4), (2, 2)), pred((10, 8), (2, 2)), split=5),
                       StubB(BPointSet((2, 2), (3, 0), (0, 2))), StubBPrime())
        ctrl = Osml(models, SchedulerConfig(max_apps_in_deprivation=2, **QUIET))
        run_policy(srv, ctrl, 30)
        assert any(e.kind == "deprive" for e in ctrl.events)
        for tick in {e.tick for e in ctrl.events if e.kind == "deprive" and "new" in e.services}:
            touched = {e.service for e in ctrl.events if e.tick == tick and e.kind == "deprive"}
            assert len(touched) <= 2


def single(profile="xapian", load=0.4, ticks=60, arrival=0):
    prof = get_profile(profile)
    sc = Scenario((ServiceSpec("s", prof, arrival, ((arrival, load * prof.max_rps),)),), ticks)
    return Server(sc, seed=0)


class TestMonitoring:
    def test_steady_state_has_no_actions(self):
        srv = single()
        models = Suite(StubA(pred((6, 8), (4, 6)), pred((6, 8), (4, 6))), StubB(BPointSet()), StubBPrime())
        ctrl = Osml(models, SchedulerConfig(explore=False))
        run_policy(srv, ctrl, 5)
        n = ctrl.action_count
        assert n == 2
        run_policy(srv, ctrl, 100)
        assert ctrl.action_count == n

    def test_action_count_equals_mutations(self, suite):
        sc = default_scenario()
        srv = Server(sc, seed=0)
        ctrl = Osml(suite)
        run_policy(srv, ctrl, sc.duration)
        assert ctrl.action_count == sum(e.mutation for e in ctrl.events)
        assert ctrl.conservation_failures == []
        assert conservation_violations(srv.ledger, expect_full_bw=True) == []

    def test_arrival_at_80_admitted_after_window(self, suite):
        sc = default_scenario()
        srv = Server(sc, seed=0)
        ctrl = Osml(suite)
        run_policy(srv, ctrl, 90)
        mongo = [e for e in ctrl.events if e.service == "mongodb"]
        assert mongo[0].tick == 80 and mongo[0].kind == "place"
        assert [e.tick for e in mongo if e.kind == "admit"][0] == 80 + ctrl.cfg.sampling_window_ticks


class TestInsufficient:
    def _violating(self, models, cores=2, ways=2):
        srv = single(load=0.6)
        ctrl = Osml(models, SchedulerConfig(explore=False, **{"surplus_margin": (36, 20)}))
        run_policy(srv, ctrl, 3)
        led = srv.ledger
        led.apply({"s": led.resized("s", cores, ways)})
        ctrl.tracked["s"].changed = srv.tick - 1
        srv.step()
        return srv, ctrl

    def test_no_violation_is_noop(self):
        srv = single()
        models = Suite(StubA(pred((8, 10), (4, 6)), pred((8, 10), (4, 6))), StubB(BPointSet()), StubBPrime())
        ctrl = Osml(models, SchedulerConfig(explore=False))
        run_policy(srv, ctrl, 5)
        n = len(ctrl.events)
        assert ctrl.handle_insufficient("s") == 0
        assert len(ctrl.events) == n

    def test_restores_qos(self, suite):
        srv, ctrl = self._violating(suite)
        assert not srv.qos_met("s")
        applied = ctrl.handle_insufficient("s")
        assert 1 <= applied <= ctrl.cfg.action_budget
        assert srv.measure("s") <= get_profile("xapian").qos_target_ms

    def test_idle_exhausted_calls_sharing_once(self, suite, monkeypatch):
        srv, ctrl = self._violating(suite)
        led = srv.ledger
        # a filler takes every idle resource
        filler = ServiceSpec("f", get_profile("login"), 0, ((0, 10.0),))
        srv.add_service(filler)
        idle_c, idle_w, _ = led.idle()
        led.apply({"s": led["s"].with_(bw_share=0.5),
                   "f": Allocation(idle_c, frozenset(led.idle_way_ids()), 0.5)})
        calls = []
        monkeypatch.setattr(ctrl, "share", lambda sid, need: calls.append(need) or False)
        ctrl.handle_insufficient("s")
        assert len(calls) == 1


class TestReclaim:
    def test_not_triggered_at_oaa(self):
        srv = single()
        models = Suite(StubA(pred((6, 8), (4, 6)), pred((6, 8), (4, 6))), StubB(BPointSet()), StubBPrime())
        ctrl = Osml(models, SchedulerConfig(explore=False))
        run_policy(srv, ctrl, 5)
        assert ctrl.reclaim_surplus("s") is False
        assert kinds(ctrl.events) == ["place", "admit"]

    def test_surplus_is_returned(self, suite):
        srv = single()
        ctrl = Osml(suite, SchedulerConfig(explore=False))
        run_policy(srv, ctrl, 5)
        a = srv.ledger["s"]
        srv.ledger.apply({"s": srv.ledger.resized("s", a.cores + 4, a.ways + 4)})
        ctrl.tracked["s"].changed = srv.tick - 1
        srv.step()
        idle_before = srv.ledger.idle()[:2]
        kept = ctrl.reclaim_surplus("s")
        assert kept
        assert srv.ledger.idle()[0] >= idle_before[0] and srv.ledger.idle()[1] >= idle_before[1]
        assert srv.ledger.idle()[:2] != idle_before
        assert srv.measure("s") <= get_profile("xapian").qos_target_ms

    def test_rollback_restores_exactly(self):
        # a model claiming the RCliff sits at (1, 1) lets reductions cross the real cliff
        srv = single(profile="moses", load=0.5)
        models = Suite(StubA(pred((6, 9), (1, 1)), pred((6, 9), (1, 1))), StubB(BPointSet()), StubBPrime())
        ctrl = Osml(models, SchedulerConfig(epsilon=1.0))
        run_policy(srv, ctrl, 3)
        srv.step()
        rolled = 0
        for _ in range(40):
            # every episode starts from the admitted allocation and its measurements
            ctrl.tracked["s"].changed = 2
            ctrl.tracked["s"].hold_until = -1
            before = srv.ledger.state()
            n = len(ctrl.events)
            ctrl.reclaim_surplus("s")
            new = ctrl.events[n:]
            if any(e.kind == "rollback" for e in new):
                rolled += 1
                assert srv.ledger.state() == before
            srv.ledger.restore(before)
        assert rolled > 0


class TestSharing:
    def _server(self):
        specs = (ServiceSpec("donor", get_profile("img_dnn"), 0, ((0, 0.1 * get_profile("img_dnn").max_rps),),
                             qos_tolerance_pct=30.0),
                 ServiceSpec("s", get_profile("xapian"), 10, ((10, 0.2 * get_profile("xapian").max_rps),)))
        return Server(Scenario(specs, 30), seed=0)

    def test_identity_policy_never_selected(self):
        srv = self._server()
        models = Suite(StubA(pred((30, 16), (2, 2)), pred((6, 4), (2, 2))), StubB(BPointSet()),
                       StubBPrime(lambda dc, dw: 0.0))
        ctrl = Osml(models, SchedulerConfig(**QUIET))
        run_policy(srv, ctrl, 14)
        for need in (1, 2, 3):
            plan = ctrl.share_plan("s", need)
            assert plan is not None
            assert all(len(ways) > 0 for _, ways, _, _ in plan)
            assert sum(len(ways) for _, ways, _, _ in plan) == 2 * need
        assert ctrl.share_plan("s", 0) == []

    def test_intolerable_sharing_refused(self):
        srv = self._server()
        models = Suite(StubA(pred((30, 16), (2, 2)), pred((6, 4), (2, 2))), StubB(BPointSet()),
                       StubBPrime(lambda dc, dw: 50.0))
        ctrl = Osml(models, SchedulerConfig(**QUIET))
        run_policy(srv, ctrl, 14)
        assert ctrl.share_plan("s", 1) is None
        assert ctrl.share("s", (0, 1)) is False
        assert ctrl.share("s", (1, 0)) is False
        assert kinds(ctrl.events)[-2:] == ["report", "report"]

    def test_sharing_applied(self):
        srv = self._server()
        models = Suite(StubA(pred((30, 16), (2, 2)), pred((6, 4), (2, 2))), StubB(BPointSet()),
                       StubBPrime(lambda dc, dw: 1.0))
        ctrl = Osml(models, SchedulerConfig(**QUIET))
        run_policy(srv, ctrl, 14)
        assert ctrl.share("s", (0, 1))
        ev = ctrl.events[-1]
        assert ev.kind == "share" and ev.services == ("s", "donor")
        shared = srv.ledger["s"].shared_ways
        assert len(shared) == 2 and shared == srv.ledger["donor"].shared_ways
        assert conservation_violations(srv.ledger, expect_full_bw=True) == []


class TestBandwidth:
    def test_ratio_partition(self):
        srv = single()
        models = Suite(StubA(pred((6, 8), (4, 6)), pred((6, 8), (4, 6))), StubB(BPointSet()), StubBPrime())
        ctrl = Osml(models).attach(srv)
        ctrl.tracked = {"a": Tracked(bw_gbs=30.0), "b": Tracked(bw_gbs=10.0)}
        shares = partition_quantized(ctrl.bw_weights(["a", "b"]))
        assert shares == {"a": 0.75, "b": 0.25}
        assert shares["a"] * 76.8 == pytest.approx(57.6) and shares["b"] * 76.8 == pytest.approx(19.2)

    def test_unknown_demand_uses_default(self):
        models = Suite(StubA(pred((6, 8), (4, 6)), pred((6, 8), (4, 6))), StubB(BPointSet()), StubBPrime())
        ctrl = Osml(models, SchedulerConfig(unknown_bw_gbs=7.0))
        assert ctrl.bw_weights(["x"]) == {"x": 7.0}
