import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osml.perf_surface import get_profile, latency_of
from osml.resources import Allocation, CapacityError, PreconditionError
from osml.server_sim import (
    TELEMETRY_FIELDS,
    ResourceLedger,
    Scenario,
    ScenarioError,
    Server,
    ServiceSpec,
    SimEvent,
    conservation_violations,
    partition_quantized,
    read_telemetry_csv,
    scenario_from_text,
    telemetry,
    write_telemetry_csv,
)


def spec(sid="svc", profile="xapian", arrival=0, load=0.5, **kw):
    prof = get_profile(profile)
    return ServiceSpec(sid, prof, arrival, ((arrival, load * prof.max_rps),), **kw)


def random_ledger(rng, n_max=5):
    ledger = ResourceLedger()
    for i in range(rng.integers(1, n_max + 1)):
        idle_c, idle_w, idle_bw = ledger.idle()
        if idle_c < 1 or idle_w < 1 or idle_bw < 0.01:
            break
        c = int(rng.integers(1, min(idle_c, 12) + 1))
        w = int(rng.integers(1, min(idle_w, 6) + 1))
        bw = round(float(rng.uniform(0.01, min(idle_bw, 0.3))), 2) or 0.01
        ledger.grant(f"s{i}", Allocation.of(c, w, bw))
    return ledger


class TestLedger:
    def test_grant_updates_idle(self):
        ledger = ResourceLedger()
        ledger.grant("a", Allocation.of(8, 6, 0.3))
        cores, ways, bw = ledger.idle()
        assert (cores, ways) == (28, 14)
        assert bw == pytest.approx(0.7)

    def test_over_commit_leaves_ledger_unchanged(self):
        ledger = ResourceLedger()
        ledger.grant("a", Allocation.of(34, 18, 0.9))
        before = ledger.state()
        assert ledger.idle()[:2] == (2, 2)
        with pytest.raises(CapacityError):
            ledger.grant("b", Allocation.of(4, 1, 0.05))
        assert ledger.state() == before

    def test_shared_way_counts_half(self):
        ledger = ResourceLedger()
        ledger.grant("a", Allocation(4, frozenset({6, 7}), 0.2), pin_ways=True)
        ledger.grant("b", Allocation(4, frozenset({7, 8}), 0.2), sharing=True)
        assert 7 in ledger["a"].way_ids and 7 in ledger["b"].way_ids
        assert ledger["a"].shared_ways == {7} == ledger["b"].shared_ways
        cont = ledger.contention()
        assert cont.effective_ways(ledger["a"]) == pytest.approx(1.5)
        prof = get_profile("xapian")
        rps = prof.reference_rps
        # b holds 1.5 effective ways: between the 1-way and 2-way surface values
        shared = latency_of(prof, ledger["b"], rps, cont)
        assert latency_of(prof, Allocation.of(4, 2, 0.2), rps) <= shared
        assert shared <= latency_of(prof, Allocation.of(4, 1, 0.2), rps)

    def test_overlap_without_sharing_flag_rejected(self):
        ledger = ResourceLedger()
        ledger.grant("a", Allocation(4, frozenset({7}), 0.2), pin_ways=True)
        with pytest.raises(CapacityError):
            ledger.grant("b", Allocation(4, frozenset({7}), 0.2), pin_ways=True)
        with pytest.raises(CapacityError):
            ledger.apply({"b": Allocation(4, frozenset({7}), 0.2)})
        assert "b" not in ledger

    def test_release_clears_stale_share_flags(self):
        ledger = ResourceLedger()
        ledger.grant("a", Allocation(4, frozenset({6, 7}), 0.2), pin_ways=True)
        ledger.grant("b", Allocation(4, frozenset({7}), 0.2), sharing=True)
        ledger.release("b")
        assert ledger["a"].shared_ways == frozenset()

    def test_resize_growth_and_shrink(self):
        ledger = ResourceLedger()
        ledger.grant("a", Allocation.of(4, 3, 0.2))
        ledger.grant("b", Allocation.of(4, 3, 0.2))
        ledger.resize("a", cores=6, ways=5)
        assert ledger["a"].cores == 6 and ledger["a"].ways == 5
        assert not (ledger["a"].way_ids & ledger["b"].way_ids)
        ledger.resize("a", ways=2)
        assert ledger["a"].ways == 2
        with pytest.raises(CapacityError):
            ledger.resize("a", cores=40)

    def test_shrink_drops_shared_ways_first(self):
        ledger = ResourceLedger()
        ledger.grant("a", Allocation.of(4, 4, 0.2))
        ledger.grant("b", Allocation.of(4, 2, 0.2))
        ledger.share_ways("b", "a", 2)
        assert ledger["b"].ways == 4 and len(ledger["b"].shared_ways) == 2
        ledger.resize("b", ways=2)
        assert ledger["b"].shared_ways == frozenset()
        assert ledger["a"].shared_ways == frozenset()

    def test_restore_roundtrip(self):
        ledger = ResourceLedger()
        ledger.grant("a", Allocation.of(4, 4, 0.2))
        saved = ledger.state()
        ledger.resize("a", cores=10)
        ledger.grant("b", Allocation.of(2, 2, 0.1))
        ledger.restore(saved)
        assert ledger.state() == saved

    def test_errors(self):
        ledger = ResourceLedger()
        ledger.grant("a", Allocation.of(4, 4, 0.2))
        with pytest.raises(PreconditionError):
            ledger.grant("a", Allocation.of(1, 1, 0.1))
        with pytest.raises(KeyError):
            ledger["nope"]
        with pytest.raises(CapacityError):
            ledger.grant("b", Allocation.of(1, 1, 0.9))

    @pytest.mark.parametrize("seed", range(100))
    def test_conservation_and_bookkeeping(self, seed):
        rng = np.random.default_rng(seed)
        ledger = random_ledger(rng)
        allocs = ledger.allocations
        cores, ways, bw = ledger.idle()
        assert cores == 36 - sum(a.cores for a in allocs.values())
        assert ways == 20 - sum(a.ways for a in allocs.values())
        assert bw == pytest.approx(1 - sum(a.bw_share for a in allocs.values()), abs=1e-9)
        assert conservation_violations(ledger) == []
        prof = get_profile("memcached")
        rps = prof.reference_rps
        for a in allocs.values():
            snap = telemetry(prof, a, rps, latency_of(prof, a, rps))
            assert (snap.allocated_cores, snap.allocated_ways) == (a.cores, a.ways)


class TestTelemetry:
    def test_full_allocation(self):
        prof = get_profile("moses")
        rps = prof.reference_rps
        a = Allocation.of(36, 20, 1.0)
        lat = latency_of(prof, a, rps)
        snap = telemetry(prof, a, rps, lat)
        assert snap.resp_latency_ms == pytest.approx(prof.base_at(rps))
        assert snap.qos_slowdown_pct == 0
        assert snap.ipc == pytest.approx(prof.ipc_max)

    def test_below_core_cliff(self):
        prof = get_profile("moses")
        rps = prof.reference_rps
        cpos, wpos = prof.cliff_positions(rps)
        above = Allocation.of(cpos, 20)
        below = Allocation.of(cpos - 1, 20)
        lat_above, lat_below = latency_of(prof, above, rps), latency_of(prof, below, rps)
        assert lat_below >= prof.core_cliff.severity * lat_above
        snap = telemetry(prof, below, rps, lat_below)
        assert snap.qos_slowdown_pct > 0
        assert snap.ipc < telemetry(prof, above, rps, lat_above).ipc

    def test_misses_elevated_below_llc_cliff(self):
        prof = get_profile("moses")
        rps = prof.reference_rps
        _, wpos = prof.cliff_positions(rps)
        a_in, a_out = Allocation.of(12, wpos), Allocation.of(12, wpos - 4)
        m_in = telemetry(prof, a_in, rps, latency_of(prof, a_in, rps)).cache_misses_per_s
        m_out = telemetry(prof, a_out, rps, latency_of(prof, a_out, rps)).cache_misses_per_s
        u = prof.load(rps)
        assert m_in == pytest.approx(prof.miss_base_per_s * u)
        assert m_out == pytest.approx(prof.miss_base_per_s * u * (1 + 4 / (wpos - 4)))

    @given(c=st.integers(1, 36), w=st.integers(1, 20), frac=st.floats(0.1, 1.0))
    @settings(max_examples=60, deadline=None)
    def test_nonnegative(self, c, w, frac):
        prof = get_profile("specjbb")
        rps = frac * prof.max_rps
        a = Allocation.of(c, w, 0.5)
        snap = telemetry(prof, a, rps, latency_of(prof, a, rps))
        assert all(getattr(snap, f) >= 0 for f in TELEMETRY_FIELDS)


class TestClock:
    def test_empty_scenario(self):
        srv = Server()
        assert srv.advance(10) == []
        assert srv.tick == 10

    def test_arrival_at_80(self):
        srv = Server(Scenario((spec("mongodb", "mongodb", arrival=80),)))
        seen = []
        srv.advance(100, on_tick=lambda t, ev: seen.extend((t, e) for e in ev))
        arrivals = [(t, e) for t, e in seen if e.kind == "arrival"]
        assert len(arrivals) == 1
        assert arrivals[0][0] == 80 == arrivals[0][1].tick

    def test_load_change_and_departure(self):
        prof = get_profile("xapian")
        s = ServiceSpec("x", prof, 2, ((2, 1000.0), (5, 2000.0)), departure=9)
        srv = Server(Scenario((s,)))
        srv.advance(6)
        assert srv.services["x"].rps == 2000.0
        srv.ledger.grant("x", Allocation.of(4, 4, 0.2))
        srv.advance(4)
        assert "x" not in srv.services and "x" not in srv.ledger

    @given(st.lists(st.tuples(st.integers(0, 20), st.sampled_from("abcdef")), min_size=1,
                    max_size=12, unique_by=lambda t: t[1]))
    @settings(max_examples=50, deadline=None)
    def test_simultaneous_events_ordered_by_service_id(self, arrivals):
        scen = Scenario(tuple(spec(sid, arrival=t) for t, sid in arrivals))
        srv = Server(scen)
        fired = srv.advance(21)
        keys = [(e.tick, e.service_id) for e in fired]
        assert keys == sorted(keys)
        assert len(fired) == len(arrivals)

    def test_measurement_lag(self):
        srv = Server(Scenario((spec("x"),)), noise=False)
        prof = srv.services.get("x")
        assert prof is None

        def react(tick, events):
            if tick == 0:
                srv.ledger.grant("x", Allocation.of(36, 20, 1.0))

        srv.step(react)
        assert srv.services["x"].latencies == []
        srv.step()
        assert srv.services["x"].latencies[0][0] == 1

    def test_sample_window(self):
        srv = Server(Scenario((spec("x"),)), noise=True, seed=3)
        srv.advance(1)
        srv.ledger.grant("x", Allocation.of(10, 10, 0.5))
        with pytest.raises(ValueError):
            srv.sample("x", 2)
        srv.advance(2)
        lats = [lat for _, lat in srv.services["x"].latencies]
        assert srv.sample("x", 2).resp_latency_ms == pytest.approx(np.mean(lats[-2:]))
        with pytest.raises(KeyError):
            srv.sample("nope")


def run_replay(seed):
    text = """
    [[service]]
    id = "moses"
    load = [[0, 0.5], [6, 0.8]]
    [[service]]
    id = "xapian"
    arrival = 3
    load = 0.4
    """
    srv = Server(scenario_from_text(text), seed=seed, record_telemetry=True)

    def place(tick, events):
        for e in events:
            if e.kind == "arrival":
                srv.ledger.grant(e.service_id, Allocation.of(12, 8, 0.4))

    srv.advance(12, place)
    return write_telemetry_csv(srv.telemetry_log), srv.event_log


class TestReplay:
    def test_bitwise_determinism(self):
        a, ev_a = run_replay(7)
        b, ev_b = run_replay(7)
        assert a == b and ev_a == ev_b
        c, _ = run_replay(8)
        assert a != c

    def test_csv_columns_and_roundtrip(self):
        text, _ = run_replay(1)
        header = text.splitlines()[0].split(",")
        assert header == ["tick", "service", *TELEMETRY_FIELDS]
        rows = read_telemetry_csv(text)
        assert write_telemetry_csv(rows) == text


class TestScenarioParsing:
    def test_rps_and_load(self):
        scen = scenario_from_text("""
        duration = 50
        [[service]]
        id = "m"
        profile = "memcached"
        rps = [[0, 1000], [10, 2000]]
        priority = 2
        qos_tolerance_pct = 5
        """)
        s = scen.services[0]
        assert scen.duration == 50
        assert s.rps_at(9) == 1000 and s.rps_at(10) == 2000
        assert (s.priority, s.qos_tolerance_pct, s.threads) == (2, 5.0, 24)

    @pytest.mark.parametrize("body, msg", [
        ('[[service]]\nid = "a"\nprofile = "nosuch"\nload = 0.5\n', "line 2"),
        ('[[service]]\nid = "a"\nprofile = "xapian"\n', "missing"),
        ('[[service]]\nid = "a"\nprofile = "xapian"\nload = 1.5\n', "outside"),
        ('[[service]\n', "malformed"),
    ])
    def test_errors(self, body, msg):
        with pytest.raises(ScenarioError, match=msg):
            scenario_from_text(body)

    def test_event_sort_key(self):
        events = [SimEvent(3, "load", "b"), SimEvent(3, "arrival", "a"), SimEvent(1, "load", "z")]
        assert [e.service_id for e in sorted(events, key=SimEvent.order_key)] == ["z", "a", "b"]


class TestPartition:
    def test_sums_to_one(self):
        shares = partition_quantized({"a": 3.0, "b": 1.0, "c": 1.0})
        assert sum(shares.values()) == pytest.approx(1.0)
        assert shares["a"] == pytest.approx(0.6)

    @given(st.dictionaries(st.text("abcdefgh", min_size=1, max_size=3),
                           st.floats(0, 50), min_size=1, max_size=12))
    def test_quantized(self, weights):
        shares = partition_quantized(weights)
        assert sum(shares.values()) == pytest.approx(1.0)
        assert all(v >= 0.01 - 1e-12 for v in shares.values())
        assert all(abs(v * 100 - round(v * 100)) < 1e-9 for v in shares.values())
