import itertools
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from naive_oracle import SMALL, naive_search
from osml.baselines import (
    OracleService,
    Parties,
    PartiesConfig,
    Unmanaged,
    frontier,
    oracle_bw_shares,
    oracle_search,
    thread_map,
)
from osml.harness import default_scenario
from osml.perf_surface import analytic_ground_truth, get_profile
from osml.scheduler import run_policy
from osml.server_sim import Scenario, Server, ServiceSpec, conservation_violations


def solo(profile, load, ticks=300, **kw):
    p = get_profile(profile)
    sc = Scenario((ServiceSpec(profile, p, 0, ((0, load * p.max_rps),)),), ticks)
    return Server(sc, seed=0, **kw)


def svc(name, frac, threads=None):
    p = get_profile(name)
    return OracleService(p, frac * p.max_rps, threads)


class TestPartiesConfig:
    def test_defaults(self):
        c = PartiesConfig()
        assert c.slack_threshold == 0.2
        assert c.dimensions == ("cores", "ways", "bandwidth")

    def test_validation(self):
        with pytest.raises(ValueError):
            PartiesConfig(slack_threshold=1.5)
        with pytest.raises(ValueError):
            PartiesConfig(dimensions=("cores", "disk"))


class TestParties:
    @pytest.mark.parametrize("load", [0.3, 0.5, 0.8])
    def test_probe_across_cliff_spikes_then_reverts(self, load):
        srv = solo("moses", load)
        ctrl = Parties()
        run_policy(srv, ctrl, 300)
        lats = dict(srv.services["moses"].latencies)
        ratio, t = max((lats[t] / lats[t - 1], t) for t in lats if t - 1 in lats)
        assert ratio >= 100
        probes = [e for e in ctrl.events if e.tick == t - 1]
        assert [e.kind for e in probes] == ["reclaim"]
        reverts = [e for e in ctrl.events if e.tick == t]
        assert [e.kind for e in reverts] == ["rollback"]
        assert (reverts[0].dcores, reverts[0].dways) == (-probes[0].dcores, -probes[0].dways)
        assert lats[t + 1] <= get_profile("moses").qos_target_ms

    def test_settles_to_zero_actions(self):
        srv = solo("xapian", 0.4)
        ctrl = Parties()
        run_policy(srv, ctrl, 300)
        assert not [e for e in ctrl.events if e.tick >= 250 and e.mutation]

    def test_one_action_per_service_per_tick(self):
        sc = default_scenario()
        srv = Server(sc, seed=0)
        ctrl = Parties()
        run_policy(srv, ctrl, sc.duration)
        per_tick = Counter(e.tick for e in ctrl.events if e.mutation and e.kind in ("adjust", "reclaim", "rollback"))
        for tick, n in per_tick.items():
            assert n <= len([s for s in sc.services if s.arrival <= tick])
        per_service = Counter((e.tick, e.service) for e in ctrl.events
                              if e.mutation and e.kind in ("adjust", "reclaim", "rollback"))
        assert max(per_service.values()) == 1
        assert ctrl.conservation_failures == []

    def test_violation_grows_monotonically(self):
        # an even split leaves moses one way short of its cliff; it must grow one unit at a time
        specs = (ServiceSpec("moses", get_profile("moses"), 0, ((0, 0.8 * get_profile("moses").max_rps),)),
                 ServiceSpec("login", get_profile("login"), 0, ((0, 0.1 * get_profile("login").max_rps),)))
        srv = Server(Scenario(specs, 80), seed=0)
        ctrl = Parties()
        run_policy(srv, ctrl, 80)
        ups = [e for e in ctrl.events if e.kind == "adjust" and e.service == "moses"]
        assert ups
        for e in ups:
            assert (e.dcores, e.dways) in ((1, 0), (0, 1), (0, 0))
            assert e.dcores >= 0 and e.dways >= 0 and e.dbw >= 0
        last = srv.services["moses"].latencies[-1][1]
        assert last <= get_profile("moses").qos_target_ms


class TestUnmanaged:
    def test_single_service_gets_everything(self):
        srv = solo("xapian", 0.4, ticks=5)
        run_policy(srv, Unmanaged(seed=1), 5)
        a = srv.ledger["xapian"]
        assert (a.cores, a.ways, a.bw_share) == (24, 20, 1.0)
        assert srv.services["xapian"].effective_cores == pytest.approx(24.0)

    def test_seeded_mapping(self):
        def run(seed):
            sc = default_scenario()
            srv = Server(sc, seed=0, bw_partitioned=False)
            run_policy(srv, Unmanaged(seed=seed), 100)
            return {s: rs.effective_cores for s, rs in srv.services.items()}
        assert run(3) == run(3)

    def test_colocation_not_faster_than_solo(self):
        pairs = [("moses", "img_dnn"), ("xapian", "login"), ("mongodb", "moses")]
        for a, b in pairs:
            alone = solo(a, 0.3, ticks=5, noise=False, bw_partitioned=False)
            run_policy(alone, Unmanaged(seed=0), 5)
            specs = tuple(ServiceSpec(n, get_profile(n), 0, ((0, 0.3 * get_profile(n).max_rps),)) for n in (a, b))
            both = Server(Scenario(specs, 5), seed=0, noise=False, bw_partitioned=False)
            run_policy(both, Unmanaged(seed=0), 5)
            assert both.services[a].latencies[-1][1] >= alone.services[a].latencies[-1][1]

    @settings(max_examples=50)
    @given(st.dictionaries(st.sampled_from("abcdef"), st.integers(1, 36), min_size=1),
           st.integers(1, 36), st.integers(0, 2**32 - 1))
    def test_thread_map_conserves_cores(self, threads, cores, seed):
        eff = thread_map(threads, cores, np.random.default_rng(seed))
        total = sum(threads.values())
        assert sum(eff.values()) == pytest.approx(min(total, cores))
        for s, e in eff.items():
            assert 0 < e <= threads[s] + 1e-9


class TestOracle:
    @pytest.mark.parametrize("name", ["xapian", "moses", "img_dnn", "login", "mongodb"])
    @pytest.mark.parametrize("frac", [0.2, 0.5, 0.9])
    def test_single_service_between_rcliff_and_oaa(self, name, frac):
        s = svc(name, frac)
        res = oracle_search([s])
        assert res.feasible and res.bw_shares == (1.0,)
        (c, w), = res.allocations
        gt = analytic_ground_truth(s.profile, s.rps)
        assert c >= gt.rcliff[0] and w >= gt.rcliff[1]
        assert c + w <= sum(gt.oaa)

    @pytest.mark.parametrize("name", ["xapian", "moses", "img_dnn", "login"])
    def test_identical_services_split_symmetrically(self, name):
        res = oracle_search([svc(name, 0.2), svc(name, 0.2)])
        assert res.feasible
        assert res.allocations[0] == res.allocations[1]
        assert res.bw_shares == (0.5, 0.5)

    def test_frontier_is_pareto_minimal(self):
        s = svc("moses", 0.5)
        pts = frontier(s, 1.0)
        assert pts == sorted(pts)
        assert all(b[1] < a[1] for a, b in zip(pts, pts[1:]))

    def test_infeasible_instance(self):
        res = oracle_search([svc("moses", 1.0)] * 4)
        assert not res.feasible and res.allocations == ()

    def test_service_cap(self):
        with pytest.raises(ValueError):
            oracle_search([svc("login", 0.1)] * 5)
        assert oracle_search([svc("login", 0.1)] * 5, max_services=5).feasible

    def test_deterministic(self):
        inst = [svc("xapian", 0.3), svc("moses", 0.3), svc("img_dnn", 0.3)]
        assert oracle_search(inst) == oracle_search(inst)

    def test_bandwidth_by_demand(self):
        inst = [svc("xapian", 0.3), svc("moses", 0.3)]
        shares = oracle_bw_shares(inst)
        assert sum(shares) == pytest.approx(1.0)
        d = [s.profile.bw_demand_at(s.rps) for s in inst]
        assert shares[0] / shares[1] == pytest.approx(d[0] / d[1], rel=0.1)

    @pytest.mark.parametrize("names", list(itertools.combinations(["xapian", "moses", "img_dnn", "login"], 2)))
    def test_pairs_match_naive_enumerator(self, names):
        for fracs in [(0.1, 0.1), (0.2, 0.3), (0.3, 0.1)]:
            inst = [svc(n, f) for n, f in zip(names, fracs)]
            res = oracle_search(inst, SMALL)
            assert (res.allocations if res.feasible else None) == naive_search(inst)

    def test_conservation_of_result(self):
        inst = [svc("xapian", 0.4), svc("moses", 0.4), svc("img_dnn", 0.4)]
        res = oracle_search(inst)
        assert sum(c for c, _ in res.allocations) <= 36
        assert sum(w for _, w in res.allocations) <= 20


def test_unmanaged_ledger_conserved():
    sc = default_scenario()
    srv = Server(sc, seed=0, bw_partitioned=False)
    ctrl = Unmanaged(seed=0)
    run_policy(srv, ctrl, sc.duration)
    assert ctrl.conservation_failures == []
    assert conservation_violations(srv.ledger, expect_full_bw=True) == []
