"""Experiment runners: co-location grids, the fluctuating-load replay, reports and exports."""

from __future__ import annotations

import csv
import io
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .baselines import OracleService, Parties, PartiesConfig, Unmanaged, oracle_search
from .perf_surface import get_profile
from .scheduler import Controller, Osml, SchedulerConfig, SchedulerEvent, events_to_csv, run_policy
from .server_sim import Scenario, Server, ServiceSpec, scenario_from_text

POLICIES = ("osml", "parties", "unmanaged", "oracle")
SIM_POLICIES = POLICIES[:3]


class ExperimentError(RuntimeError):
    pass


def default_scenario_text() -> str:
    return resources.files("osml").joinpath("scenarios/fluctuating.toml").read_text()


def default_scenario() -> Scenario:
    return scenario_from_text(default_scenario_text(), name="fluctuating")


def make_policy(name: str, models=None, seed: int = 0,
                scheduler_config: SchedulerConfig | None = None,
                parties_config: PartiesConfig | None = None) -> Controller:
    if name == "osml":
        if models is None:
            raise ExperimentError("the osml policy needs trained models")
        return Osml(models, scheduler_config, seed=seed)
    if name == "parties":
        return Parties(parties_config, seed=seed)
    if name == "unmanaged":
        return Unmanaged(seed=seed)
    raise ExperimentError(f"policy {name!r} cannot drive a simulation (choose from {SIM_POLICIES})")


@dataclass
class SimRun:
    policy: str
    server: Server
    controller: Controller

    @property
    def events(self) -> list[SchedulerEvent]:
        return self.controller.events

    @property
    def actions(self) -> int:
        return self.controller.action_count

    def traces(self) -> list[tuple[int, str, float, float]]:
        out = []
        for sid, rs in self.server.services.items():
            q = rs.profile.qos_target_ms
            out += [(t, sid, lat, q) for t, lat in rs.latencies]
        return sorted(out)


def simulate(scenario: Scenario, policy: str, models=None, seed: int = 0, ticks: int | None = None,
             scheduler_config: SchedulerConfig | None = None,
             parties_config: PartiesConfig | None = None) -> SimRun:
    ctrl = make_policy(policy, models, seed, scheduler_config, parties_config)
    srv = Server(scenario, seed=seed, bw_partitioned=ctrl.bw_partitioned)
    run_policy(srv, ctrl, scenario.duration if ticks is None else ticks)
    return SimRun(policy, srv, ctrl)


# -- grids -----------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    services: tuple[str, ...] = ("moses", "img_dnn", "xapian")
    step: float = 0.1
    arrival_gap: int = 5
    settle_ticks: int = 20
    judge_ticks: int = 3
    threads: int = 24
    background: str | None = None
    background_load: float = 0.0

    def __post_init__(self):
        if not 1 <= len(self.services) <= 3:
            raise ValueError("a grid takes one to three services")
        if not 0 < self.step <= 1:
            raise ValueError("step must lie in (0, 1]")
        if self.judge_ticks < 1 or self.settle_ticks < self.judge_ticks:
            raise ValueError("settle_ticks must cover judge_ticks")
        if self.background is not None:
            if self.background in self.services:
                raise ValueError("the background service must differ from the grid services")
            if not 0 < self.background_load <= 1:
                raise ValueError("background_load must lie in (0, 1]")

    @property
    def levels(self) -> tuple[float, ...]:
        n = int(round(1 / self.step))
        return tuple(round(k * self.step, 10) for k in range(1, n + 1))

    @classmethod
    def from_dict(cls, d: Mapping) -> GridSpec:
        d = dict(d)
        if "services" in d:
            d["services"] = tuple(d["services"])
        return cls(**d)


def grid_scenario(spec: GridSpec, loads: Sequence[float]) -> Scenario:
    """Services with nonzero load arriving ``arrival_gap`` ticks apart, after any background service."""
    specs = []
    t = 0
    for name, f in _with_background(spec, loads):
        if f <= 0:
            continue
        prof = get_profile(name)
        specs.append(ServiceSpec(name, prof, t, ((t, f * prof.max_rps),), threads=spec.threads))
        t += spec.arrival_gap
    duration = (t - spec.arrival_gap if specs else 0) + spec.settle_ticks
    return Scenario(tuple(specs), duration, "grid-probe")


def _with_background(spec: GridSpec, loads: Sequence[float]) -> list[tuple[str, float]]:
    pairs = list(zip(spec.services, loads))
    return ([(spec.background, spec.background_load)] if spec.background else []) + pairs


def probe(spec: GridSpec, policy: str, loads: Sequence[float], models=None, seed: int = 0) -> bool:
    """Whether every service meets QoS over the last ``judge_ticks`` ticks."""
    if policy == "oracle":
        svcs = [OracleService(get_profile(n), f * get_profile(n).max_rps, spec.threads)
                for n, f in _with_background(spec, loads) if f > 0]
        return oracle_search(svcs).feasible if svcs else True
    sc = grid_scenario(spec, loads)
    run = simulate(sc, policy, models, seed)
    end = sc.duration
    for s in sc.services:
        rs = run.server.services.get(s.service_id)
        if rs is None:
            return False
        tail = [lat for t, lat in rs.latencies if t >= end - spec.judge_ticks]
        if len(tail) < spec.judge_ticks or max(tail) > rs.profile.qos_target_ms:
            return False
    return True


def max_third(spec: GridSpec, policy: str, x: float, y: float, models=None, seed: int = 0) -> float | None:
    """Largest third-service fraction sustainable at ``(x, y)``; ``None`` marks a cross."""
    if not probe(spec, policy, (x, y, 0.0), models, seed):
        return None
    if len(spec.services) < 3:
        return 0.0
    levels = spec.levels
    lo, hi = 0, len(levels)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if probe(spec, policy, (x, y, levels[mid - 1]), models, seed):
            lo = mid
        else:
            hi = mid - 1
    return levels[lo - 1] if lo else 0.0


def _cell(args):
    spec, policy, x, y, models, seed = args
    return (x, y), max_third(spec, policy, x, y, models, seed)


def run_grid(spec: GridSpec, policy: str, models=None, seed: int = 0, workers: int = 1) -> dict:
    """Per-cell achieved third-service fraction, keyed by ``(x, y)`` in canonical order."""
    if policy not in POLICIES:
        raise ExperimentError(f"unknown policy {policy!r}")
    if policy == "osml" and models is None:
        raise ExperimentError("the osml policy needs trained models")
    ys = spec.levels if len(spec.services) >= 2 else (0.0,)
    jobs = [(spec, policy, x, y, models, seed) for x in spec.levels for y in ys]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            results = dict(ex.map(_cell, jobs))
    else:
        results = dict(map(_cell, jobs))
    return {k: results[k] for k in sorted(results)}


def cell_emu(cell: tuple[float, float], z: float | None) -> float:
    """Summed fractions of the grid services; a fixed background load is not counted."""
    return 0.0 if z is None else round(cell[0] + cell[1] + z, 10)


def emu(cells: Mapping[tuple[float, float], float | None]) -> float:
    return max((cell_emu(k, z) for k, z in cells.items()), default=0.0)


# -- reports ---------------------------------------------------------------

@dataclass
class RunReport:
    """Results of one experiment; every field exports to CSV and back."""

    kind: str
    cells: dict[str, dict[tuple[float, float], float | None]] = field(default_factory=dict)
    actions: dict[str, int] = field(default_factory=dict)
    traces: dict[str, list[tuple[int, str, float, float]]] = field(default_factory=dict)
    events: dict[str, list[SchedulerEvent]] = field(default_factory=dict)
    conservation_failures: dict[str, list[str]] = field(default_factory=dict)
    runtime_s: dict[str, float] = field(default_factory=dict)

    @property
    def emu(self) -> dict[str, float]:
        return {p: emu(c) for p, c in self.cells.items()}

    def cells_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("policy", "x", "y", "z_max", "cell_emu"))
        for p in sorted(self.cells):
            for (x, y), z in self.cells[p].items():
                w.writerow((p, repr(x), repr(y), "" if z is None else repr(z), repr(cell_emu((x, y), z))))
        return buf.getvalue()

    def summary_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("policy", "emu", "actions", "conservation_failures"))
        emus = self.emu
        for p in sorted(set(self.cells) | set(self.actions)):
            w.writerow((p, repr(emus[p]) if p in emus else "", self.actions.get(p, ""),
                        len(self.conservation_failures.get(p, []))))
        return buf.getvalue()

    def traces_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("policy", "tick", "service", "latency_ms", "qos_target_ms", "qos_met"))
        for p in sorted(self.traces):
            for t, sid, lat, q in self.traces[p]:
                w.writerow((p, t, sid, repr(lat), repr(q), int(lat <= q)))
        return buf.getvalue()

    def export(self, out_dir: str | Path) -> list[Path]:
        """Write the report's CSV files; returns the paths written."""
        d = Path(out_dir)
        try:
            d.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ExperimentError(f"cannot create output directory {d}: {exc}") from exc
        files = {f"{self.kind}_summary.csv": self.summary_csv()}
        if self.cells:
            files[f"{self.kind}_cells.csv"] = self.cells_csv()
        if self.traces:
            files[f"{self.kind}_latency.csv"] = self.traces_csv()
        for p, evs in sorted(self.events.items()):
            files[f"{self.kind}_events_{p}.csv"] = events_to_csv(evs)
        out = []
        for name, text in files.items():
            path = d / name
            try:
                path.write_text(text)
            except OSError as exc:
                raise ExperimentError(f"cannot write {path}: {exc}") from exc
            out.append(path)
        return out

    @classmethod
    def from_csv(cls, kind: str, summary: str, cells: str = "", traces: str = "",
                 events: Mapping[str, str] | None = None) -> RunReport:
        from .scheduler import events_from_csv
        rep = cls(kind)
        for row in csv.DictReader(io.StringIO(summary)):
            if row["actions"] != "":
                rep.actions[row["policy"]] = int(row["actions"])
        for row in csv.DictReader(io.StringIO(cells)):
            z = None if row["z_max"] == "" else float(row["z_max"])
            rep.cells.setdefault(row["policy"], {})[(float(row["x"]), float(row["y"]))] = z
        for row in csv.DictReader(io.StringIO(traces)):
            rep.traces.setdefault(row["policy"], []).append(
                (int(row["tick"]), row["service"], float(row["latency_ms"]), float(row["qos_target_ms"])))
        for p, text in (events or {}).items():
            rep.events[p] = events_from_csv(text)
        return rep


def grid_report(spec: GridSpec, policies: Sequence[str], models=None, seed: int = 0,
                workers: int = 1) -> RunReport:
    rep = RunReport("grid")
    for p in policies:
        t0 = time.perf_counter()
        rep.cells[p] = run_grid(spec, p, models, seed, workers)
        rep.runtime_s[p] = time.perf_counter() - t0
    return rep


def run_fluctuating(scenario: Scenario | None = None, policies: Sequence[str] = ("osml", "parties"),
                    models=None, seed: int = 0, scheduler_config: SchedulerConfig | None = None,
                    parties_config: PartiesConfig | None = None) -> RunReport:
    scenario = scenario or default_scenario()
    rep = RunReport("fluctuating")
    for p in policies:
        t0 = time.perf_counter()
        run = simulate(scenario, p, models, seed, scheduler_config=scheduler_config,
                       parties_config=parties_config)
        rep.actions[p] = run.actions
        rep.traces[p] = run.traces()
        rep.events[p] = list(run.events)
        rep.conservation_failures[p] = list(run.controller.conservation_failures)
        rep.runtime_s[p] = time.perf_counter() - t0
    return rep
