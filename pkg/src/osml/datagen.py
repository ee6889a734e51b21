"""Training-trace generation for the learned models.

Three kinds of traces, all computed from the zero-noise surface with an
optional per-record noise draw on the measured latency:

* ``sweep_model_a``: thread x core x way grids per (profile, rps), each record
  labeled with the analytic OAA, OAA bandwidth and RCliff.
* ``reduce_model_b``: resource reductions walked from the OAA (and a few
  points above it) along three angles, each step labeled with its slowdown.
  ``bpoint_dataset`` condenses the walks into B-point labels per tolerance.
* ``deprivation_grid``: the two-dimensional generalization used by Model-B'.

``derive_dqn_dataset`` pairs sweep records into experience tuples.
"""

from __future__ import annotations

import csv
import io
import zlib
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

import numpy as np

from .models import ACTION_INDEX, ACTIONS, MODEL_A_TARGETS, MODEL_B_TARGETS, SLOWDOWN_GRID, reward
from .perf_surface import NOISE_SIGMA, ServiceProfile, analytic_ground_truth, surface
from .resources import DEFAULT_PLATFORM, Platform
from .server_sim import MODEL_C_FEATURES, TELEMETRY_FIELDS, TelemetrySnapshot, telemetry_columns

DATASET_VERSION = "osml-traces-1"
LOAD_FRACTIONS = tuple(round(0.1 * k, 1) for k in range(1, 11))
ANGLES = ("horizontal", "oblique", "vertical")
B_START_OFFSETS = ((0, 0), (1, 1), (2, 2), (2, 0), (0, 2), (4, 0), (0, 4), (4, 4))
B_THREADS = (24,)


@dataclass(frozen=True)
class TraceRecord:
    profile: str
    rps: float
    threads: int
    cores: int
    ways: int
    bw_share: float
    snapshot: TelemetrySnapshot
    latency_ms: float
    labels: dict[str, float]


@dataclass
class TraceSet:
    """Column-oriented trace records.

    ``meta`` holds per-record coordinates (profile, rps, threads, cores, ways,
    ...), ``features`` the telemetry in table order, ``labels`` the targets.
    """

    kind: str
    meta: dict[str, np.ndarray]
    features: np.ndarray
    labels: np.ndarray
    label_names: tuple[str, ...]

    def __len__(self) -> int:
        return len(self.features)

    def feature(self, name: str) -> np.ndarray:
        return self.features[:, TELEMETRY_FIELDS.index(name)]

    def matrix(self, names: Sequence[str]) -> np.ndarray:
        cols = []
        for n in names:
            cols.append(self.feature(n) if n in TELEMETRY_FIELDS else self.meta[n].astype(float))
        return np.column_stack(cols) if cols else np.zeros((len(self), 0))

    def label(self, name: str) -> np.ndarray:
        return self.labels[:, self.label_names.index(name)]

    def subset(self, idx) -> TraceSet:
        idx = np.asarray(idx)
        return TraceSet(self.kind, {k: v[idx] for k, v in self.meta.items()},
                        self.features[idx], self.labels[idx], self.label_names)

    @staticmethod
    def concat(parts: Sequence[TraceSet]) -> TraceSet:
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ValueError("nothing to concatenate")
        first = parts[0]
        return TraceSet(first.kind,
                        {k: np.concatenate([p.meta[k] for p in parts]) for k in first.meta},
                        np.concatenate([p.features for p in parts]),
                        np.concatenate([p.labels for p in parts]), first.label_names)

    def records(self) -> Iterator[TraceRecord]:
        for i in range(len(self)):
            vals = dict(zip(TELEMETRY_FIELDS, self.features[i].tolist()))
            vals["allocated_cores"] = int(vals["allocated_cores"])
            vals["allocated_ways"] = int(vals["allocated_ways"])
            snap = TelemetrySnapshot(**vals)
            m = self.meta
            yield TraceRecord(str(m["profile"][i]), float(m["rps"][i]), int(m["threads"][i]),
                              int(m["cores"][i]), int(m["ways"][i]),
                              float(m.get("bw_share", np.ones(len(self)))[i]), snap,
                              snap.resp_latency_ms,
                              dict(zip(self.label_names, self.labels[i].tolist())))

    # CSV: a version row, then a header of meta + table-order features + labels
    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([DATASET_VERSION, self.kind])
        meta_keys = list(self.meta)
        w.writerow([*(f"meta:{k}" for k in meta_keys), *TELEMETRY_FIELDS,
                    *(f"label:{k}" for k in self.label_names)])
        for i in range(len(self)):
            row = [str(self.meta[k][i]) if self.meta[k].dtype.kind in "US" else repr(self.meta[k][i].item())
                   for k in meta_keys]
            row += [repr(float(v)) for v in self.features[i]]
            row += [repr(float(v)) for v in self.labels[i]]
            w.writerow(row)
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> TraceSet:
        rows = list(csv.reader(io.StringIO(text)))
        version, kind = rows[0]
        if version != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {version!r}")
        header, body = rows[1], rows[2:]
        meta_idx = [(i, h[5:]) for i, h in enumerate(header) if h.startswith("meta:")]
        feat_idx = [header.index(f) for f in TELEMETRY_FIELDS]
        lab_idx = [(i, h[6:]) for i, h in enumerate(header) if h.startswith("label:")]
        meta = {}
        for i, k in meta_idx:
            col = [r[i] for r in body]
            if k == "profile" or k == "angle":
                meta[k] = np.array(col, dtype=str)
            else:
                vals = [float(v) for v in col]
                meta[k] = (np.array(vals, dtype=int) if all(v.lstrip("-").isdigit() for v in col)
                           else np.array(vals))
        feats = np.array([[float(r[i]) for i in feat_idx] for r in body]).reshape(-1, len(feat_idx))
        labs = np.array([[float(r[i]) for i, _ in lab_idx] for r in body]).reshape(-1, len(lab_idx))
        return cls(kind, meta, feats, labs, tuple(k for _, k in lab_idx))


def _features(cols: dict[str, np.ndarray]) -> np.ndarray:
    return np.column_stack([np.ravel(cols[f]) for f in TELEMETRY_FIELDS])


def _noise(seed: int, profile: ServiceProfile, rps: float, n: int, tag: str = "") -> np.ndarray:
    key = [seed, zlib.crc32(f"{profile.name}/{tag}".encode()), int(round(rps * 1000))]
    return np.exp(NOISE_SIGMA * np.random.default_rng(key).standard_normal(n))


def desk_rps(profile: ServiceProfile, fractions: Sequence[float] = LOAD_FRACTIONS) -> list[float]:
    """The profile's rps levels plus the given fractions of its max load."""
    vals = set(float(r) for r in profile.rps_levels)
    vals |= {round(f * profile.max_rps, 6) for f in fractions}
    return sorted(vals)


def _axis(total: int, stride: int) -> np.ndarray:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    return np.arange(total, 0, -stride)


def sweep_count(n_cases: int, thread_stride: int = 1, core_stride: int = 1,
                platform: Platform = DEFAULT_PLATFORM) -> int:
    """Records a sweep produces over ``n_cases`` (profile, rps) pairs."""
    return (n_cases * len(_axis(platform.total_cores, thread_stride))
            * len(_axis(platform.total_cores, core_stride)) * platform.total_ways)


def oaa_labels(profile: ServiceProfile, rps: float, platform: Platform = DEFAULT_PLATFORM) -> np.ndarray:
    gt = analytic_ground_truth(profile, rps, platform=platform)
    return np.array([gt.oaa[0], gt.oaa[1], gt.oaa_bw_gbs, gt.rcliff[0], gt.rcliff[1]], dtype=float)


def sweep_model_a(profiles: Iterable[ServiceProfile], rps_levels: dict[str, Sequence[float]] | None = None,
                  thread_stride: int = 4, core_stride: int = 2, threads: Sequence[int] | None = None,
                  cores: Sequence[int] | None = None, seed: int = 0, noise: bool = True,
                  shared_ways: int = 0, platform: Platform = DEFAULT_PLATFORM) -> TraceSet:
    """Grid sweep with analytic labels.

    ``shared_ways`` > 0 models that many of the allocated ways being shared
    with one neighbor (each counts half); only allocations holding more ways
    than that are emitted.
    """
    t_axis = np.asarray(threads) if threads is not None else _axis(platform.total_cores, thread_stride)
    c_axis = np.asarray(cores) if cores is not None else _axis(platform.total_cores, core_stride)
    w_axis = np.arange(platform.total_ways, shared_ways, -1)
    parts = []
    for prof in sorted(profiles, key=lambda p: p.name):
        levels = (rps_levels or {}).get(prof.name) or desk_rps(prof)
        T, C, W = (a.ravel() for a in np.meshgrid(t_axis, c_axis, w_axis, indexing="ij"))
        W_eff = W - shared_ways / 2.0
        n = len(T)
        for rps in levels:
            lat = surface(prof, C, W_eff, rps, T, platform)
            if noise:
                lat = lat * _noise(seed, prof, rps, n, f"a{shared_ways}")
            cols = telemetry_columns(prof, C, W, rps, lat, T, ways_eff=W_eff, platform=platform)
            parts.append(TraceSet(
                "model_a",
                {"profile": np.full(n, prof.name), "rps": np.full(n, float(rps)),
                 "threads": T.copy(), "cores": C.copy(), "ways": W.copy(),
                 "bw_share": np.ones(n), "shared_ways": np.full(n, shared_ways)},
                _features(cols), np.tile(oaa_labels(prof, rps, platform), (n, 1)),
                MODEL_A_TARGETS))
    return TraceSet.concat(parts)


def slowdown_bucket(pct) -> np.ndarray:
    """Smallest 5% bucket containing ``pct`` (<=5%, <=10%, ...)."""
    pct = np.asarray(pct, dtype=float)
    return np.maximum(5.0, np.ceil(pct / 5.0 - 1e-9) * 5.0)


def _walk(angle: str, c0: int, w0: int) -> list[tuple[int, int]]:
    steps = []
    k = 1
    while True:
        if angle == "horizontal":
            d = (k, 0)
        elif angle == "vertical":
            d = (0, k)
        else:
            d = ((k + 1) // 2, k // 2)
        if c0 - d[0] < 1 or w0 - d[1] < 1:
            return steps
        steps.append(d)
        k += 1


def _starts(profile: ServiceProfile, rps: float, offsets, platform: Platform) -> list[tuple[int, int]]:
    oc, ow = analytic_ground_truth(profile, rps, platform=platform).oaa
    out = []
    for dc, dw in offsets:
        s = (min(platform.total_cores, oc + dc), min(platform.total_ways, ow + dw))
        if s not in out:
            out.append(s)
    return out


def _start_features(prof, rps, starts, threads, seed, noise, tag, platform):
    C = np.array([s[0] for s in starts for _ in threads])
    W = np.array([s[1] for s in starts for _ in threads])
    T = np.array([t for _ in starts for t in threads])
    lat0 = surface(prof, C, W, rps, T, platform)
    meas = lat0 * (_noise(seed, prof, rps, len(C), tag) if noise else 1.0)
    return C, W, T, lat0, _features(telemetry_columns(prof, C, W, rps, meas, T, platform=platform))


def reduce_model_b(profiles: Iterable[ServiceProfile], rps_levels: dict[str, Sequence[float]] | None = None,
                   threads: Sequence[int] = B_THREADS, start_offsets=B_START_OFFSETS,
                   seed: int = 0, noise: bool = True,
                   platform: Platform = DEFAULT_PLATFORM) -> TraceSet:
    """Reduction walks along the three angles, one record per step.

    Features are the snapshot at the starting allocation; labels are the
    zero-noise slowdown relative to the start and its bucket.
    """
    parts = []
    for prof in sorted(profiles, key=lambda p: p.name):
        for rps in (rps_levels or {}).get(prof.name) or desk_rps(prof):
            starts = _starts(prof, rps, start_offsets, platform)
            C, W, T, lat0, feats = _start_features(prof, rps, starts, threads, seed, noise, "b", platform)
            rows = {k: [] for k in ("i", "angle", "dc", "dw")}
            for i in range(len(C)):
                for angle in ANGLES:
                    for dc, dw in _walk(angle, int(C[i]), int(W[i])):
                        rows["i"].append(i)
                        rows["angle"].append(angle)
                        rows["dc"].append(dc)
                        rows["dw"].append(dw)
            idx = np.array(rows["i"], dtype=int)
            dc, dw = np.array(rows["dc"]), np.array(rows["dw"])
            lat = surface(prof, C[idx] - dc, W[idx] - dw, rps, T[idx], platform)
            slow = (lat - lat0[idx]) / lat0[idx] * 100.0
            n = len(idx)
            parts.append(TraceSet(
                "model_b_steps",
                {"profile": np.full(n, prof.name), "rps": np.full(n, float(rps)),
                 "threads": T[idx], "cores": C[idx], "ways": W[idx], "start": idx,
                 "angle": np.array(rows["angle"]), "deprive_cores": dc, "deprive_ways": dw},
                feats[idx], np.column_stack([slow, slowdown_bucket(slow)]),
                ("slowdown_pct", "slowdown_bucket")))
    return TraceSet.concat(parts)


def bpoint_dataset(steps: TraceSet, grid: Sequence[int] = SLOWDOWN_GRID) -> TraceSet:
    """B-point labels per (start, tolerance) from reduction walks.

    Along each angle the deprivable amount at tolerance ``b`` is the last step
    before the slowdown first exceeds ``b``; a trade that does not exist is 0.
    """
    m = steps.meta
    key = np.array([f"{p}|{r!r}|{s}" for p, r, s in zip(m["profile"], m["rps"], m["start"])])
    slow = steps.label("slowdown_pct")
    out_meta = {k: [] for k in ("profile", "rps", "threads", "cores", "ways", "qos_slowdown_pct")}
    feats, labels = [], []
    _, first = np.unique(key, return_index=True)
    for f in sorted(first):
        sel = np.flatnonzero(key == key[f])
        for b in grid:
            lab = []
            for angle in ANGLES:
                a_sel = sel[m["angle"][sel] == angle]
                ok = slow[a_sel] <= b
                k = int(np.argmin(ok)) if not ok.all() else len(a_sel)
                lab.append((int(m["deprive_cores"][a_sel[k - 1]]), int(m["deprive_ways"][a_sel[k - 1]]))
                           if k else (0, 0))
            (hc, _), (bc, bw), (_, vw) = lab
            labels.append([bc, bw, hc, vw])
            feats.append(steps.features[f])
            for name in ("profile", "rps", "threads", "cores", "ways"):
                out_meta[name].append(m[name][f])
            out_meta["qos_slowdown_pct"].append(b)
    return TraceSet("model_b", {k: np.array(v) for k, v in out_meta.items()},
                    np.array(feats), np.array(labels, dtype=float), MODEL_B_TARGETS)


def deprivation_grid(profiles: Iterable[ServiceProfile], rps_levels: dict[str, Sequence[float]] | None = None,
                     threads: Sequence[int] = B_THREADS, start_offsets=B_START_OFFSETS,
                     max_deprive: int = 8, seed: int = 0, noise: bool = True,
                     platform: Platform = DEFAULT_PLATFORM) -> TraceSet:
    """Slowdown for every (dc, dw) deprivation up to ``max_deprive`` per axis."""
    parts = []
    for prof in sorted(profiles, key=lambda p: p.name):
        for rps in (rps_levels or {}).get(prof.name) or desk_rps(prof):
            starts = _starts(prof, rps, start_offsets, platform)
            C, W, T, lat0, feats = _start_features(prof, rps, starts, threads, seed, noise, "b", platform)
            idx, dcs, dws = [], [], []
            for i in range(len(C)):
                for dc in range(0, min(max_deprive, int(C[i]) - 1) + 1):
                    for dw in range(0, min(max_deprive, int(W[i]) - 1) + 1):
                        idx.append(i)
                        dcs.append(dc)
                        dws.append(dw)
            idx, dc, dw = np.array(idx), np.array(dcs), np.array(dws)
            lat = surface(prof, C[idx] - dc, W[idx] - dw, rps, T[idx], platform)
            slow = np.maximum(0.0, (lat - lat0[idx]) / lat0[idx] * 100.0)
            n = len(idx)
            parts.append(TraceSet(
                "model_b_prime",
                {"profile": np.full(n, prof.name), "rps": np.full(n, float(rps)),
                 "threads": T[idx], "cores": C[idx], "ways": W[idx],
                 "deprive_cores": dc, "deprive_ways": dw},
                feats[idx], slow[:, None], ("slowdown_pct",)))
    return TraceSet.concat(parts)


# -- Model-C ---------------------------------------------------------------

@dataclass
class DqnDataset:
    status: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    status_next: np.ndarray
    group: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.action)

    @staticmethod
    def concat(parts: Sequence[DqnDataset]) -> DqnDataset:
        return DqnDataset(*(np.concatenate([getattr(p, k) for p in parts])
                            for k in ("status", "action", "reward", "status_next", "group")))


def derive_dqn_dataset(traces: TraceSet, max_delta: int = 3, per_group: int | None = None,
                       seed: int = 0) -> DqnDataset:
    """Pair records of the same (profile, rps, threads, sharing) group whose
    allocations differ by at most ``max_delta`` cores and ways.

    Every ordered pair (including a record with itself) yields one tuple; with
    ``per_group`` a seeded uniform subsample of that size is kept per group.
    """
    m = traces.meta
    shared = m.get("shared_ways", np.zeros(len(traces), dtype=int))
    keys = np.array([f"{p}|{r!r}|{t}|{s}" for p, r, t, s in zip(m["profile"], m["rps"], m["threads"], shared)])
    uniq, inv = np.unique(keys, return_inverse=True)
    feats_c = traces.matrix(MODEL_C_FEATURES)
    lat = traces.feature("resp_latency_ms")
    rng = np.random.default_rng(seed)
    parts = []
    for g in range(len(uniq)):
        sel = np.flatnonzero(inv == g)
        c, w = m["cores"][sel].astype(int), m["ways"][sel].astype(int)
        lookup = {(int(ci), int(wi)): int(i) for ci, wi, i in zip(c, w, sel)}
        src, dst, act = [], [], []
        for ci, wi, i in zip(c, w, sel):
            for dc, dw in ACTIONS:
                if max(abs(dc), abs(dw)) > max_delta:
                    continue
                j = lookup.get((int(ci) + dc, int(wi) + dw))
                if j is not None:
                    src.append(i)
                    dst.append(j)
                    act.append(ACTION_INDEX[(dc, dw)])
        src, dst, act = np.array(src, dtype=int), np.array(dst, dtype=int), np.array(act, dtype=int)
        if per_group is not None and len(src) > per_group:
            keep = np.sort(rng.choice(len(src), size=per_group, replace=False))
            src, dst, act = src[keep], dst[keep], act[keep]
        rew = np.array([reward(lat[i], lat[j], *ACTIONS[a]) for i, j, a in zip(src, dst, act)])
        parts.append(DqnDataset(feats_c[src], act, rew, feats_c[dst], np.full(len(act), g)))
    return DqnDataset.concat(parts)


def count_pairs(points: Iterable[tuple[int, int]], max_delta: int = 3) -> int:
    """Brute-force ordered-pair count with both coordinate gaps <= max_delta."""
    pts = list(points)
    return sum(1 for a in pts for b in pts
               if abs(a[0] - b[0]) <= max_delta and abs(a[1] - b[1]) <= max_delta)


# -- splits ----------------------------------------------------------------

@dataclass
class Split:
    train: TraceSet
    holdout: TraceSet
    train_idx: np.ndarray
    holdout_idx: np.ndarray


def build_datasets(traces: TraceSet, holdout_frac: float = 0.2, seed: int = 0) -> Split:
    """Seeded split stratified by profile; total holdout is round(frac * N).

    Per-profile holdout counts are apportioned by largest remainder so the
    overall split is exact to the record.
    """
    if len(traces) == 0:
        raise ValueError("empty trace set")
    rng = np.random.default_rng(seed)
    profiles = traces.meta["profile"]
    names = sorted(set(profiles.tolist()))
    groups = {n: np.flatnonzero(profiles == n) for n in names}
    total = round(holdout_frac * len(traces))
    raw = np.array([holdout_frac * len(groups[n]) for n in names])
    counts = np.floor(raw).astype(int)
    order = sorted(range(len(names)), key=lambda i: (-(raw[i] - counts[i]), names[i]))
    for i in order[: total - counts.sum()]:
        counts[i] += 1
    hold, train = [], []
    for n, k in zip(names, counts):
        perm = rng.permutation(groups[n])
        hold.append(perm[:k])
        train.append(perm[k:])
    hold_idx, train_idx = np.sort(np.concatenate(hold)), np.sort(np.concatenate(train))
    if len(hold_idx) == 0 or len(train_idx) == 0:
        raise ValueError("degenerate split: holdout or train is empty")
    return Split(traces.subset(train_idx), traces.subset(hold_idx), train_idx, hold_idx)


def labels_sound(profile: ServiceProfile, rps: float, platform: Platform = DEFAULT_PLATFORM) -> list[str]:
    """Problems with the analytic labels of one (profile, rps) pair, if any."""
    gt = analytic_ground_truth(profile, rps, platform=platform)
    qos = profile.qos_target_ms
    C, W = platform.total_cores, platform.total_ways
    out = []
    if surface(profile, *gt.oaa, rps, platform=platform) > qos:
        out.append("OAA misses QoS")
    cpos, wpos = profile.cliff_positions(rps)
    checks = [(gt.rcliff[0], C, cpos, profile.core_cliff, lambda x: surface(profile, x, W, rps, platform=platform)),
              (gt.rcliff[1], W, wpos, profile.llc_cliff, lambda x: surface(profile, C, x, rps, platform=platform))]
    for r, _, pos, cliff, lat in checks:
        if r <= 1:
            continue
        if lat(r - 1) <= qos:
            out.append("point below RCliff meets QoS")
        if cliff is not None and r == pos and lat(r - 1) / lat(r) < cliff.severity / 2:
            out.append("cliff step smaller than severity/2")
    return out


def full_scale_cases() -> int:
    """Allocation cases in the full sweep: 11 services x 5 rps levels."""
    return sweep_count(11 * 5)

