"""The learned schedulers built on :mod:`osml.tinynn`.

* :class:`ModelA` regresses the OAA point, its bandwidth, and the RCliff from
  an 11-feature telemetry snapshot.
* :class:`ModelB` maps a snapshot plus a tolerated slowdown to B-points, the
  cores/ways that can be taken from a service along three reduction angles;
  :class:`ModelBPrime` goes the other way, predicting the slowdown a given
  deprivation causes.
* :class:`Dqn` is the action-value learner used for online adjustment.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from . import tinynn
from .resources import DEFAULT_PLATFORM, Platform
from .server_sim import MODEL_A_FEATURES, MODEL_C_FEATURES, TelemetrySnapshot
from .tinynn import AdamState, MinMax, Mlp

ACTIONS: tuple[tuple[int, int], ...] = tuple(
    (dc, dw) for dc in range(-3, 4) for dw in range(-3, 4))
ACTION_INDEX = {a: i for i, a in enumerate(ACTIONS)}
GROWTH_MASK = np.array([dc >= 0 and dw >= 0 and (dc, dw) != (0, 0) for dc, dw in ACTIONS])
REDUCTION_MASK = np.array([dc <= 0 and dw <= 0 and (dc, dw) != (0, 0) for dc, dw in ACTIONS])

SLOWDOWN_GRID = (5, 10, 15, 20, 25, 30)
EQUAL_LATENCY_BAND_MS = 1.0
# Wide-range counters are log-compressed before min-max scaling.
LOG_FEATURES = frozenset({"cache_misses_per_s", "resp_latency_ms"})
OOD_SPAN = 10.0


class OutOfDistributionWarning(UserWarning):
    pass


# -- features --------------------------------------------------------------

@dataclass
class FeatureScaler:
    names: tuple[str, ...]
    norm: MinMax

    @staticmethod
    def _pre(names: Sequence[str], x: np.ndarray) -> np.ndarray:
        x = np.array(x, dtype=float, copy=True)
        for j, n in enumerate(names):
            if n in LOG_FEATURES:
                x[..., j] = np.log1p(np.maximum(x[..., j], 0.0))
        return x

    @classmethod
    def fit(cls, names: Sequence[str], x) -> FeatureScaler:
        return cls(tuple(names), MinMax.fit(cls._pre(names, np.atleast_2d(x))))

    def transform(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape[-1] != len(self.names):
            raise ValueError(f"expected {len(self.names)} features, got {x.shape[-1]}")
        return self.norm.apply(self._pre(self.names, x))

    def out_of_range(self, x) -> bool:
        z = self.transform(x)
        return bool(np.any(z < -OOD_SPAN) or np.any(z > 1 + OOD_SPAN))

    def to_dict(self) -> dict:
        return {"names": list(self.names), "lo": self.norm.lo.tolist(), "hi": self.norm.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> FeatureScaler:
        return cls(tuple(d["names"]), MinMax(np.array(d["lo"]), np.array(d["hi"])))


def snapshot_matrix(snaps: Iterable[TelemetrySnapshot], names: Sequence[str]) -> np.ndarray:
    return np.array([s.vector(names) for s in snaps], dtype=float).reshape(-1, len(names))


@dataclass
class Regressor:
    """An MLP with input scaling and min-max output scaling."""

    net: Mlp
    x_scaler: FeatureScaler
    y_norm: MinMax

    @classmethod
    def fit(cls, names: Sequence[str], x, y, hidden: Sequence[int] = (40, 40),
            loss: str = "mse", epochs: int = 200, batch: int = 128, seed: int = 0,
            eta: float = 1e-3, y_norm: MinMax | None = None) -> tuple[Regressor, list[float]]:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float).reshape(len(x), -1)
        scaler = FeatureScaler.fit(names, x)
        if y_norm is None:
            y_norm = MinMax.fit(y)
            if loss == "weighted_b":
                # zero labels must stay exactly zero after scaling
                y_norm = MinMax(np.zeros(y.shape[1]), np.maximum(y_norm.hi, 0.0))
        net = Mlp.init([x.shape[1], *hidden, y.shape[1]], seed)
        hist = tinynn.train(net, scaler.transform(x), y_norm.apply(y), loss=loss,
                            epochs=epochs, batch=batch, seed=seed, eta=eta)
        return cls(net, scaler, y_norm), hist

    def predict(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return self.y_norm.invert(tinynn.forward(self.net, self.x_scaler.transform(x)))

    def check_ood(self, x, what: str) -> bool:
        ood = self.x_scaler.out_of_range(x)
        if ood:
            warnings.warn(f"{what}: input outside training range", OutOfDistributionWarning,
                          stacklevel=3)
        return ood

    def to_dict(self) -> dict:
        return {"net": tinynn.to_dict(self.net), "x_scaler": self.x_scaler.to_dict(),
                "y_lo": self.y_norm.lo.tolist(), "y_hi": self.y_norm.hi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> Regressor:
        net, _, _, _ = tinynn.from_dict(d["net"])
        return cls(net, FeatureScaler.from_dict(d["x_scaler"]),
                   MinMax(np.array(d["y_lo"]), np.array(d["y_hi"])))


# -- Model-A ---------------------------------------------------------------

@dataclass(frozen=True)
class OAAPrediction:
    oaa_cores: int
    oaa_ways: int
    oaa_bw_gbs: float
    rcliff_cores: int
    rcliff_ways: int
    raw: tuple[float, ...] = field(default=(), compare=False, repr=False)
    out_of_distribution: bool = field(default=False, compare=False)

    @property
    def oaa(self) -> tuple[int, int]:
        return self.oaa_cores, self.oaa_ways

    @property
    def rcliff(self) -> tuple[int, int]:
        return self.rcliff_cores, self.rcliff_ways


MODEL_A_TARGETS = ("oaa_cores", "oaa_ways", "oaa_bw_gbs", "rcliff_cores", "rcliff_ways")


def round_oaa(raw: Sequence[float], platform: Platform = DEFAULT_PLATFORM) -> tuple[int, int, float, int, int]:
    """Round the five regression heads and clamp them into platform bounds."""
    oc, ow, bw, rc, rw = (float(v) for v in raw)
    C, W = platform.total_cores, platform.total_ways
    rc_i = int(np.clip(round(rc), 1, C))
    rw_i = int(np.clip(round(rw), 1, W))
    oc_i = int(np.clip(round(oc), rc_i, C))
    ow_i = int(np.clip(round(ow), rw_i, W))
    return oc_i, ow_i, max(0.0, bw), rc_i, rw_i


@dataclass
class ModelA:
    reg: Regressor
    platform: Platform = DEFAULT_PLATFORM

    features = MODEL_A_FEATURES

    @classmethod
    def fit(cls, x, y, **kw) -> tuple[ModelA, list[float]]:
        reg, hist = Regressor.fit(MODEL_A_FEATURES, x, y, **kw)
        return cls(reg), hist

    def predict_raw(self, x) -> np.ndarray:
        return self.reg.predict(x)

    def predict_matrix(self, x) -> np.ndarray:
        """Rounded predictions, one row of five per input row."""
        return np.array([round_oaa(r, self.platform) for r in self.predict_raw(x)])

    def infer(self, snap: TelemetrySnapshot) -> OAAPrediction:
        x = snap.vector(self.features)
        ood = self.reg.check_ood(x, "Model-A")
        raw = self.predict_raw(x)[0]
        return OAAPrediction(*round_oaa(raw, self.platform), raw=tuple(map(float, raw)),
                             out_of_distribution=ood)

    def to_dict(self) -> dict:
        return {"kind": "model_a", **self.reg.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> ModelA:
        return cls(Regressor.from_dict(d))


# -- Model-B and B' --------------------------------------------------------

@dataclass(frozen=True)
class BPointSet:
    balanced: tuple[int, int] = (0, 0)
    core_dominated: tuple[int, int] = (0, 0)
    way_dominated: tuple[int, int] = (0, 0)

    def policies(self) -> dict[str, tuple[int, int]]:
        return {"balanced": self.balanced, "core_dominated": self.core_dominated,
                "way_dominated": self.way_dominated}


MODEL_B_FEATURES = MODEL_A_FEATURES + ("qos_slowdown_pct",)
MODEL_B_TARGETS = ("balanced_cores", "balanced_ways", "core_dominated_cores", "way_dominated_ways")
MODEL_B_PRIME_FEATURES = MODEL_A_FEATURES + ("deprive_cores", "deprive_ways")


def snap_slowdown(pct: float) -> int:
    """Largest grid bucket not above ``pct``; 0 below the first bucket."""
    if pct < SLOWDOWN_GRID[0]:
        return 0
    return max(b for b in SLOWDOWN_GRID if b <= pct)


def model_b_input(snap: TelemetrySnapshot, slowdown_pct: float) -> np.ndarray:
    return np.append(snap.vector(MODEL_A_FEATURES), float(slowdown_pct))


def bpoints_from_raw(raw: Sequence[float], cores: int, ways: int) -> BPointSet:
    """Round, clamp to what the service can give up, and order the policies."""
    bc, bw, cc, ww = (max(0, int(round(float(v)))) for v in raw)
    max_c, max_w = cores - 1, ways - 1
    bc, bw = min(bc, max_c), min(bw, max_w)
    cc = min(max(cc, bc), max_c)
    ww = min(max(ww, bw), max_w)
    return BPointSet((bc, bw), (cc, 0), (0, ww))


@dataclass
class ModelB:
    reg: Regressor

    @classmethod
    def fit(cls, x, y, **kw) -> tuple[ModelB, list[float]]:
        kw.setdefault("loss", "weighted_b")
        reg, hist = Regressor.fit(MODEL_B_FEATURES, x, y, **kw)
        return cls(reg), hist

    def infer(self, snap: TelemetrySnapshot, qos_slowdown_pct: float) -> BPointSet:
        bucket = snap_slowdown(qos_slowdown_pct)
        if bucket == 0:
            return BPointSet()
        x = model_b_input(snap, bucket)
        self.reg.check_ood(x, "Model-B")
        return bpoints_from_raw(self.reg.predict(x)[0], snap.allocated_cores, snap.allocated_ways)

    def to_dict(self) -> dict:
        return {"kind": "model_b", **self.reg.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> ModelB:
        return cls(Regressor.from_dict(d))


@dataclass
class ModelBPrime:
    """Predicts the slowdown (%) a deprivation causes; regresses log1p(slowdown)."""

    reg: Regressor

    @classmethod
    def fit(cls, x, slowdown_pct, **kw) -> tuple[ModelBPrime, list[float]]:
        y = np.log1p(np.maximum(np.asarray(slowdown_pct, dtype=float), 0.0))
        reg, hist = Regressor.fit(MODEL_B_PRIME_FEATURES, x, y, **kw)
        return cls(reg), hist

    def predict(self, x) -> np.ndarray:
        return np.expm1(np.maximum(self.reg.predict(x)[:, 0], 0.0))

    def infer(self, snap: TelemetrySnapshot, deprive: tuple[float, float]) -> float:
        dc, dw = deprive
        if dc < 0 or dw < 0:
            raise ValueError("deprivation must be nonnegative")
        if dc == 0 and dw == 0:
            return 0.0
        x = np.append(snap.vector(MODEL_A_FEATURES), [float(dc), float(dw)])
        return float(self.predict(x)[0])

    def infer_many(self, snap: TelemetrySnapshot, deprivations: Sequence[tuple[float, float]]) -> np.ndarray:
        if not len(deprivations):
            return np.zeros(0)
        base = snap.vector(MODEL_A_FEATURES)
        x = np.array([np.append(base, d) for d in deprivations], dtype=float)
        out = self.predict(x)
        zero = np.array([d[0] == 0 and d[1] == 0 for d in deprivations])
        out[zero] = 0.0
        return out

    def to_dict(self) -> dict:
        return {"kind": "model_b_prime", **self.reg.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> ModelBPrime:
        return cls(Regressor.from_dict(d))


# -- Model-C ---------------------------------------------------------------

def reward(latency_prev_ms: float, latency_cur_ms: float, dcores: int, dways: int,
           equal_band_ms: float = EQUAL_LATENCY_BAND_MS) -> float:
    """Reward for one action: log of the latency change minus the resources added."""
    if latency_prev_ms <= 0 or latency_cur_ms <= 0:
        raise ValueError("latencies must be positive")
    cost = dcores + dways
    diff = latency_prev_ms - latency_cur_ms
    if abs(diff) < equal_band_ms:
        return float(-cost)
    if diff > 0:
        return math.log(diff) - cost
    return -math.log(-diff) - cost


def clamp_action(cores: int, ways: int, action: tuple[int, int],
                 platform: Platform = DEFAULT_PLATFORM) -> tuple[int, int]:
    dc, dw = action
    return (int(np.clip(cores + dc, 1, platform.total_cores)),
            int(np.clip(ways + dw, 1, platform.total_ways)))


@dataclass(frozen=True)
class Experience:
    status: np.ndarray
    action: int
    reward: float
    status_next: np.ndarray


class ExperiencePool:
    """Bounded FIFO replay buffer."""

    def __init__(self, capacity: int = 100_000):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: deque[Experience] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def add(self, exp: Experience) -> None:
        if not 0 <= exp.action < len(ACTIONS):
            raise ValueError(f"action index {exp.action} out of range")
        self._items.append(exp)

    def extend(self, exps: Iterable[Experience]) -> None:
        for e in exps:
            self.add(e)

    def sample(self, n: int, rng: np.random.Generator) -> list[Experience]:
        idx = rng.choice(len(self._items), size=n, replace=False)
        return [self._items[i] for i in idx]

    def arrays(self, items: Sequence[Experience] | None = None):
        items = list(self._items) if items is None else items
        s = np.array([e.status for e in items], dtype=float)
        a = np.array([e.action for e in items], dtype=int)
        r = np.array([e.reward for e in items], dtype=float)
        s2 = np.array([e.status_next for e in items], dtype=float)
        return s, a, r, s2

    def to_csv(self, names: Sequence[str] = MODEL_C_FEATURES) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([*(f"s_{n}" for n in names), "dcores", "dways", "reward",
                    *(f"s2_{n}" for n in names)])
        for e in self._items:
            dc, dw = ACTIONS[e.action]
            w.writerow([*map(repr, map(float, e.status)), dc, dw, repr(float(e.reward)),
                        *map(repr, map(float, e.status_next))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, capacity: int = 100_000) -> ExperiencePool:
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        k = header.index("dcores")
        pool = cls(capacity)
        for r in body:
            pool.add(Experience(np.array(r[:k], dtype=float),
                                ACTION_INDEX[(int(r[k]), int(r[k + 1]))], float(r[k + 2]),
                                np.array(r[k + 3:], dtype=float)))
        return pool


def greedy_index(q: np.ndarray, allowed: np.ndarray | None = None,
                 actions: Sequence[tuple[int, int]] | None = None) -> int:
    """Argmax with ties broken by smallest |dc| + |dw|, then lexicographically."""
    q = np.asarray(q, dtype=float)
    cand = np.arange(len(q)) if allowed is None else np.flatnonzero(allowed)
    if len(cand) == 0:
        raise ValueError("no allowed actions")
    best = q[cand].max()
    ties = [int(i) for i in cand if q[i] == best]
    if actions is None:
        return ties[0]
    return min(ties, key=lambda i: (abs(actions[i][0]) + abs(actions[i][1]), actions[i]))


class Dqn:
    """Policy/target network pair with an experience pool and epsilon-greedy selection.

    Works on raw status vectors; ``scaler`` (fitted on offline data) maps them to
    network inputs.  With ``n_actions`` other than 49 it is a generic learner.
    """

    def __init__(self, state_dim: int = len(MODEL_C_FEATURES), n_actions: int = len(ACTIONS),
                 hidden: Sequence[int] = (30, 30, 30), gamma: float = 0.9,
                 epsilon: float = 0.05, sync_period: int = 100, capacity: int = 100_000,
                 eta: float = 1e-3, seed: int = 0, scaler: FeatureScaler | None = None,
                 grad_clip: float | None = 10.0):
        self.policy = Mlp.init([state_dim, *hidden, n_actions], seed)
        self.target = self.policy.copy()
        self.gamma = gamma
        self.epsilon = epsilon
        self.sync_period = sync_period
        self.pool = ExperiencePool(capacity)
        self.adam = AdamState.for_params(self.policy.params, eta=eta)
        self.steps = 0
        self.scaler = scaler
        self.n_actions = n_actions
        self.grad_clip = grad_clip
        self.actions = ACTIONS if n_actions == len(ACTIONS) else None

    def _in(self, status) -> np.ndarray:
        status = np.atleast_2d(np.asarray(status, dtype=float))
        return status if self.scaler is None else self.scaler.transform(status)

    def q_values(self, status) -> np.ndarray:
        return tinynn.forward(self.policy, self._in(status))

    def target_q(self, status) -> np.ndarray:
        return tinynn.forward(self.target, self._in(status))

    def sync(self) -> None:
        self.target = self.policy.copy()

    def select_index(self, status, rng: np.random.Generator, allowed: np.ndarray | None = None,
                     epsilon: float | None = None) -> int:
        eps = self.epsilon if epsilon is None else epsilon
        if eps > 0 and rng.random() < eps:
            cand = np.arange(self.n_actions) if allowed is None else np.flatnonzero(allowed)
            return int(rng.choice(cand))
        return greedy_index(self.q_values(status)[0], allowed, self.actions)

    def select(self, status, rng: np.random.Generator, allowed: np.ndarray | None = None,
               epsilon: float | None = None) -> tuple[int, int]:
        return ACTIONS[self.select_index(status, rng, allowed, epsilon)]

    def bellman_step(self, s, a, r, s2) -> float:
        """One Adam step on mean (r + gamma max_a' Q_target(s', a') - Q(s, a))^2."""
        target = np.asarray(r, dtype=float) + self.gamma * self.target_q(s2).max(axis=1)
        x = self._in(s)
        q = tinynn.forward(self.policy, x)
        rows = np.arange(len(a))
        err = q[rows, a] - target
        out_grad = np.zeros_like(q)
        out_grad[rows, a] = 2.0 * err / len(a)
        grads = tinynn.backward(self.policy, x, out_grad)
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if norm > self.grad_clip:
                grads = [g * (self.grad_clip / norm) for g in grads]
        self.policy.set_params(tinynn.adam_step(self.policy.params, grads, self.adam))
        self.steps += 1
        if self.steps % self.sync_period == 0:
            self.sync()
        return float(np.mean(err * err))

    def train_step(self, batch_size: int = 200, rng: np.random.Generator | None = None) -> float | None:
        """Sample from the pool and take one Bellman step; ``None`` if the pool is too small."""
        if len(self.pool) < batch_size:
            warnings.warn(f"experience pool holds {len(self.pool)} < {batch_size}; skipping",
                          RuntimeWarning, stacklevel=2)
            return None
        rng = rng or np.random.default_rng(self.steps)
        return self.bellman_step(*self.pool.arrays(self.pool.sample(batch_size, rng)))

    def fit_offline(self, s, a, r, s2, steps: int, batch_size: int = 200, seed: int = 0) -> list[float]:
        rng = np.random.default_rng(seed)
        s, a, r, s2 = (np.asarray(v) for v in (s, a, r, s2))
        hist = []
        for _ in range(steps):
            idx = rng.choice(len(a), size=min(batch_size, len(a)), replace=False)
            hist.append(self.bellman_step(s[idx], a[idx], r[idx], s2[idx]))
        return hist

    def to_dict(self) -> dict:
        return {"kind": "dqn", "policy": tinynn.to_dict(self.policy),
                "target": tinynn.to_dict(self.target), "gamma": self.gamma,
                "epsilon": self.epsilon, "sync_period": self.sync_period,
                "capacity": self.pool.capacity, "steps": self.steps, "grad_clip": self.grad_clip,
                "scaler": None if self.scaler is None else self.scaler.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> Dqn:
        policy, _, _, _ = tinynn.from_dict(d["policy"])
        sizes = policy.layer_sizes
        dqn = cls(sizes[0], sizes[-1], sizes[1:-1], d["gamma"], d["epsilon"], d["sync_period"],
                  d["capacity"], scaler=None if d["scaler"] is None else FeatureScaler.from_dict(d["scaler"]),
                  grad_clip=d.get("grad_clip"))
        dqn.policy = policy
        dqn.target, _, _, _ = tinynn.from_dict(d["target"])
        dqn.adam = AdamState.for_params(policy.params, eta=dqn.adam.eta)
        dqn.steps = d["steps"]
        return dqn


def experience_from(snap_prev: TelemetrySnapshot, snap_next: TelemetrySnapshot,
                    action: tuple[int, int]) -> Experience:
    return Experience(snap_prev.vector(MODEL_C_FEATURES), ACTION_INDEX[action],
                      reward(snap_prev.resp_latency_ms, snap_next.resp_latency_ms, *action),
                      snap_next.vector(MODEL_C_FEATURES))
