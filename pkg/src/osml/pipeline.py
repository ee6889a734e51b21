"""End-to-end training: trace generation, model fitting, holdout evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import (
    bpoint_dataset,
    build_datasets,
    deprivation_grid,
    derive_dqn_dataset,
    reduce_model_b,
    sweep_model_a,
    DqnDataset,
)
from .models import (
    MODEL_A_FEATURES,
    MODEL_B_FEATURES,
    MODEL_B_PRIME_FEATURES,
    Dqn,
    FeatureScaler,
    ModelA,
    ModelB,
    ModelBPrime,
    bpoints_from_raw,
)
from .perf_surface import ServiceProfile, trained_profiles
from .server_sim import MODEL_C_FEATURES

CHECKPOINT_FILES = {
    "model_a": "model_a.json",
    "model_b": "model_b.json",
    "model_b_prime": "model_b_prime.json",
    "model_c": "model_c.json",
}


class MissingCheckpointError(FileNotFoundError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    a_thread_stride: int = 4
    a_core_stride: int = 2
    a_max_train: int = 40_000
    a_epochs: int = 100
    a_hidden: tuple[int, ...] = (40, 40)
    b_epochs: int = 300
    b_hidden: tuple[int, ...] = (40, 40)
    bp_epochs: int = 100
    bp_hidden: tuple[int, ...] = (40, 40)
    c_threads: tuple[int, ...] = (24,)
    c_per_group: int = 1500
    c_shared_ways: tuple[int, ...] = (2,)
    c_steps: int = 20_000
    c_batch: int = 200
    c_gamma: float = 0.1
    c_eta: float = 3e-4
    c_sync_period: int = 1000
    c_grad_clip: float = 10.0
    holdout_frac: float = 0.2
    eval_samples: int = 2000

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        conv = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**conv)


@dataclass
class ModelSuite:
    model_a: ModelA
    model_b: ModelB
    model_b_prime: ModelBPrime
    dqn: Dqn

    def save(self, directory: str | Path) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        docs = {"model_a": self.model_a.to_dict(), "model_b": self.model_b.to_dict(),
                "model_b_prime": self.model_b_prime.to_dict(), "model_c": self.dqn.to_dict()}
        for key, doc in docs.items():
            (d / CHECKPOINT_FILES[key]).write_text(json.dumps(doc, sort_keys=True))

    @classmethod
    def load(cls, directory: str | Path) -> ModelSuite:
        d = Path(directory)
        docs = {}
        for key, name in CHECKPOINT_FILES.items():
            path = d / name
            if not path.exists():
                raise MissingCheckpointError(f"missing checkpoint {path} (run `osml train` first)")
            docs[key] = json.loads(path.read_text())
        return cls(ModelA.from_dict(docs["model_a"]), ModelB.from_dict(docs["model_b"]),
                   ModelBPrime.from_dict(docs["model_b_prime"]), Dqn.from_dict(docs["model_c"]))


@dataclass
class AccuracyReport:
    model_a_hit_rate: float = 0.0
    model_a_holdout: int = 0
    model_b_exact: float = 0.0
    model_b_within_one: float = 0.0
    model_b_roundtrip: float = 0.0
    model_b_prime_mae_small: float = 0.0
    dqn_final_loss: float = 0.0
    records: dict[str, int] = field(default_factory=dict)
    seconds: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def model_a_hits(model: ModelA, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Rows whose OAA prediction is within one core and one way of the label."""
    pred = model.predict_matrix(x)
    return (np.abs(pred[:, 0] - labels[:, 0]) <= 1) & (np.abs(pred[:, 1] - labels[:, 1]) <= 1)


def _sample(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    return np.sort(rng.choice(n, size=min(n, k), replace=False))


def train_model_a(profiles, cfg: TrainConfig, report: AccuracyReport) -> ModelA:
    t0 = time.perf_counter()
    traces = sweep_model_a(profiles, thread_stride=cfg.a_thread_stride,
                           core_stride=cfg.a_core_stride, seed=cfg.seed)
    split = build_datasets(traces, cfg.holdout_frac, cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    train = split.train.subset(_sample(rng, len(split.train), cfg.a_max_train))
    model, _ = ModelA.fit(train.matrix(MODEL_A_FEATURES), train.labels, hidden=cfg.a_hidden,
                          epochs=cfg.a_epochs, batch=128, seed=cfg.seed)
    hold = split.holdout.subset(_sample(rng, len(split.holdout), cfg.eval_samples))
    hits = model_a_hits(model, hold.matrix(MODEL_A_FEATURES), hold.labels)
    report.model_a_hit_rate = float(hits.mean())
    report.model_a_holdout = len(hold)
    report.records["model_a"] = len(traces)
    report.seconds["model_a"] = time.perf_counter() - t0
    return model


def train_model_b(profiles, cfg: TrainConfig, report: AccuracyReport) -> tuple[ModelB, ModelBPrime]:
    t0 = time.perf_counter()
    bset = bpoint_dataset(reduce_model_b(profiles, seed=cfg.seed))
    split = build_datasets(bset, cfg.holdout_frac, cfg.seed)
    mb, _ = ModelB.fit(split.train.matrix(MODEL_B_FEATURES), split.train.labels,
                       hidden=cfg.b_hidden, epochs=cfg.b_epochs, batch=64, seed=cfg.seed)
    report.seconds["model_b"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    grid = deprivation_grid(profiles, seed=cfg.seed)
    gsplit = build_datasets(grid, cfg.holdout_frac, cfg.seed)
    mp, _ = ModelBPrime.fit(gsplit.train.matrix(MODEL_B_PRIME_FEATURES), gsplit.train.labels[:, 0],
                            hidden=cfg.bp_hidden, epochs=cfg.bp_epochs, batch=128, seed=cfg.seed)
    report.seconds["model_b_prime"] = time.perf_counter() - t0

    hold = split.holdout
    raw = mb.reg.predict(hold.matrix(MODEL_B_FEATURES))
    pts = [bpoints_from_raw(r, c, w) for r, c, w in zip(raw, hold.meta["cores"], hold.meta["ways"])]
    bal = np.array([p.balanced for p in pts])
    report.model_b_exact = float(np.mean(np.all(bal == hold.labels[:, :2], axis=1)))
    report.model_b_within_one = float(np.mean(np.all(np.abs(bal - hold.labels[:, :2]) <= 1, axis=1)))
    at10 = np.flatnonzero(hold.meta["qos_slowdown_pct"] == 10)
    if len(at10):
        xs = hold.matrix(MODEL_B_FEATURES)[at10, :-1]
        dep = bal[at10]
        pred = mp.predict(np.column_stack([xs, dep]))
        pred[np.all(dep == 0, axis=1)] = 0.0
        report.model_b_roundtrip = float(np.mean((pred >= 0) & (pred <= 15)))
    gh = gsplit.holdout
    y = gh.labels[:, 0]
    small = y < 30
    err = np.abs(mp.predict(gh.matrix(MODEL_B_PRIME_FEATURES)) - y)
    report.model_b_prime_mae_small = float(err[small].mean()) if small.any() else 0.0
    report.records["model_b"] = len(bset)
    report.records["model_b_prime"] = len(grid)
    return mb, mp


def dqn_dataset(profiles, cfg: TrainConfig) -> DqnDataset:
    parts = [derive_dqn_dataset(sweep_model_a(profiles, threads=cfg.c_threads, core_stride=1,
                                              seed=cfg.seed), per_group=cfg.c_per_group, seed=cfg.seed)]
    for k in cfg.c_shared_ways:
        traces = sweep_model_a(profiles, threads=cfg.c_threads, core_stride=1, seed=cfg.seed,
                               shared_ways=k)
        parts.append(derive_dqn_dataset(traces, per_group=cfg.c_per_group // 4, seed=cfg.seed + k))
    return DqnDataset.concat(parts)


def train_model_c(profiles, cfg: TrainConfig, report: AccuracyReport) -> Dqn:
    t0 = time.perf_counter()
    data = dqn_dataset(profiles, cfg)
    scaler = FeatureScaler.fit(MODEL_C_FEATURES, np.vstack([data.status, data.status_next]))
    dqn = Dqn(gamma=cfg.c_gamma, eta=cfg.c_eta, sync_period=cfg.c_sync_period,
              grad_clip=cfg.c_grad_clip, seed=cfg.seed, scaler=scaler)
    hist = dqn.fit_offline(data.status, data.action, data.reward, data.status_next,
                           steps=cfg.c_steps, batch_size=cfg.c_batch, seed=cfg.seed)
    dqn.sync()
    report.dqn_final_loss = float(np.mean(hist[-100:]))
    report.records["model_c"] = len(data)
    report.seconds["model_c"] = time.perf_counter() - t0
    return dqn


def train_all(cfg: TrainConfig | None = None,
              profiles: list[ServiceProfile] | None = None) -> tuple[ModelSuite, AccuracyReport]:
    cfg = cfg or TrainConfig()
    profiles = profiles or list(trained_profiles().values())
    report = AccuracyReport()
    ma = train_model_a(profiles, cfg, report)
    mb, mp = train_model_b(profiles, cfg, report)
    dqn = train_model_c(profiles, cfg, report)
    return ModelSuite(ma, mb, mp, dqn), report
