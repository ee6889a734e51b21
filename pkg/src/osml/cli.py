"""``osml`` command line: datagen | train | grid | fluctuate | report."""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import platform as pyplatform
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .baselines import PartiesConfig
from .harness import (
    POLICIES,
    SIM_POLICIES,
    ExperimentError,
    GridSpec,
    grid_report,
    run_fluctuating,
)
from .pipeline import MissingCheckpointError, ModelSuite, TrainConfig, dqn_dataset, train_all
from .scheduler import SchedulerConfig
from .server_sim import ScenarioError, load_scenario

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

EXIT_OK, EXIT_USAGE, EXIT_FAILED = 0, 1, 2
CONFIG_SECTIONS = ("train", "scheduler", "parties", "grid")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        doc = tomllib.loads(Path(path).read_text())
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"malformed config {path}: {exc}") from exc
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections {sorted(unknown)} (expected {CONFIG_SECTIONS})")
    return doc


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


def versions() -> dict[str, str]:
    try:
        own = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        own = "unknown"
    return {"python": pyplatform.python_version(), "numpy": np.__version__, "osml": own}


def write_manifest(out_dir: Path, command: str, seed: int, doc: dict, files: list[Path],
                   runtime: dict[str, float]) -> Path:
    lines = [f"command: {command}", f"seed: {seed}", f"config_hash: {config_hash(doc)}"]
    lines += [f"version.{k}: {v}" for k, v in versions().items()]
    lines += [f"runtime_s.{k}: {v:.3f}" for k, v in sorted(runtime.items())]
    lines += [f"file: {p.name}" for p in files]
    path = out_dir / f"manifest_{command}.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _write(path: Path, text: str) -> Path:
    try:
        path.write_text(text)
    except OSError as exc:
        raise ExperimentError(f"cannot write {path}: {exc}") from exc
    return path


def _checkpoints(args) -> Path:
    return Path(args.checkpoints) if args.checkpoints else Path(args.out_dir) / "checkpoints"


# -- subcommands -----------------------------------------------------------

def cmd_datagen(args, doc, out: Path) -> tuple[list[Path], dict]:
    from .datagen import bpoint_dataset, deprivation_grid, reduce_model_b, sweep_model_a
    from .models import Experience, ExperiencePool
    from .perf_surface import trained_profiles

    cfg = TrainConfig.from_dict({**doc.get("train", {}), "seed": args.seed})
    profiles = list(trained_profiles().values())
    files = []
    t0 = time.perf_counter()
    traces = sweep_model_a(profiles, thread_stride=cfg.a_thread_stride, core_stride=cfg.a_core_stride,
                           seed=cfg.seed)
    files.append(_write(out / "model_a_traces.csv", traces.to_csv()))
    files.append(_write(out / "model_b_bpoints.csv",
                        bpoint_dataset(reduce_model_b(profiles, seed=cfg.seed)).to_csv()))
    files.append(_write(out / "model_b_prime_grid.csv", deprivation_grid(profiles, seed=cfg.seed).to_csv()))
    data = dqn_dataset(profiles, cfg)
    pool = ExperiencePool(capacity=max(1, len(data)))
    pool.extend(Experience(s, int(a), float(r), s2) for s, a, r, s2 in
                zip(data.status, data.action, data.reward, data.status_next))
    files.append(_write(out / "model_c_experiences.csv", pool.to_csv()))
    return files, {"datagen": time.perf_counter() - t0}


def cmd_train(args, doc, out: Path) -> tuple[list[Path], dict]:
    cfg = TrainConfig.from_dict({**doc.get("train", {}), "seed": args.seed})
    t0 = time.perf_counter()
    suite, report = train_all(cfg)
    ck = _checkpoints(args)
    suite.save(ck)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("metric", "value"))
    for k, v in report.to_dict().items():
        if isinstance(v, dict):
            for kk, vv in sorted(v.items()):
                if k != "seconds":
                    w.writerow((f"{k}.{kk}", vv))
        else:
            w.writerow((k, repr(v) if isinstance(v, float) else v))
    files = [_write(out / "accuracy_report.csv", buf.getvalue())]
    files += [ck / name for name in sorted(p.name for p in ck.glob("*.json"))]
    print(f"Model-A holdout hit rate {report.model_a_hit_rate:.3f} on {report.model_a_holdout} samples")
    print(f"Model-B exact {report.model_b_exact:.3f}, within one unit {report.model_b_within_one:.3f}")
    print(f"checkpoints written to {ck}")
    runtime = {f"train.{k}": v for k, v in report.seconds.items()}
    runtime["train"] = time.perf_counter() - t0
    return files, runtime


def _load_models(args, policies):
    if "osml" not in policies:
        return None
    return ModelSuite.load(_checkpoints(args))


def cmd_grid(args, doc, out: Path) -> tuple[list[Path], dict]:
    policies = args.policy or list(POLICIES)
    spec = GridSpec.from_dict(doc.get("grid", {}))
    models = _load_models(args, policies)
    rep = grid_report(spec, policies, models, args.seed, workers=args.workers)
    for p in policies:
        print(f"{p:>10}: EMU {rep.emu[p]:.2f}")
    return rep.export(out), {f"grid.{k}": v for k, v in rep.runtime_s.items()}


def cmd_fluctuate(args, doc, out: Path) -> tuple[list[Path], dict]:
    policies = args.policy or list(SIM_POLICIES)
    bad = [p for p in policies if p not in SIM_POLICIES]
    if bad:
        raise UsageError(f"policy {bad[0]!r} cannot replay a scenario (choose from {SIM_POLICIES})")
    scenario = load_scenario(args.scenario) if args.scenario else None
    models = _load_models(args, policies)
    sched = SchedulerConfig.from_dict(doc.get("scheduler", {}))
    parties = PartiesConfig(**doc.get("parties", {}))
    rep = run_fluctuating(scenario, policies, models, args.seed, sched, parties)
    for p in policies:
        print(f"{p:>10}: {rep.actions[p]} scheduling actions")
    if "osml" in rep.actions and rep.actions.get("parties"):
        print(f"osml/parties action ratio {rep.actions['osml'] / rep.actions['parties']:.3f}")
    return rep.export(out), {f"fluctuate.{k}": v for k, v in rep.runtime_s.items()}


def cmd_report(args, doc, out: Path) -> tuple[list[Path], dict]:
    found = sorted(out.glob("*_summary.csv"))
    if not found:
        raise ExperimentError(f"no *_summary.csv files under {out} (run grid or fluctuate first)")
    for path in found:
        print(f"== {path.name}")
        for row in csv.DictReader(io.StringIO(path.read_text())):
            parts = [f"EMU {float(row['emu']):.2f}"] if row["emu"] else []
            parts += [f"actions {row['actions']}"] if row["actions"] else []
            print(f"{row['policy']:>10}: " + ", ".join(parts))
    return [], {}


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "grid": cmd_grid,
            "fluctuate": cmd_fluctuate, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--config", help="TOML file with [train], [scheduler], [parties], [grid] sections")
    common.add_argument("--out-dir", default="out")
    common.add_argument("--policy", action="append", choices=POLICIES,
                        help="policy to run; repeat for several (default: all applicable)")
    common.add_argument("--checkpoints", help="checkpoint directory (default: OUT_DIR/checkpoints)")
    parser = _Parser(prog="osml", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("datagen", parents=[common], help="write the training traces as CSV")
    sub.add_parser("train", parents=[common], help="train all models and write checkpoints")
    g = sub.add_parser("grid", parents=[common], help="co-location grid and EMU per policy")
    g.add_argument("--workers", type=int, default=1)
    f = sub.add_parser("fluctuate", parents=[common], help="replay the fluctuating-load scenario")
    f.add_argument("--scenario", help="scenario TOML (default: the packaged fluctuating scenario)")
    sub.add_parser("report", parents=[common], help="summarize exported results")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out_dir)
    try:
        doc = load_config(args.config)
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.perf_counter()
        files, runtime = COMMANDS[args.command](args, doc, out)
        runtime["total"] = time.perf_counter() - t0
        if args.command != "report":
            write_manifest(out, args.command, args.seed, doc, files, runtime)
    except (ExperimentError, MissingCheckpointError, ScenarioError, OSError) as exc:
        print(f"osml: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (UsageError, ValueError, TypeError) as exc:
        print(f"osml: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
