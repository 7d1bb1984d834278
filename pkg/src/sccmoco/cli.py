"""Command-line front end: generate, solve, train, fine-tune, evaluate.

Every command writes into ``--out`` and echoes its configuration (preset,
seed, schema versions) into a JSON manifest next to its artifacts.
Exit codes: 0 on success, 2 on configuration errors, 3 on runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import costmodel, instance as inst_mod
from .costmodel import Assignment, UndefinedRateError, avg_placements, is_feasible, local_rate, objectives
from .heuristics import front_from_tradeoffs, random_front, repair
from .instance import GeneratorConfig, Instance, desk_config, generate_instances, ingest_cells, load_instance, paper_config, save_instance
from .moea import MoeaParams, moead, nsga2, write_front_csv
from .neural import (
    Denoiser,
    NetConfig,
    TrainConfig,
    bits_to_marginals,
    build_graph,
    consistency_sample,
    cosine_steps,
    example_from_label,
    load_checkpoint,
    save_checkpoint,
    train_cm,
)
from .neural.model import CHECKPOINT_VERSION
from .oracle import enumerate_pareto_exact, label_dataset, read_labels, write_labels
from .pareto import ENERGY, LATENCY, HvConfig, ObjectivePoint, hypervolume_norm, write_hv_report
from .rl import PpoConfig, instance_hv_ref, mo_cmpo, paper_ppo_config, policy_front, weight_grid

log = logging.getLogger("sccmoco")

ALGORITHMS = ("random", "weight-greedy", "nsga2", "moead", "exact", "cm", "mocmpo")
NEURAL = ("cm", "mocmpo")
SCHEMAS = {"instance": inst_mod.SCHEMA_VERSION, "solution": costmodel.SOLUTION_SCHEMA, "checkpoint": CHECKPOINT_VERSION}


class ConfigError(ValueError):
    """Bad flags or inputs detected before any work starts."""


# ---------------------------------------------------------------------------
# helpers


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _echo(args: argparse.Namespace, **extra) -> dict:
    skip = {"func"}
    return {
        "command": args.command,
        "preset": args.preset,
        "seed": args.seed,
        "schemas": SCHEMAS,
        "args": {k: v for k, v in vars(args).items() if k not in skip},
        **extra,
    }


def _write_manifest(out: Path, name: str, payload: dict) -> None:
    _atomic_write(out / name, json.dumps(payload, indent=2, sort_keys=True, default=str))


def _generator(preset: str, **overrides) -> GeneratorConfig:
    return desk_config(**overrides) if preset == "desk" else paper_config(**overrides)


def _instance_dir(path: Path) -> Path:
    return path / "instances" if (path / "instances").is_dir() else path


def load_instances(path: str | Path) -> list[Instance]:
    root = Path(path)
    if not root.exists():
        raise FileNotFoundError(root)
    files = sorted(p for p in _instance_dir(root).glob("*.json") if not p.name.startswith("manifest"))
    if not files:
        raise ConfigError(f"no instance files under {root}")
    return [load_instance(p) for p in files]


def parse_hv_ref(text: str) -> str | tuple[float, float]:
    if text in ("auto", "instance"):
        return text
    try:
        T, E = (float(s) for s in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("--hv-ref takes auto, instance or T,E") from None
    if T <= 0 or E <= 0:
        raise argparse.ArgumentTypeError("reference coordinates must be positive")
    return (T, E)


def hv_config(mode, inst: Instance | None, points: Sequence[Sequence[float]]) -> HvConfig:
    if mode == "auto":
        return HvConfig.auto(points) if points else HvConfig()
    if mode == "instance":
        if inst is None:
            raise ConfigError("the instance reference needs the instance file")
        return instance_hv_ref(inst)
    return HvConfig(*mode)


def _instance_seeds(seed: int, n: int) -> list[int]:
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


# ---------------------------------------------------------------------------
# gen


def cmd_gen(args: argparse.Namespace) -> int:
    overrides = {}
    if args.area_km is not None:
        overrides["area_km"] = args.area_km
    if args.cells:
        overrides["cells"] = tuple(ingest_cells(args.cells, args.min_users))
    cfg = _generator(args.preset, **overrides)
    cfg.validate()
    if args.count < 0:
        raise ConfigError("--count must be non-negative")
    out = Path(args.out)
    (out / "instances").mkdir(parents=True, exist_ok=True)
    instances = generate_instances(cfg, args.count, args.seed, prefix=args.prefix)
    for inst in instances:
        save_instance(inst, out / "instances" / f"{inst.id}.json")
    cfg_echo = {k: v for k, v in asdict(cfg).items() if k != "cells"}
    cfg_echo["n_cells"] = len(cfg.cells) if cfg.cells else 0
    _write_manifest(out, "manifest.json", _echo(args, generator=cfg_echo, instances=[i.id for i in instances]))
    print(f"wrote {len(instances)} instances to {out / 'instances'}")
    return 0


# ---------------------------------------------------------------------------
# solve


def _oriented(front) -> dict[str, Assignment]:
    """Front extremes: the lowest-latency and the lowest-energy solutions."""
    lat = min(front, key=lambda e: (e[0].T, e[0].E))
    en = min(front, key=lambda e: (e[0].E, e[0].T))
    return {"latency": lat[1], "energy": en[1]}


def _policy_point(model: Denoiser, inst: Instance, w, K: int, rng: np.random.Generator) -> Assignment:
    if not inst.pairs:
        return Assignment()
    res = consistency_sample(model, build_graph(inst, w), K, rng, steps=cosine_steps(K, model.schedule.T))
    return repair(inst, bits_to_marginals(inst, res.marginals))


def solve_one(inst: Instance, algo: str, seed: int, opts: dict, model: Denoiser | None = None):
    """Front, oriented solutions and wall-clock seconds for one instance."""
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    if algo == "random":
        front = random_front(inst, rng, opts["random_samples"])
    elif algo == "weight-greedy":
        front = front_from_tradeoffs(inst)
    elif algo in ("nsga2", "moead"):
        params = MoeaParams(pop_size=opts["pop_size"], generations=opts["generations"], seed=seed).validate()
        front = (nsga2 if algo == "nsga2" else moead)(inst, params)
    elif algo == "exact":
        front = enumerate_pareto_exact(inst, opts["budget"])
    elif algo in NEURAL:
        front = policy_front(model, inst, weight_grid(opts["weights"]), rng, K=opts["steps"], samples=opts["samples"])
    else:
        raise ConfigError(f"unknown algorithm {algo!r}")
    elapsed = time.perf_counter() - start
    if algo in NEURAL:
        oriented = {name: _policy_point(model, inst, w, opts["steps"], rng) for name, w in (("latency", LATENCY), ("energy", ENERGY))}
    else:
        oriented = _oriented(front)
    return front, oriented, elapsed


def _solve_task(task):
    inst, algo, seed, opts, model = task
    return solve_one(inst, algo, seed, opts, model)


def cmd_solve(args: argparse.Namespace) -> int:
    if args.algo in NEURAL and not args.ckpt:
        raise ConfigError(f"--algo {args.algo} requires --ckpt")
    if args.steps < 1 or args.weights < 1 or args.samples < 1 or args.jobs < 1:
        raise ConfigError("--steps, --weights, --samples and --jobs must be positive")
    instances = load_instances(args.instances)
    model = load_checkpoint(args.ckpt) if args.algo in NEURAL else None
    opts = {
        "random_samples": args.random_samples,
        "pop_size": args.pop_size,
        "generations": args.generations,
        "budget": args.budget,
        "weights": args.weights,
        "samples": args.samples,
        "steps": args.steps,
    }
    seeds = _instance_seeds(args.seed, len(instances))
    tasks = [(inst, args.algo, s, opts, model) for inst, s in zip(instances, seeds)]
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_solve_task, tasks))
    else:
        results = [_solve_task(t) for t in tasks]

    out = Path(args.out) / args.algo
    (out / "fronts").mkdir(parents=True, exist_ok=True)
    records, hv_report, timing = [], {}, []
    for inst, (front, oriented, elapsed) in zip(instances, results):
        bad = [x for _, x in front if not is_feasible(inst, x)]
        bad += [x for x in oriented.values() if not is_feasible(inst, x)]
        if bad:
            raise RuntimeError(f"{args.algo} returned an infeasible solution on {inst.id}")
        refs = [f"{inst.id}/front-{i}" for i in range(len(front))]
        tmp = out / "fronts" / f"{inst.id}.csv.tmp"
        write_front_csv(tmp, front, refs)
        os.replace(tmp, out / "fronts" / f"{inst.id}.csv")
        for ref, (pt, x) in zip(refs, front):
            records.append({**costmodel.solution_to_dict(inst.id, x), "ref": ref, "role": "front", "T": pt.T, "E": pt.E})
        for role, x in oriented.items():
            T, E = objectives(inst, x)
            records.append({**costmodel.solution_to_dict(inst.id, x), "ref": f"{inst.id}/{role}", "role": role, "T": T, "E": E})
        pts = [pt for pt, _ in front]
        ref = hv_config(args.hv_ref, inst, pts)
        hv_report[inst.id] = {"hv": hypervolume_norm(pts, ref), "mode": ref.mode, "ref": [ref.T_ref, ref.E_ref]}
        timing.append((inst.id, elapsed))
    _atomic_write(out / "solutions.json", json.dumps(records))
    write_hv_report(out / "hv.json", hv_report)
    with (out / "timing.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["instance_id", "seconds"])
        w.writerows((i, repr(s)) for i, s in timing)
    _write_manifest(out, "manifest.json", _echo(args, instances=[i.id for i in instances], options=opts))
    mean_hv = float(np.mean([r["hv"] for r in hv_report.values()]))
    print(f"{args.algo}: {len(instances)} instances, mean HV {mean_hv:.4f}, mean time {np.mean([t for _, t in timing]):.4f} s")
    return 0


# ---------------------------------------------------------------------------
# train and finetune


def _net_for(preset: str, layers: int | None, hidden: int | None) -> NetConfig:
    base = NetConfig(12, 256) if preset == "paper" else NetConfig()
    return NetConfig(layers if layers is not None else base.layers, hidden if hidden is not None else base.hidden)


def cmd_train(args: argparse.Namespace) -> int:
    instances = load_instances(args.instances)
    by_id = {inst.id: inst for inst in instances}
    if args.labels:
        labels = read_labels(args.labels)
    else:
        labels = label_dataset(instances)
        Path(args.out).mkdir(parents=True, exist_ok=True)
        write_labels(Path(args.out) / "labels.jsonl", labels)
    missing = {lab.instance_id for lab in labels} - set(by_id)
    if missing:
        raise ConfigError(f"labels reference {len(missing)} unknown instances, e.g. {sorted(missing)[0]}")
    examples = [example_from_label(by_id[lab.instance_id], lab.x, LATENCY if lab.objective == 1 else ENERGY) for lab in labels]
    if not examples:
        raise ConfigError("no labels to train on")
    cfg = TrainConfig(steps=args.steps, batch_size=args.batch_size, lr=args.lr, seed=args.seed)
    model = Denoiser.create(_net_for(args.preset, args.layers, args.hidden), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "train_log.jsonl").open("w") as fh:
        fh.write(json.dumps({"config": asdict(cfg), "net": asdict(model.cfg), "schedule": model.schedule.to_dict(), **_echo(args)}, default=str) + "\n")
        train_cm(model, examples, cfg, on_step=lambda step, loss: fh.write(json.dumps({"step": step, "loss": loss}) + "\n"))
    save_checkpoint(model, out / "cm.json", extra={"labels": len(labels), "train": asdict(cfg)})
    print(f"trained on {len(examples)} labels for {cfg.steps} steps; checkpoint {out / 'cm.json'}")
    return 0


def cmd_finetune(args: argparse.Namespace) -> int:
    if not args.ckpt:
        raise ConfigError("finetune requires --ckpt")
    instances = load_instances(args.instances)
    model = load_checkpoint(args.ckpt)
    base = paper_ppo_config() if args.preset == "paper" else PpoConfig()
    overrides = {k: getattr(args, k) for k in ("iterations", "buffer_size", "K") if getattr(args, k) is not None}
    cfg = replace(base, seed=args.seed, **overrides).validate()
    out = Path(args.out)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    final, archive, history = mo_cmpo(model, instances, cfg, np.random.default_rng(args.seed), out / "finetune_log.jsonl", out / "checkpoints")
    save_checkpoint(final, out / "mocmpo.json", extra={"iterations": cfg.iterations})
    rows = [{"instance_id": i, "T": p.T, "E": p.E} for i in sorted(archive.fronts) for p in archive.points(i)]
    _atomic_write(out / "archive.json", json.dumps(rows))
    _write_manifest(out, "manifest.json", _echo(args, ppo=asdict(cfg)))
    print(f"fine-tuned for {len(history)} iterations; checkpoint {out / 'mocmpo.json'}")
    return 0


# ---------------------------------------------------------------------------
# eval and hv


def _read_run(path: Path) -> tuple[str, dict]:
    manifest = json.loads((path / "manifest.json").read_text())
    sols = json.loads((path / "solutions.json").read_text())
    fronts: dict[str, list[ObjectivePoint]] = {}
    oriented: dict[str, dict[str, dict]] = {}
    for r in sols:
        if r["role"] == "front":
            fronts.setdefault(r["instance_id"], []).append(ObjectivePoint(r["T"], r["E"]))
        else:
            oriented.setdefault(r["instance_id"], {})[r["role"]] = r
    with (path / "timing.csv").open() as fh:
        timing = {row["instance_id"]: float(row["seconds"]) for row in csv.DictReader(fh)}
    return manifest["args"]["algo"], {"fronts": fronts, "oriented": oriented, "timing": timing}


def cmd_eval(args: argparse.Namespace) -> int:
    if not args.runs:
        raise ConfigError("eval needs at least one --runs directory")
    loaded = [_read_run(Path(p)) for p in args.runs]
    runs = dict(loaded)
    if len(runs) != len(loaded):
        raise ConfigError("each algorithm may appear only once")
    ids = [set(r["fronts"]) for r in runs.values()]
    if not ids[0]:
        raise ConfigError("empty report: no solutions in the given runs")
    if any(s != ids[0] for s in ids):
        raise ConfigError("runs cover different instance ids")
    instances = {inst.id: inst for inst in load_instances(args.instances)} if args.instances else {}
    if args.hv_ref == "instance" and not instances:
        raise ConfigError("--hv-ref instance needs --instances")
    if instances and not ids[0] <= set(instances):
        raise ConfigError("runs mention instances missing from --instances")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    hv = {algo: [] for algo in runs}
    for iid in sorted(ids[0]):
        union = [p for r in runs.values() for p in r["fronts"][iid]]
        ref = hv_config(args.hv_ref, instances.get(iid), union)
        for algo, r in runs.items():
            hv[algo].append(hypervolume_norm(r["fronts"][iid], ref))
    with (out / "hv_table.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "instances", "hv_mean", "hv_std", "time_mean"])
        for algo, r in runs.items():
            w.writerow([algo, len(hv[algo]), repr(float(np.mean(hv[algo]))), repr(float(np.std(hv[algo]))), repr(float(np.mean(list(r["timing"].values()))))])

    def rate(inst, rec, fn):
        try:
            return fn(inst, Assignment.from_triples(rec["triples"]))
        except UndefinedRateError:
            return math.nan

    with (out / "orientation.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "instance_id", "mean_intercell_km", "latency_local_rate", "energy_local_rate", "latency_avg_placements", "energy_avg_placements"])
        for algo, r in runs.items():
            for iid in sorted(ids[0]):
                inst = instances.get(iid)
                o = r["oriented"].get(iid, {})
                if inst is None or set(o) != {"latency", "energy"}:
                    continue
                w.writerow(
                    [algo, iid, repr(inst.mean_intercell_km())]
                    + [repr(rate(inst, o[k], local_rate)) for k in ("latency", "energy")]
                    + [repr(rate(inst, o[k], avg_placements)) for k in ("latency", "energy")]
                )
    with (out / "te_series.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["algorithm", "instance_id", "orientation", "T_ms", "E_J"])
        for algo, r in runs.items():
            for iid in sorted(ids[0]):
                for role, rec in sorted(r["oriented"].get(iid, {}).items()):
                    w.writerow([algo, iid, role, repr(rec["T"]), repr(rec["E"])])
    _write_manifest(out, "manifest.json", _echo(args, algorithms=list(runs)))
    for algo in runs:
        print(f"{algo}: hv_mean {np.mean(hv[algo]):.4f}")
    return 0


def cmd_hv(args: argparse.Namespace) -> int:
    path = Path(args.front)
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open() as fh:
        pts = [ObjectivePoint(float(r["T_ms"]), float(r["E_J"])) for r in csv.DictReader(fh)]
    inst = load_instance(args.instance) if args.instance else None
    ref = hv_config(args.hv_ref, inst, pts)
    print(json.dumps({"hv": hypervolume_norm(pts, ref), "mode": ref.mode, "ref": [ref.T_ref, ref.E_ref], "points": len(pts)}))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=1, help="worker processes for per-instance work")
    common.add_argument("--out", default="out")
    common.add_argument("--preset", choices=("paper", "desk"), default="desk")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sccmoco", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="generate instances")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--cells", help="cell tower CSV with lat, lon and samples columns")
    p.add_argument("--min-users", type=int, default=50)
    p.add_argument("--area-km", type=float, help="side of the square that holds synthetic MEC sites")
    p.add_argument("--prefix", default="inst")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("solve", parents=[common], help="run one algorithm on every instance")
    p.add_argument("--instances", required=True)
    p.add_argument("--algo", choices=ALGORITHMS, required=True)
    p.add_argument("--ckpt", help="checkpoint for cm and mocmpo")
    p.add_argument("--steps", type=int, default=3, help="consistency sampling steps")
    p.add_argument("--weights", type=int, default=21, help="preference grid size for neural fronts")
    p.add_argument("--samples", type=int, default=4, help="samples per preference for neural fronts")
    p.add_argument("--hv-ref", type=parse_hv_ref, default="instance")
    p.add_argument("--random-samples", type=int, default=100)
    p.add_argument("--pop-size", type=int, default=64)
    p.add_argument("--generations", type=int, default=200)
    p.add_argument("--budget", type=int, default=2_000_000, help="enumeration limit for exact fronts")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("train", parents=[common], help="consistency training on oracle labels")
    p.add_argument("--instances", required=True)
    p.add_argument("--labels", help="label JSONL; computed with the exact solver when omitted")
    p.add_argument("--steps", type=int, default=3000)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--layers", type=int)
    p.add_argument("--hidden", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", parents=[common], help="multi-objective PPO fine-tuning")
    p.add_argument("--instances", required=True)
    p.add_argument("--ckpt")
    p.add_argument("--iterations", type=int)
    p.add_argument("--buffer-size", type=int)
    p.add_argument("--K", type=int)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("eval", parents=[common], help="compare solve runs")
    p.add_argument("--runs", nargs="+", default=[])
    p.add_argument("--instances")
    p.add_argument("--hv-ref", type=parse_hv_ref, default="auto")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("hv", parents=[common], help="hypervolume of one front CSV")
    p.add_argument("front")
    p.add_argument("--instance", help="instance file, needed for --hv-ref instance")
    p.add_argument("--hv-ref", type=parse_hv_ref, default="auto")
    p.set_defaults(func=cmd_hv)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be positive", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ValueError as exc:  # includes ConfigError and generator infeasibility
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
