"""Command-line entry point: ``moenc {train,evaluate,sweep,flops,route-demo}``.

Each invocation takes the lock in ``--out``, then writes into a fresh
numbered run directory below it.  Files are opened in exclusive-create mode,
so an earlier run's output is never overwritten.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import filelock
import numpy as np

from moenc import __version__
from moenc.checkpoint import Checkpoint, check_compatible, load_checkpoint, save_checkpoint
from moenc.config import FLOPS_SCHEMA, TRAIN_SCHEMA, read_config, sweep_grid_from, train_config_from
from moenc.errors import CheckpointError, ConfigurationError, ContractError, DivergenceError
from moenc.flops import QWEN25_7B, LlmSpec, ScenarioSpec, load_zoo, scenario_report
from moenc.trainer import ABLATION_GRID, TrainConfig, build_model, eval_set, evaluate_routing, sweep_lambdas, train

log = logging.getLogger("moenc")

LOCK_NAME = ".moenc.lock"
COMMANDS = ("train", "evaluate", "sweep", "flops", "route-demo")


class RunDir:
    """A numbered, write-once directory such as ``out/train-0003``."""

    def __init__(self, root: Path, command: str):
        n = 1 + max((int(p.name.rsplit("-", 1)[1]) for p in root.glob(f"{command}-[0-9]*")
                     if p.name.rsplit("-", 1)[1].isdigit()), default=0)
        self.path = root / f"{command}-{n:04d}"
        self.path.mkdir()

    def write_json(self, name: str, obj) -> Path:
        path = self.path / name
        with open(path, "x") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.path / name
        with open(path, "x") as fh:
            fh.write(text)
        return path

    def jsonl(self, name: str):
        return JsonLines(self.path / name)


class JsonLines:
    def __init__(self, path: Path):
        self.fh = open(path, "x")

    def write(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.fh.flush()

    def close(self):
        self.fh.close()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moenc", description="Mixture-of-encoders routing lab")
    parser.add_argument("--version", action="version", version=f"moenc {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    def common(p, router=True):
        p.add_argument("--config", type=Path, help="YAML config file")
        p.add_argument("--out", type=Path, default=Path("runs"), help="output directory (default: runs)")
        p.add_argument("--seed", type=int, help="override the config seed (u64)")
        if router:
            p.add_argument("--router", choices=["ca", "sa", "mlp"], help="router variant override")
        return p

    common(sub.add_parser("train", help="train router, connectors and head; save a checkpoint"))
    ev = common(sub.add_parser("evaluate", help="inference-mode routing stats for a checkpoint"))
    ev.add_argument("--checkpoint", type=Path, required=True)
    common(sub.add_parser("sweep", help="train once per loss-weight grid row"))
    common(sub.add_parser("flops", help="token grids and prefill/decode FLOPs report"), router=False)
    demo = common(sub.add_parser("route-demo", help="show per-instance routing decisions"))
    demo.add_argument("--checkpoint", type=Path, help="route with a saved model instead of training one")
    demo.add_argument("--count", type=int, default=12, help="instances to show (default 12)")
    return parser


def _train_config(args) -> tuple[TrainConfig, dict]:
    data = read_config(args.config, TRAIN_SCHEMA) if args.config else {}
    if args.seed is not None and args.seed < 0:
        raise ConfigurationError(f"--seed must be a non-negative integer, got {args.seed}")
    return train_config_from(data, seed=args.seed, router=getattr(args, "router", None)), data


def cmd_train(args, run: RunDir) -> int:
    cfg, _ = _train_config(args)
    run.write_json("config.json", cfg.to_dict())
    metrics = run.jsonl("metrics.jsonl")
    try:
        result = train(cfg, on_step=lambda step, rec: metrics.write(rec))
    finally:
        metrics.close()
    ckpt = Checkpoint(result.model.state_arrays(), cfg.to_dict(), result.steps_done)
    save_checkpoint(ckpt, run.path / "model.ckpt")
    run.write_json("stats.json", result.stats.summary())
    s = result.stats
    print(f"trained {cfg.steps} steps ({cfg.router}); selection {s.selection_counts} "
          f"range {s.range_gap:.1f} recovery {s.expert_recovery_accuracy:.3f} accuracy {s.task_accuracy:.3f}")
    print(f"checkpoint: {run.path / 'model.ckpt'}")
    return 0


def _model_from_checkpoint(args):
    ckpt = load_checkpoint(args.checkpoint)
    if args.config:
        cfg, _ = _train_config(args)
    else:
        cfg = train_config_from(ckpt.config, seed=args.seed, router=getattr(args, "router", None))
    model = build_model(cfg)
    check_compatible(ckpt, model.state_arrays())
    model.load_state(ckpt.arrays)
    return cfg, model, ckpt


def cmd_evaluate(args, run: RunDir) -> int:
    cfg, model, ckpt = _model_from_checkpoint(args)
    stats = evaluate_routing(model, eval_set(cfg, model.workload))
    run.write_json("stats.json", {**stats.summary(), "checkpoint": str(args.checkpoint), "step": ckpt.step})
    print(json.dumps(stats.summary(), sort_keys=True))
    return 0


def cmd_sweep(args, run: RunDir) -> int:
    base, data = _train_config(args)
    grid = sweep_grid_from(data) or ABLATION_GRID
    rows = sweep_lambdas(grid, base)
    out = run.jsonl("sweep.jsonl")
    lines = [f"{'be':>4} {'ie':>4} {'ba':>4} {'ia':>4} {'acc':>6} {'range':>6} {'recovery':>8}"]
    for r in rows:
        out.write(r.as_dict())
        w = r.weights
        lines.append(f"{w.be:>4.1f} {w.ie:>4.1f} {w.ba:>4.1f} {w.ia:>4.1f} "
                     f"{r.task_accuracy:>6.3f} {r.range_gap:>6.1f} {r.expert_recovery_accuracy:>8.3f}")
    out.close()
    run.write_json("sweep.json", {"base": base.to_dict(), "rows": [r.as_dict() for r in rows]})
    table = "\n".join(lines) + "\n"
    run.write_text("sweep.txt", table)
    print(table, end="")
    return 0


def cmd_flops(args, run: RunDir) -> int:
    data = read_config(args.config, FLOPS_SCHEMA) if args.config else {}
    try:
        scenario = ScenarioSpec(**{k: tuple(v) if k == "encoders" else v for k, v in data.get("scenario", {}).items()})
        llm = LlmSpec(**data["llm"]) if "llm" in data else QWEN25_7B
    except TypeError as exc:
        raise ConfigurationError(str(exc)) from None
    zoo, doc = load_zoo(data.get("zoo"))
    if "scenario" not in data or "shared" not in data["scenario"]:
        scenario = replace(scenario, shared=doc.get("shared", scenario.shared))
    report = scenario_report(scenario, zoo, llm, doc.get("reference_llm_tflops"))
    text = report.render() + "\n"
    out = run.jsonl("flops.jsonl")
    for rec in report.records():
        out.write(rec)
    out.close()
    run.write_text("flops.txt", text)
    print(text, end="")
    return 0


def cmd_route_demo(args, run: RunDir) -> int:
    if args.count < 1:
        raise ConfigurationError(f"--count must be >= 1, got {args.count}")
    if args.checkpoint:
        cfg, model, _ = _model_from_checkpoint(args)
    else:
        cfg, _ = _train_config(args)
        model = train(cfg).model
    instances = model.workload.generate_batch((cfg.seed, 0xDE70), args.count, cfg.noise_level)
    out = run.jsonl("routes.jsonl")
    print(f"{'#':>3} {'planted':>7} {'chosen':>6} {'label':>5} {'pred':>4}  q")
    for i, inst in enumerate(instances):
        logits, k, z = model.infer(inst)
        q = np.exp(z - z.max())
        q /= q.sum()
        rec = {"index": i, "planted_expert": inst.planted_expert, "selected": k, "label": inst.label,
               "predicted": int(np.argmax(logits)), "q": [float(x) for x in q]}
        out.write(rec)
        print(f"{i:>3} {inst.planted_expert:>7} {k:>6} {inst.label:>5} {rec['predicted']:>4}  "
              + " ".join(f"{x:.2f}" for x in q))
    out.close()
    return 0


HANDLERS = {"train": cmd_train, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
            "flops": cmd_flops, "route-demo": cmd_route_demo}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.out.mkdir(parents=True, exist_ok=True)
        lock = filelock.FileLock(str(args.out / LOCK_NAME), timeout=0)
        try:
            lock.acquire()
        except filelock.Timeout:
            raise ConfigurationError(f"{args.out} is locked by another moenc process ({LOCK_NAME})") from None
        rundir = None
        try:
            rundir = RunDir(args.out, args.command)
            t0 = time.time()
            status = HANDLERS[args.command](args, rundir)
            # the only timestamped artifact; everything else is a function of (config, seed)
            rundir.write_json("run.json", {"command": args.command, "argv": list(argv if argv is not None else sys.argv[1:]),
                                           "started": t0, "elapsed_s": time.time() - t0, "version": __version__})
            return status
        except BaseException:
            if rundir is not None and not any(rundir.path.iterdir()):
                rundir.path.rmdir()
            raise
        finally:
            lock.release()
    except (ContractError, ConfigurationError, CheckpointError, DivergenceError, OSError) as exc:
        print(f"moenc {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
