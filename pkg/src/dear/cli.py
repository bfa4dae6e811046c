"""``dear`` command line: dataset generation, training, evaluation, timing,
tolerance ablation and self-tests.

Settings come from three layers, later ones winning: a preset (``desk`` or
``paper``), an optional JSON config file with sections dataset/model/solver/
train/eval, and explicit flags. Every report echoes the merged config and a
build id.

Exit codes: 0 success, 1 usage or config error, 2 runtime failure,
3 self-test failure.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import subprocess
import sys
import time
from dataclasses import fields
from pathlib import Path

import torch

from . import __version__
from .data import SPLITS, DatasetSpec, generate_split, load_samples, make_dataset
from .deq import BackwardConfig, JacRegConfig, SolverConfig
from .numeric import ConfigError
from .train import (TrainConfig, ablation_relative_tolerance, benchmark_inference, build_model,
                    evaluate, load_checkpoint, save_checkpoint, score_predictions, train,
                    write_history_csv, write_json)

log = logging.getLogger("dear")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3

DEFAULTS = {
    "dataset": {"algorithm": None, "counts": [100_000, 100, 100], "train_sizes": [8, 16],
                "val_size": 16, "test_size": 64, "p_grid": None, "seed": 0},
    "model": {"latent_dim": 128},
    "solver": {f.name: f.default for f in fields(SolverConfig)},
    "train": {"mode": "dear", "epochs": 100, "batch_size": 32, "lr": 3e-4, "seed": 0,
              "eval_batch_size": 16,
              "backward": {f.name: f.default for f in fields(BackwardConfig)},
              "jacobian": {f.name: f.default for f in fields(JacRegConfig)}},
    "eval": {"split": "test", "batch_size": 16, "repetitions": 3, "include_encoding": False},
}

PRESETS = {
    "desk": {"dataset": {"counts": [5000, 100, 100]}, "model": {"latent_dim": 64},
             "train": {"epochs": 20}},
    "paper": {"dataset": {"counts": [100_000, 100, 100]}, "model": {"latent_dim": 128},
              "train": {"epochs": 100}},
}
# sorting is scored out of distribution at n=32 under the desk preset
DESK_SORT_TEST_SIZE = 32


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_USAGE)


def merge(base: dict, override: dict, where: str = "") -> dict:
    """Recursive dict merge that rejects keys absent from ``base``."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        path = f"{where}.{key}" if where else key
        if key not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {path!r} must be an object")
            out[key] = merge(base[key], value, path)
        else:
            out[key] = value
    return out


def build_config(args) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    user: dict = {}
    if args.preset:
        cfg = merge(cfg, PRESETS[args.preset])
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        try:
            user = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = merge(cfg, user)
    if getattr(args, "algorithm", None):
        cfg["dataset"]["algorithm"] = args.algorithm
    if args.preset == "desk" and cfg["dataset"]["algorithm"] == "insertion_sort" \
            and "test_size" not in user.get("dataset", {}):
        cfg["dataset"]["test_size"] = DESK_SORT_TEST_SIZE
    if args.seed is not None:
        cfg["dataset"]["seed"] = args.seed
        cfg["train"]["seed"] = args.seed
    return cfg


def dataset_spec(cfg: dict) -> DatasetSpec:
    d = dict(cfg["dataset"])
    if d["algorithm"] is None:
        raise ConfigError("no algorithm given: pass --algorithm or set dataset.algorithm")
    if d["p_grid"] is None:
        d.pop("p_grid")
    return DatasetSpec(**d)


def solver_config(cfg: dict, **override) -> SolverConfig:
    return SolverConfig(**{**cfg["solver"], **override})


def train_config(cfg: dict, algorithm: str) -> TrainConfig:
    t = dict(cfg["train"])
    return TrainConfig(algorithm, latent_dim=cfg["model"]["latent_dim"], solver=solver_config(cfg),
                       backward=BackwardConfig(**t.pop("backward")),
                       jacobian=JacRegConfig(**t.pop("jacobian")), **t)


def build_id() -> str:
    try:
        rev = subprocess.run(["git", "rev-parse", "--short", "HEAD"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if rev.returncode == 0 and rev.stdout.strip():
            return f"{__version__}+g{rev.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def provenance(cfg: dict, command: str) -> dict:
    return {"command": command, "build": build_id(), "config": cfg}


def out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    return out


def load_split(cfg: dict, data_dir: str | None, split: str):
    """Samples from ``data_dir`` if given, else regenerated from the dataset config."""
    if data_dir is None:
        return list(generate_split(dataset_spec(cfg), split))
    path = Path(data_dir) / f"{split}.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"missing {path}; run `dear gen-data --out {data_dir}` first")
    return load_samples(path)


def load_model(path: str):
    if not Path(path).exists():
        raise FileNotFoundError(f"missing checkpoint {path}; run `dear train` first")
    return load_checkpoint(path)


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(args, cfg):
    spec = dataset_spec(cfg)
    paths = make_dataset(spec, out_dir(args))
    for split, count in zip(SPLITS, spec.counts):
        print(f"{split}: {count} samples -> {paths[split]}")
    print(f"seed: {spec.seed}")


def cmd_train(args, cfg):
    spec = dataset_spec(cfg)
    tcfg = train_config(cfg, spec.algorithm)
    out = out_dir(args)
    train_s = load_split(cfg, args.data, "train")
    val_s = load_split(cfg, args.data, "val")
    test_s = load_split(cfg, args.data, "test")
    start = time.perf_counter()
    state, metrics = train(tcfg, train_s, val_s)
    model = build_model(tcfg)
    model.load_state_dict(state)
    metrics.test = evaluate(model, test_s, tcfg.solver, tcfg.mode, cfg["eval"]["batch_size"])
    save_checkpoint(model, out / "checkpoint.json", tcfg)
    write_history_csv(metrics.history, out / "history.csv")
    summary = {**provenance(cfg, "train"), **metrics.summary(),
               "train_seconds": time.perf_counter() - start}
    write_json(summary, out / "summary.json")
    t = metrics.test
    print(f"best epoch {metrics.best_epoch}; test accuracy {t.accuracy:.4f} "
          f"(chance {t.chance:.4f}), mean iterations {t.mean_iters:.2f}")


def cmd_eval(args, cfg):
    split = cfg["eval"]["split"]
    out = out_dir(args)
    if args.predictions:
        if cfg["dataset"]["algorithm"] is None and args.data is None:
            raise ConfigError("offline scoring needs --data or a dataset config")
        samples = load_split(cfg, args.data, split)
        try:
            preds = json.loads(Path(args.predictions).read_text())
        except OSError as exc:
            raise FileNotFoundError(f"cannot read predictions {args.predictions}: {exc}") from exc
        rows = preds["predictions"] if isinstance(preds, dict) else preds
        acc = score_predictions(samples, rows)
        report = {**provenance(cfg, "eval"), "split": split, "accuracy": acc, "offline": True}
    else:
        model, header = load_model(args.checkpoint)
        cfg["dataset"]["algorithm"] = cfg["dataset"]["algorithm"] or model.cfg.algorithm
        samples = load_split(cfg, args.data, split)
        res = evaluate(model, samples, solver_config(cfg), args.mode, cfg["eval"]["batch_size"])
        report = {**provenance(cfg, "eval"), "split": split, "mode": args.mode,
                  "checkpoint": str(args.checkpoint), **res.summary()}
        write_json({"predictions": res.predictions}, out / "predictions.json")
    write_json(report, out / "eval.json")
    print(f"{split} accuracy {report['accuracy']:.4f}")


def cmd_bench(args, cfg):
    model, _ = load_model(args.checkpoint)
    cfg["dataset"]["algorithm"] = cfg["dataset"]["algorithm"] or model.cfg.algorithm
    samples = load_split(cfg, args.data, cfg["eval"]["split"])
    if args.limit:
        samples = samples[:args.limit]
    ev = cfg["eval"]
    # timing runs are pinned to one thread
    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        dear = benchmark_inference(model, samples, solver_config(cfg, stop_mode="relative", epsilon=0.1),
                                   "dear", ev["repetitions"], ev["include_encoding"])
        nar = benchmark_inference(model, samples, solver_config(cfg), "nar_baseline",
                                  ev["repetitions"], ev["include_encoding"])
    finally:
        torch.set_num_threads(threads)
    report = {**provenance(cfg, "bench"), "checkpoint": str(args.checkpoint),
              "dear": dear, "nar_baseline": nar,
              "speedup": nar["mean_seconds_per_sample"] / dear["mean_seconds_per_sample"]}
    write_json(report, out_dir(args) / "bench.json")
    for name, r in (("dear (relative)", dear), ("nar_baseline", nar)):
        flag = "" if r["std_defined"] else " (std undefined)"
        print(f"{name}: {r['mean_seconds_per_sample']:.4f} +- {r['std_seconds_per_sample']:.4f} "
              f"s/sample{flag}, {r['mean_iters']:.1f} steps")


def cmd_ablate(args, cfg):
    model, _ = load_model(args.checkpoint)
    cfg["dataset"]["algorithm"] = cfg["dataset"]["algorithm"] or model.cfg.algorithm
    samples = load_split(cfg, args.data, cfg["eval"]["split"])
    res = ablation_relative_tolerance(model, samples, solver_config(cfg, stop_mode="absolute", epsilon=1e-3),
                                      solver_config(cfg, stop_mode="relative", epsilon=0.1),
                                      cfg["eval"]["batch_size"])
    report = {**provenance(cfg, "ablate"), "checkpoint": str(args.checkpoint), **res}
    write_json(report, out_dir(args) / "ablation.json")
    for mode in ("absolute", "relative"):
        r = res[mode]
        print(f"{mode}: accuracy {r['accuracy']:.4f}, mean iterations {r['mean_iters']:.2f}")


def cmd_selftest(args, cfg):
    from .checks import run_all

    start = time.perf_counter()
    results = run_all(quick=args.quick)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - start:.1f}s")
    if failed:
        print("failed: " + ", ".join(f"{r.suite}/{r.op}" for r in failed), file=sys.stderr)
        return EXIT_SELFTEST
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "ablate": cmd_ablate, "selftest": cmd_selftest}


def make_parser() -> Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config with dataset/model/solver/train/eval sections")
    common.add_argument("--seed", type=int, help="seed for data generation and training")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("--workers", type=int, default=1, help="torch intra-op threads (default: 1)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="desk or paper scale defaults")
    common.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")

    parser = Parser(prog="dear", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write train/val/test JSONL splits")
    p.add_argument("--algorithm", help="bellman_ford, floyd_warshall, scc or insertion_sort")

    p = sub.add_parser("train", parents=[common], help="train, select on val loss, score on test")
    p.add_argument("--algorithm")
    p.add_argument("--data", help="dataset directory from gen-data (default: regenerate in memory)")

    p = sub.add_parser("eval", parents=[common], help="score a checkpoint or a predictions file")
    p.add_argument("--checkpoint", help="checkpoint.json written by train")
    p.add_argument("--predictions", help="score this predictions JSON offline instead")
    p.add_argument("--data")
    p.add_argument("--algorithm")
    p.add_argument("--mode", choices=["dear", "nar_baseline"], default="dear")

    for name, text in (("bench", "time dear (relative tolerance) against the unrolled baseline"),
                       ("ablate", "compare absolute and relative solver stopping")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data")
        p.add_argument("--algorithm")
        if name == "bench":
            p.add_argument("--limit", type=int, help="time only the first N samples")

    p = sub.add_parser("selftest", parents=[common], help="gradient, solver, oracle and symmetry checks")
    p.add_argument("--quick", action="store_true", help="smaller sample counts")
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(message)s", stream=sys.stderr)
    if args.workers < 1:
        parser.error("--workers must be >= 1")
    if args.command == "eval" and not (args.checkpoint or args.predictions):
        parser.error("eval needs --checkpoint or --predictions")
    torch.set_num_threads(args.workers)
    try:
        cfg = build_config(args)
        code = COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"dear {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, RuntimeError, ArithmeticError, KeyError) as exc:
        print(f"dear {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
