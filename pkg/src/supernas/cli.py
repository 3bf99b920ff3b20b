"""Command-line harness for the train -> search -> retrain workflow.

Subcommands: train-supernet, search, retrain, eval, cost,
make-latency-table.  Runs are configured by a strict JSON file plus a
few overriding flags; every artifact a command writes is deterministic
for a fixed seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .cost import (build_cost_report, format_report, load_latency_table,
                   measure_latency_table, parse_constraint, report_to_json,
                   save_latency_table)
from .data import Dataset, load_cifar10_binary, make_synthetic, stratified_split
from .errors import ConfigError, SupernasError
from .search import (SearchConfig, make_supernet_fitness, recalibrate_bn,
                     run_search, write_curve, write_search_log)
from .space.spec import (SupernetSpec, decode_architecture,
                         encode_architecture, desk_space, imagenet_space)
from .space.supernet import build_supernet
from .training import (TrainConfig, evaluate_accuracy, load_checkpoint,
                       load_model_weights, retrain_architecture,
                       train_supernet)

_SPACE_KEYS = {"preset", "kind"}
_DATASET_KEYS = {"format", "path", "size", "num_classes", "channels",
                 "image_size", "val_fraction", "margin"}
_TRAIN_KEYS = {"iterations", "epochs", "batch", "lr", "momentum",
               "weight_decay", "augment", "checkpoint_every", "log_every"}
_SEARCH_KEYS = {"population", "iterations", "archive_size",
                "crossover_count", "mutation_count", "mutation_prob",
                "constraints", "recalibration_samples", "strategy",
                "child_retry_cap", "init_retry_factor"}
_TOP_KEYS = {"space", "dataset", "train", "search", "seed", "out_dir"}


def _reject_unknown(section: str, given: dict, allowed: set) -> None:
    extra = sorted(set(given) - allowed)
    if extra:
        raise ConfigError(f"unknown {section} config keys: {extra}")


@dataclass
class RunConfig:
    space: SupernetSpec
    dataset: dict
    train: dict
    search: dict
    seed: int
    out_dir: str | None
    config_hash: str


def _build_space(section: dict) -> SupernetSpec:
    _reject_unknown("space", section, _SPACE_KEYS)
    preset = section.get("preset", "desk")
    if preset == "desk":
        return desk_space(section.get("kind", "block"))
    if preset == "imagenet":
        if "kind" in section:
            raise ConfigError("space.kind applies to the desk preset only")
        return imagenet_space()
    raise ConfigError(f"unknown space preset {preset!r}")


def load_run_config(path) -> RunConfig:
    """Parse a run config file, rejecting unknown keys at every level."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        doc = json.loads(raw)
    except ValueError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must be a JSON object")
    _reject_unknown("top-level", doc, _TOP_KEYS)
    space = _build_space(doc.get("space", {}))
    dataset = doc.get("dataset", {})
    _reject_unknown("dataset", dataset, _DATASET_KEYS)
    train = doc.get("train", {})
    _reject_unknown("train", train, _TRAIN_KEYS)
    search = doc.get("search", {})
    _reject_unknown("search", search, _SEARCH_KEYS)
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    out_dir = doc.get("out_dir")
    return RunConfig(space=space, dataset=dataset, train=train,
                     search=search, seed=seed, out_dir=out_dir,
                     config_hash=hashlib.sha256(raw).hexdigest())


def load_dataset(desc: dict, seed: int) -> tuple[Dataset, Dataset]:
    """Materialize the configured dataset and split off validation data."""
    fmt = desc.get("format", "synthetic")
    if fmt == "synthetic":
        ds = make_synthetic(desc.get("size", 4096), seed=seed,
                            num_classes=desc.get("num_classes", 10),
                            channels=desc.get("channels", 3),
                            size=desc.get("image_size", 32),
                            margin=desc.get("margin", 0.0))
    elif fmt == "cifar10-binary":
        if "path" not in desc:
            raise ConfigError("cifar10-binary dataset needs a path")
        ds = load_cifar10_binary(desc["path"])
    else:
        raise ConfigError(f"unknown dataset format {fmt!r}")
    return stratified_split(ds, desc.get("val_fraction", 0.1), seed=seed)


def calibration_images(train_ds: Dataset, count: int, seed: int) -> np.ndarray:
    n = min(count, len(train_ds))
    idx = np.random.default_rng([seed, 43]).permutation(len(train_ds))[:n]
    return train_ds.images[idx]


# ---------------------------------------------------------------------------
# artifact writers


def _write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_losses(path, losses) -> None:
    with open(path, "w") as fh:
        fh.write("iteration,loss\n")
        for i, loss in enumerate(losses):
            fh.write(f"{i},{loss:.6f}\n")


def _out_dir(args, cfg: RunConfig) -> str:
    out = args.out or cfg.out_dir
    if out is None:
        raise ConfigError("no output directory: pass --out or set out_dir")
    os.makedirs(out, exist_ok=True)
    return out


def _seed(args, cfg: RunConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    train_ds, _ = load_dataset(cfg.dataset, seed)
    tc = TrainConfig(seed=seed, **cfg.train)
    net = build_supernet(cfg.space, seed=seed)
    result = train_supernet(net, train_ds, tc, out_dir=out,
                            resume=args.checkpoint)
    _write_losses(os.path.join(out, "loss.csv"), result.losses)
    _write_json(os.path.join(out, "train_summary.json"), {
        "command": "train-supernet",
        "iterations": result.total_iterations,
        "final_loss": round(float(result.losses[-1]), 6),
        "checkpoint": "checkpoint_final.bin",
        "seed": seed,
        "config_hash": cfg.config_hash,
    })
    print(f"trained to iteration {result.total_iterations} -> {out}")
    return 0


def _search_config(args, cfg: RunConfig, seed: int) -> SearchConfig:
    kw = dict(cfg.search)
    texts = list(kw.pop("constraints", [])) + list(args.constraint or [])
    constraints = tuple(parse_constraint(t) for t in texts)
    if args.strategy is not None:
        kw["strategy"] = args.strategy
    return SearchConfig(seed=seed, constraints=constraints, **kw)


def cmd_search(args) -> int:
    cfg = load_run_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    scfg = _search_config(args, cfg, seed)
    table = load_latency_table(args.table) if args.table else None
    net = build_supernet(cfg.space, seed=seed)
    load_model_weights(net, load_checkpoint(args.checkpoint))
    train_ds, val_ds = load_dataset(cfg.dataset, seed)
    calib = calibration_images(train_ds, scfg.recalibration_samples, seed)
    fitness = make_supernet_fitness(net, val_ds, calib)
    result = run_search(cfg.space, scfg, fitness, table=table)
    best = result.best
    write_search_log(os.path.join(out, "search_log.jsonl"), result.log)
    write_curve(os.path.join(out, "curve.csv"), result.curve)
    with open(os.path.join(out, "best_arch.txt"), "w") as fh:
        fh.write(encode_architecture(best.arch) + "\n")
    _write_json(os.path.join(out, "summary.json"), {
        "best_arch": encode_architecture(best.arch),
        "fitness": round(best.fitness, 6),
        "metrics": {k: round(v, 6) for k, v in best.metrics.items()},
        "budget": result.budget,
        "seed": seed,
        "config_hash": cfg.config_hash,
    })
    print(f"best {encode_architecture(best.arch)} fitness {best.fitness:.4f} "
          f"({result.budget} evaluations) -> {out}")
    return 0


def cmd_retrain(args) -> int:
    cfg = load_run_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    arch = decode_architecture(args.arch, cfg.space)
    train_ds, val_ds = load_dataset(cfg.dataset, seed)
    tc = TrainConfig(seed=seed, **cfg.train)
    _, accuracy, result = retrain_architecture(arch, cfg.space, train_ds, tc,
                                               val_ds=val_ds, out_dir=out)
    _write_losses(os.path.join(out, "loss.csv"), result.losses)
    _write_json(os.path.join(out, "retrain_summary.json"), {
        "arch": args.arch,
        "accuracy": round(accuracy, 6),
        "iterations": result.total_iterations,
        "seed": seed,
        "config_hash": cfg.config_hash,
    })
    print(f"retrained {args.arch}: accuracy {accuracy:.4f} -> {out}")
    return 0


def cmd_eval(args) -> int:
    cfg = load_run_config(args.config)
    seed = _seed(args, cfg)
    arch = decode_architecture(args.arch, cfg.space)
    net = build_supernet(cfg.space, seed=seed)
    load_model_weights(net, load_checkpoint(args.checkpoint))
    train_ds, val_ds = load_dataset(cfg.dataset, seed)
    count = cfg.search.get("recalibration_samples", 20000)
    calib = calibration_images(train_ds, count, seed)
    bn_stats = recalibrate_bn(net, arch, calib)
    accuracy = evaluate_accuracy(net, arch, val_ds, bn_stats=bn_stats)
    payload = {"arch": args.arch, "accuracy": round(accuracy, 6),
               "seed": seed}
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        _write_json(os.path.join(args.out, "eval.json"), payload)
    print(json.dumps(payload, sort_keys=True))
    return 0


def cmd_cost(args) -> int:
    cfg = load_run_config(args.config)
    arch = decode_architecture(args.arch, cfg.space)
    table = load_latency_table(args.table) if args.table else None
    report = build_cost_report(arch, cfg.space, table=table)
    if args.json:
        print(json.dumps(report_to_json(report), indent=2, sort_keys=True))
    else:
        print(format_report(report))
    return 0


def cmd_make_latency_table(args) -> int:
    cfg = load_run_config(args.config)
    seed = _seed(args, cfg)
    out = _out_dir(args, cfg)
    table = measure_latency_table(cfg.space, seed=seed)
    path = os.path.join(out, "latency_table.json")
    save_latency_table(table, path)
    print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="supernas",
        description="single-path supernet training and architecture search")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False, arch=False):
        p.add_argument("--config", required=True, help="run config JSON")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
        if checkpoint:
            p.add_argument("--checkpoint", help="supernet checkpoint path")
        if arch:
            p.add_argument("--arch", required=True,
                           help="architecture genes, e.g. 0.3.1-2.0.0-...")

    p = sub.add_parser("train-supernet", help="train the weight-sharing net")
    common(p, checkpoint=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("search", help="search architectures on a checkpoint")
    common(p, checkpoint=True)
    p.add_argument("--constraint", action="append", metavar="METRIC:VALUE",
                   help="hard upper bound, repeatable (all must hold)")
    p.add_argument("--strategy", choices=("evolution", "random"))
    p.add_argument("--table", help="latency table JSON")
    p.set_defaults(func=cmd_search, require_checkpoint=True)

    p = sub.add_parser("retrain", help="train one architecture from scratch")
    common(p, arch=True)
    p.set_defaults(func=cmd_retrain)

    p = sub.add_parser("eval", help="evaluate an arch with inherited weights")
    common(p, checkpoint=True, arch=True)
    p.set_defaults(func=cmd_eval, require_checkpoint=True)

    p = sub.add_parser("cost", help="print a cost report for an architecture")
    common(p, arch=True)
    p.add_argument("--table", help="latency table JSON")
    p.add_argument("--json", action="store_true", help="emit JSON")
    p.set_defaults(func=cmd_cost)

    p = sub.add_parser("make-latency-table",
                       help="time per-block choices and write a table")
    common(p)
    p.set_defaults(func=cmd_make_latency_table)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "require_checkpoint", False) and not args.checkpoint:
        print("error: this command needs --checkpoint", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except SupernasError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
