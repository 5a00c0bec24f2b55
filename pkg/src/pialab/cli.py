"""Command-line entry point.

Subcommands: gen-data, describe, farm, attack, grid-search, report,
run-all. A JSON config file (--config) supplies defaults for any long
flag (keys use underscores); explicit flags win. PIALAB_WORKERS sets the
default worker count.

Exit codes: 0 success, 1 usage/configuration, 2 data/format,
3 numeric/training failure.
"""

import os

# Single-threaded BLAS keeps results bit-identical regardless of how many
# farm workers run concurrently. Must happen before numpy loads.
for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import csv
import json
import sys

import numpy as np

from . import architectures, attack, data, farm, records, report
from .errors import (ConfigurationError, DataError, NumericError,
                     PialabError, TrainingError, UsageError)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _default_workers() -> int:
    return int(os.environ.get("PIALAB_WORKERS", "1"))


def build_parser() -> _Parser:
    p = _Parser(prog="pialab",
                description="Property inference attacks on CNN classifiers")
    p.add_argument("--config", help="JSON file with default flag values")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--task-strength", type=float, default=0.5)
    g.add_argument("--property-strength", type=float, default=0.8)
    g.add_argument("--noise-level", type=float, default=0.35)

    d = sub.add_parser("describe", help="print the architecture table")
    d.add_argument("--image-size", type=int, default=64)

    f = sub.add_parser("farm", help="train a shadow-model population")
    f.add_argument("--arch", required=True, choices=architectures.ARCH_IDS)
    f.add_argument("--out", required=True, help="record file to write")
    f.add_argument("--k", type=int, default=240)
    f.add_argument("--n", type=int, default=500)
    f.add_argument("--preset", choices=("desk", "paper"), default="desk")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--workers", type=int, default=None)
    f.add_argument("--data-dir", help="gen-data directory (default: synthetic)")
    f.add_argument("--pool-size", type=int, default=8000)
    f.add_argument("--image-size", type=int, default=32)
    f.add_argument("--epochs", type=int, default=None)
    f.add_argument("--gate", type=float, default=None)
    f.add_argument("--batch-size", type=int, default=64)
    f.add_argument("--lr", type=float, default=0.001)
    f.add_argument("--threshold", type=float, default=0.7)

    a = sub.add_parser("attack", help="repeated attacks on a record file")
    a.add_argument("--records", required=True)
    a.add_argument("--out", required=True, help="JSON-lines result file")
    a.add_argument("--mode", choices=architectures.SUBSET_MODES + ("all",),
                   default="all")
    a.add_argument("--reps", type=int, default=30)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--epochs", type=int, default=attack.FINAL_EPOCHS)
    a.add_argument("--split", choices=("desk", "paper"), default="desk")
    a.add_argument("--tuned", action="store_true",
                   help="use the grid-search winner (default when no "
                        "hyperparameters are given)")
    a.add_argument("--lr", type=float, default=None)
    a.add_argument("--loss", choices=("mse", "l1"), default=None)
    a.add_argument("--batch-size", type=int, default=None)
    a.add_argument("--optimizer", choices=("sgd", "adam"), default=None)
    a.add_argument("--activation", choices=("sigmoid", "relu", "tanh"),
                   default=None)
    a.add_argument("--permute-labels", action="store_true",
                   help="chance-level control")
    a.add_argument("--standardize", action="store_true",
                   help="z-score each weight coordinate with train-split "
                        "statistics (default: raw weights)")

    gs = sub.add_parser("grid-search", help="hyperparameter grid search")
    gs.add_argument("--records", required=True, nargs="+",
                    help="one record file per architecture")
    gs.add_argument("--out", required=True, help="CSV result table")
    gs.add_argument("--seed", type=int, default=0)
    gs.add_argument("--split", choices=("desk", "paper"), default="desk")
    gs.add_argument("--lrs", default="0.005,0.001,0.0005")
    gs.add_argument("--losses", default="mse,l1")
    gs.add_argument("--batch-sizes", default="16,32,64")
    gs.add_argument("--optimizers", default="sgd,adam")
    gs.add_argument("--activations", default="sigmoid,relu,tanh")
    gs.add_argument("--repeats", type=int, default=6)
    gs.add_argument("--epochs", type=int, default=10)

    r = sub.add_parser("report", help="re-aggregate a run directory")
    r.add_argument("--run-dir", required=True)

    ra = sub.add_parser("run-all", help="full pipeline for a preset")
    ra.add_argument("--preset", choices=("desk", "paper"), default="desk")
    ra.add_argument("--out", required=True)
    ra.add_argument("--seed", type=int, default=0)
    ra.add_argument("--workers", type=int, default=None)
    ra.add_argument("--arch", action="append", dest="archs",
                    choices=architectures.ARCH_IDS,
                    help="override the preset's architecture list")
    ra.add_argument("--k", type=int, default=None)
    ra.add_argument("--n", type=int, default=None)
    ra.add_argument("--epochs", type=int, default=None)
    ra.add_argument("--reps", type=int, default=None)
    ra.add_argument("--gate", type=float, default=None)
    ra.add_argument("--image-size", type=int, default=None)
    ra.add_argument("--pool-size", type=int, default=None)
    ra.add_argument("--data-dir", default=None)
    ra.add_argument("--no-control", action="store_true")
    p.subcommand_parsers = {"gen-data": g, "describe": d, "farm": f,
                            "attack": a, "grid-search": gs, "report": r,
                            "run-all": ra}
    return p


def _split_counts(kind: str, n_records: int):
    if kind == "paper":
        if n_records != sum(attack.PAPER_SPLIT):
            raise ConfigurationError(
                f"paper split expects {sum(attack.PAPER_SPLIT)} records, got "
                f"{n_records}")
        return attack.PAPER_SPLIT
    return attack.desk_split_counts(n_records)


def _cmd_gen_data(args) -> int:
    cfg = data.SyntheticConfig(image_size=args.image_size, n=args.n,
                               seed=args.seed,
                               task_strength=args.task_strength,
                               property_strength=args.property_strength,
                               noise_level=args.noise_level)
    ds = data.generate_synthetic(cfg)
    data.save_dataset_dir(ds, args.out, cfg)
    print(f"wrote {len(ds)} images to {args.out}")
    return 0


def _cmd_describe(args) -> int:
    print(architectures.describe((3, args.image_size, args.image_size)))
    return 0


def _farm_pool(args) -> data.LabeledDataset:
    if args.data_dir:
        return data.load_dataset_dir(args.data_dir)
    cfg = data.SyntheticConfig(image_size=args.image_size, n=args.pool_size,
                               seed=args.seed)
    return data.generate_synthetic(cfg)


def _cmd_farm(args) -> int:
    paper = args.preset == "paper"
    workers = args.workers if args.workers else _default_workers()
    k = 1800 if (paper and args.k == 240) else args.k
    n = 2000 if (paper and args.n == 500) else args.n
    train_cfg = farm.TrainConfig(
        epochs=args.epochs if args.epochs else (50 if paper else 10),
        learning_rate=args.lr, batch_size=args.batch_size,
        accuracy_gate=args.gate if args.gate else (0.85 if paper else 0.80))
    farm_cfg = farm.FarmConfig(k=k, arch_id=args.arch, shadow_n=n,
                               master_seed=args.seed, workers=workers)
    pool = _farm_pool(args)
    rf = farm.run_farm(pool, farm_cfg, train_cfg,
                       data.PropertySpec(threshold=args.threshold))
    records.persist_records(rf, args.out)
    print(f"wrote {len(rf.records)} shadow records to {args.out}")
    return 0


def _cmd_attack(args) -> int:
    explicit = [args.lr, args.loss, args.batch_size, args.optimizer,
                args.activation]
    if args.tuned and any(v is not None for v in explicit):
        raise UsageError("--tuned conflicts with explicit hyperparameters")
    rf = records.load_records(args.records)
    hp = attack.AttackHyperparams(
        learning_rate=args.lr if args.lr is not None else 0.005,
        loss=args.loss or "mse",
        batch_size=args.batch_size if args.batch_size is not None else 32,
        optimizer=args.optimizer or "adam",
        activation=args.activation or "relu")
    modes = architectures.SUBSET_MODES if args.mode == "all" else (args.mode,)
    counts = _split_counts(args.split, len(rf.records))
    by_mode = attack.repeated_attacks(rf, hp, counts, repetitions=args.reps,
                                      modes=modes, epochs=args.epochs,
                                      seed=args.seed,
                                      permute_labels=args.permute_labels,
                                      standardize=args.standardize)
    with open(args.out, "w") as fh:
        for rs in by_mode.values():
            for r in rs:
                fh.write(json.dumps({"schema_version": report.SCHEMA_VERSION,
                                     **r.to_dict()}, sort_keys=True) + "\n")
    for mode, rs in by_mode.items():
        accs = [r.accuracy for r in rs]
        print(f"{rf.arch_id} {mode}: median accuracy "
              f"{np.median(accs):.3f} (std {np.std(accs):.3f})")
    return 0


def _cmd_grid_search(args) -> int:
    rfs = {}
    for path in args.records:
        rf = records.load_records(path)
        rfs[rf.arch_id] = rf
    counts = {a: _split_counts(args.split, len(rf.records))
              for a, rf in rfs.items()}

    def floats(s):
        return tuple(float(v) for v in s.split(","))

    def ints(s):
        return tuple(int(v) for v in s.split(","))

    grid = attack.HyperGrid(
        learning_rates=floats(args.lrs),
        losses=tuple(args.losses.split(",")),
        batch_sizes=ints(args.batch_sizes),
        optimizers=tuple(args.optimizers.split(",")),
        activations=tuple(args.activations.split(",")),
        repeats=args.repeats, epochs=args.epochs)
    best, table = attack.grid_search(rfs, grid, counts, seed=args.seed)
    arch_ids = sorted(rfs)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["cell", "learning_rate", "loss", "batch_size", "optimizer",
                    "activation", "score"] + [f"median_{a}" for a in arch_ids])
        for row in table:
            w.writerow([row["cell"], row["learning_rate"], row["loss"],
                        row["batch_size"], row["optimizer"], row["activation"],
                        f"{row['score']:.6f}"] +
                       [f"{row['per_arch_median'][a]:.6f}" for a in arch_ids])
    print(f"winner: {best}")
    return 0


def _cmd_report(args) -> int:
    rep = report.load_report(os.path.join(args.run_dir, "report.json"))
    results = report.load_results_jsonl(
        os.path.join(args.run_dir, "attack_results.jsonl"))
    scored = report.aggregate([r for r in results if not r.permuted_labels])
    controls = [r for r in results if r.permuted_labels]
    control_agg = report.aggregate(controls) if controls else {}
    for arch_id, block in rep["architectures"].items():
        block["modes"] = scored[arch_id]
        if arch_id in control_agg:
            block["control"] = control_agg[arch_id]["full"]
    report.emit(rep, args.run_dir)
    print(f"re-aggregated {len(results)} results into {args.run_dir}")
    return 0


def _cmd_run_all(args) -> int:
    config = report.PRESETS[args.preset]
    overrides = {}
    if args.archs:
        overrides["arch_ids"] = tuple(args.archs)
    for attr, value in (("k", args.k), ("shadow_n", args.n),
                        ("shadow_epochs", args.epochs),
                        ("repetitions", args.reps),
                        ("accuracy_gate", args.gate),
                        ("image_size", args.image_size),
                        ("pool_size", args.pool_size),
                        ("data_dir", args.data_dir)):
        if value is not None:
            overrides[attr] = value
    if args.no_control:
        overrides["include_control"] = False
    if overrides:
        from dataclasses import replace
        config = replace(config, **overrides)
    if config.preset == "paper" and not config.data_dir:
        raise UsageError("the paper preset needs --data-dir with CelebA")
    workers = args.workers if args.workers else _default_workers()
    rep = report.run_experiment(config, args.seed, workers, args.out)
    for arch_id, block in rep["architectures"].items():
        acc = block["modes"]["full"]["accuracy"]
        print(f"{arch_id}: full-mode median accuracy {acc['median']:.3f} "
              f"(std {acc['std']:.3f})")
    print(f"report written to {os.path.join(args.out, 'report.json')}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "describe": _cmd_describe,
    "farm": _cmd_farm,
    "attack": _cmd_attack,
    "grid-search": _cmd_grid_search,
    "report": _cmd_report,
    "run-all": _cmd_run_all,
}


def _apply_config_file(parser: _Parser, argv: list[str]) -> list[str]:
    """Use --config JSON values as defaults for the remaining flags."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    try:
        path = argv[i + 1]
    except IndexError:
        raise UsageError("--config needs a file path")
    try:
        with open(path) as fh:
            values = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"config file {path!r} not found")
    except json.JSONDecodeError as exc:
        raise DataError(f"config file {path!r} is not valid JSON: {exc}")
    if not isinstance(values, dict):
        raise DataError(f"config file {path!r} must hold a JSON object")
    defaults = {k.replace("-", "_"): v for k, v in values.items()}
    parser.set_defaults(**defaults)
    # Subcommands parse into a fresh namespace, so their parsers need the
    # defaults too, filtered to the flags each one actually defines.
    for sub in parser.subcommand_parsers.values():
        dests = {action.dest for action in sub._actions}
        sub.set_defaults(**{k: v for k, v in defaults.items() if k in dests})
    return argv[:i] + argv[i + 2:]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except (TrainingError, NumericError) as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
