"""End-to-end experiment orchestration and result reporting.

A preset fixes data generation, farm, and attack configuration; the
report aggregates per-architecture attack metrics (median and population
standard deviation over the repeated attacks), the chance-level control,
and, with three or more architectures, the correlation between model
size and attack accuracy.

Reports carry full provenance (all configs and seeds, no timestamps), so
a rerun from the same report body is byte-identical.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, asdict, replace

import numpy as np

from . import architectures, attack, data, farm, records
from .errors import ConfigurationError, UsageError

SCHEMA_VERSION = 1
MODES = ("full", "conv_only", "fcn_only")

_DATA_TAG = 0xDA7A
_FARM_TAG = 0xFA53
_ATTACK_TAG = 0xA7AC


@dataclass(frozen=True)
class ExperimentConfig:
    preset: str = "desk"
    arch_ids: tuple[str, ...] = ("A5", "A9")
    k: int = 240
    shadow_n: int = 500
    shadow_epochs: int = 10
    accuracy_gate: float = 0.80
    shadow_batch_size: int = 64
    shadow_learning_rate: float = 0.001
    image_size: int = 32
    pool_size: int = 8000
    data_dir: str | None = None  # real-data mode when set
    task_strength: float = 0.5
    property_strength: float = 0.8
    noise_level: float = 0.35
    property_threshold: float = 0.7
    attack_epochs: int = attack.FINAL_EPOCHS
    repetitions: int = 30
    include_control: bool = True

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        d["arch_ids"] = tuple(d["arch_ids"])
        return cls(**d)


DESK_PRESET = ExperimentConfig()

PAPER_PRESET = ExperimentConfig(
    preset="paper",
    arch_ids=architectures.ARCH_IDS,
    k=1800,
    shadow_n=2000,
    shadow_epochs=50,
    accuracy_gate=0.85,
    image_size=64,
    pool_size=0,  # real data required
    data_dir="",  # must be overridden
)

PRESETS = {"desk": DESK_PRESET, "paper": PAPER_PRESET}


def _derive_seed(*parts: int) -> int:
    seq = np.random.SeedSequence(tuple(int(p) for p in parts))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def split_counts(config: ExperimentConfig) -> tuple[int, int, int]:
    if config.preset == "paper":
        if config.k != sum(attack.PAPER_SPLIT):
            raise ConfigurationError(
                f"paper preset expects k={sum(attack.PAPER_SPLIT)}, got "
                f"{config.k}")
        return attack.PAPER_SPLIT
    return attack.desk_split_counts(config.k)


def build_pool(config: ExperimentConfig, master_seed: int) -> data.LabeledDataset:
    if config.data_dir:
        attr_path = os.path.join(config.data_dir, "list_attr_celeba.txt")
        with open(attr_path) as fh:
            table = data.parse_attribute_file(fh)
        return data.load_dataset(os.path.join(config.data_dir, "images"),
                                 table, target_size=config.image_size)
    synth = data.SyntheticConfig(
        image_size=config.image_size, n=config.pool_size,
        seed=_derive_seed(master_seed, _DATA_TAG),
        task_strength=config.task_strength,
        property_strength=config.property_strength,
        noise_level=config.noise_level)
    return data.generate_synthetic(synth)


def aggregate(results: list[attack.AttackResult]) -> dict:
    """Medians and population standard deviations per (arch, mode, metric).

    Median of an even count is the average of the two middle values.
    """
    if not results:
        raise UsageError("cannot aggregate an empty result list")
    grouped: dict[tuple[str, str], list[attack.AttackResult]] = {}
    for r in results:
        grouped.setdefault((r.arch_id, r.mode), []).append(r)
    out: dict[str, dict] = {}
    for (arch_id, mode), rs in grouped.items():
        block = {}
        for metric in ("accuracy", "precision", "recall"):
            values = np.array([getattr(r, metric) for r in rs], dtype=float)
            block[metric] = {"median": float(np.median(values)),
                             "std": float(np.std(values))}
        out.setdefault(arch_id, {})[mode] = block
    return out


def complexity_correlation(points: list[tuple[int, float]],
                           permutations: int = 10_000, seed: int = 0) -> dict:
    """Pearson and Spearman between parameter count and attack accuracy,
    with permutation-test p-values (one coefficient per shuffled pairing)."""
    if len(points) < 3:
        raise UsageError("correlation needs at least 3 architecture points")
    x = np.array([p[0] for p in points], dtype=float)
    y = np.array([p[1] for p in points], dtype=float)

    def pearson(a: np.ndarray, b: np.ndarray) -> tuple[float, bool]:
        if np.std(a) == 0 or np.std(b) == 0:
            return 0.0, True
        return float(np.corrcoef(a, b)[0, 1]), False

    def ranks(a: np.ndarray) -> np.ndarray:
        from scipy.stats import rankdata
        return rankdata(a)

    r_pearson, deg_p = pearson(x, y)
    r_spearman, deg_s = pearson(ranks(x), ranks(y))

    rng = np.random.default_rng(seed)
    rx = ranks(x)
    count_p = count_s = 0
    for _ in range(permutations):
        perm = rng.permutation(len(y))
        count_p += abs(pearson(x, y[perm])[0]) >= abs(r_pearson)
        count_s += abs(pearson(rx, ranks(y)[perm])[0]) >= abs(r_spearman)
    return {
        "pearson": r_pearson,
        "spearman": r_spearman,
        "pearson_permutation_p": (count_p + 1) / (permutations + 1),
        "spearman_permutation_p": (count_s + 1) / (permutations + 1),
        "degenerate": deg_p or deg_s,
        "points": [[int(c), float(a)] for c, a in points],
    }


def run_experiment(config: ExperimentConfig, master_seed: int, workers: int,
                   outdir: str) -> dict:
    """gen/sample -> farm -> attack -> aggregate. Idempotent given seed.

    Persists shadow records and per-repetition attack results under
    outdir so every stage can be rerun or re-aggregated independently.
    """
    os.makedirs(outdir, exist_ok=True)
    pool = build_pool(config, master_seed)
    pspec = data.PropertySpec(threshold=config.property_threshold)
    counts = split_counts(config)
    train_cfg = farm.TrainConfig(
        epochs=config.shadow_epochs, learning_rate=config.shadow_learning_rate,
        batch_size=config.shadow_batch_size,
        accuracy_gate=config.accuracy_gate)

    all_results: list[attack.AttackResult] = []
    arch_blocks: dict[str, dict] = {}
    for ai, arch_id in enumerate(config.arch_ids):
        farm_cfg = farm.FarmConfig(
            k=config.k, arch_id=arch_id, shadow_n=config.shadow_n,
            master_seed=_derive_seed(master_seed, ai, _FARM_TAG),
            workers=workers)
        rf = farm.run_farm(pool, farm_cfg, train_cfg, pspec)
        records.persist_records(rf, os.path.join(outdir, f"records_{arch_id}.pia"))

        attack_seed = _derive_seed(master_seed, ai, _ATTACK_TAG)
        by_mode = attack.repeated_attacks(
            rf, attack.TUNED_HYPERPARAMS, counts,
            repetitions=config.repetitions, modes=MODES,
            epochs=config.attack_epochs, seed=attack_seed)
        control = None
        if config.include_control:
            control = attack.repeated_attacks(
                rf, attack.TUNED_HYPERPARAMS, counts,
                repetitions=config.repetitions, modes=("full",),
                epochs=config.attack_epochs, seed=attack_seed,
                permute_labels=True)["full"]

        arch_results = [r for rs in by_mode.values() for r in rs]
        all_results.extend(arch_results)
        if control:
            all_results.extend(control)

        spec = architectures.make_spec(arch_id, pool.image_shape)
        retrains = [r.retrain_count for r in rf.records]
        block = {
            "parameter_count": architectures.parameter_count(spec),
            "gate": {"total_retrains": int(np.sum(retrains)),
                     "max_retrains": int(np.max(retrains)),
                     "min_accuracy": float(min(r.accuracy for r in rf.records))},
            "farm_seed": farm_cfg.master_seed,
            "attack_seed": attack_seed,
        }
        arch_blocks[arch_id] = block

    results_path = os.path.join(outdir, "attack_results.jsonl")
    with open(results_path, "w") as fh:
        for r in all_results:
            fh.write(json.dumps({"schema_version": SCHEMA_VERSION,
                                 **r.to_dict()}, sort_keys=True) + "\n")

    scored = aggregate([r for r in all_results if not r.permuted_labels])
    controls = [r for r in all_results if r.permuted_labels]
    control_agg = aggregate(controls) if controls else {}
    for arch_id, block in arch_blocks.items():
        block["modes"] = scored[arch_id]
        if arch_id in control_agg:
            block["control"] = control_agg[arch_id]["full"]

    correlation = None
    if len(config.arch_ids) >= 3:
        points = [(arch_blocks[a]["parameter_count"],
                   arch_blocks[a]["modes"]["full"]["accuracy"]["median"])
                  for a in config.arch_ids]
        correlation = complexity_correlation(points, seed=master_seed)

    report = {
        "schema_version": SCHEMA_VERSION,
        "master_seed": master_seed,
        "config": config.to_dict(),
        "split_counts": list(counts),
        "hyperparams": asdict(attack.TUNED_HYPERPARAMS),
        "pool": {"n": len(pool), "image_shape": list(pool.image_shape),
                 "task_balance": float(np.mean(pool.task_labels)),
                 "property_balance": float(np.mean(pool.property_attrs))},
        "architectures": arch_blocks,
        "correlation": correlation,
    }
    emit(report, outdir)
    return report


def emit(report: dict, outdir: str,
         formats: tuple[str, ...] = ("json", "csv")) -> list[str]:
    """Write report.json plus the figure-analog CSV/plot-data files."""
    os.makedirs(outdir, exist_ok=True)
    written = []
    if "json" in formats:
        path = os.path.join(outdir, "report.json")
        with open(path, "w") as fh:
            json.dump(report, fh, sort_keys=True, indent=2)
            fh.write("\n")
        written.append(path)
    if "csv" in formats or "plot-data" in formats:
        archs = report["architectures"]
        path = os.path.join(outdir, "fig2a_metrics.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arch_id", "accuracy_median", "accuracy_std",
                        "precision_median", "precision_std",
                        "recall_median", "recall_std"])
            for arch_id, block in archs.items():
                full = block["modes"]["full"]
                w.writerow([arch_id] + [
                    f"{full[m][s]:.6f}" for m in ("accuracy", "precision",
                                                  "recall")
                    for s in ("median", "std")])
        written.append(path)
        path = os.path.join(outdir, "fig2b_modes.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arch_id", "mode", "accuracy_median", "accuracy_std"])
            for arch_id, block in archs.items():
                for mode in MODES:
                    acc = block["modes"][mode]["accuracy"]
                    w.writerow([arch_id, mode, f"{acc['median']:.6f}",
                                f"{acc['std']:.6f}"])
        written.append(path)
        path = os.path.join(outdir, "fig4_complexity.csv")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["arch_id", "parameter_count", "accuracy_median"])
            for arch_id, block in archs.items():
                acc = block["modes"]["full"]["accuracy"]["median"]
                w.writerow([arch_id, block["parameter_count"], f"{acc:.6f}"])
        written.append(path)
    return written


def load_report(path: str) -> dict:
    with open(path) as fh:
        return json.load(fh)


def load_results_jsonl(path: str) -> list[attack.AttackResult]:
    out = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            d.pop("schema_version", None)
            out.append(attack.AttackResult(**d))
    return out
