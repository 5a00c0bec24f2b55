"""Shadow-model farm: trains the labeled population of shadow models.

Each shadow index is an independent job: it samples a property-controlled
training set, trains a fresh model, and must clear the task-accuracy gate
on a shared held-out eval split. Failures are retried with fresh
initialization seeds, then with a resampled dataset; a shadow that still
fails raises instead of silently skewing the class balance.

All randomness derives from integer tuples fed to numpy's SeedSequence:
dataset draws use (master_seed, shadow_index, cycle, 0), training uses
(master_seed, shadow_index, cycle, attempt, 1). Output is therefore a
pure function of (master seed, configs), independent of worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import architectures
from .data import LabeledDataset, PropertySpec, evaluate_property, \
    sample_shadow_dataset
from .errors import ConfigurationError, TrainingError
from .records import RecordFile, ShadowRecord

# Tags keeping eval-split randomness distinct from the per-shadow streams.
_EVAL_TAG = 0xE7A1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    loss: str = "mse"
    optimizer: str = "adam"
    learning_rate: float = 0.001
    batch_size: int = 64
    accuracy_gate: float = 0.85
    max_retrain_attempts: int = 3

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if not 0.0 < self.accuracy_gate < 1.0:
            raise ConfigurationError("accuracy gate must be inside (0, 1)")
        if self.batch_size < 1 or self.max_retrain_attempts < 1:
            raise ConfigurationError("batch size and retrain attempts must be >= 1")


@dataclass(frozen=True)
class FarmConfig:
    k: int = 240
    arch_id: str = "A9"
    shadow_n: int = 500
    master_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.k < 2 or self.k % 2:
            raise ConfigurationError("k must be even and >= 2")
        if self.shadow_n < 1 or self.workers < 1:
            raise ConfigurationError("shadow_n and workers must be >= 1")


def train_model(model: architectures.Model, dataset: LabeledDataset,
                config: TrainConfig, shuffle_rng: np.random.Generator) -> None:
    """In-place gradient training of a built model on the task labels."""
    labels = dataset.task_labels.astype(model.dtype).reshape(-1, 1)
    opt = None
    n = len(dataset)
    from . import engine
    opt = engine.make_optimizer(config.optimizer, model.parameters(),
                                config.learning_rate)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            model.net.zero_grad()
            out = model.forward(dataset.images[idx])
            value, dloss = engine.loss(out, labels[idx], config.loss)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch}")
            model.net.backward(dloss, need_input_grad=False)
            opt.step()


def task_accuracy(model: architectures.Model, dataset: LabeledDataset,
                  batch_size: int = 512) -> float:
    """Fraction of correct task predictions at decision threshold 0.5."""
    correct = 0
    for start in range(0, len(dataset), batch_size):
        out = model.forward(dataset.images[start:start + batch_size])
        pred = (out[:, 0] >= 0.5).astype(np.uint8)
        correct += int(np.sum(pred == dataset.task_labels[start:start + batch_size]))
    return correct / len(dataset)


def train_shadow_model(dataset: LabeledDataset, arch_id: str,
                       config: TrainConfig, eval_set: LabeledDataset,
                       seed) -> tuple[architectures.Model, float]:
    """Train one shadow model and measure its eval accuracy."""
    seq = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)
    init_seq, shuffle_seq = seq.spawn(2)
    model = architectures.build_architecture(arch_id, dataset.image_shape,
                                             seed=init_seq)
    train_model(model, dataset, config, np.random.default_rng(shuffle_seq))
    return model, task_accuracy(model, eval_set)


def carve_eval_split(pool: LabeledDataset, shadow_n: int,
                     master_seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Split the pool into a task-balanced eval set and the sampling pool.

    Eval size is min(max(1000, 10 * shadow_n), len(pool)), rounded down to
    an even task balance. Carved before any shadow sampling so no shadow's
    training set can overlap it.
    """
    rng = np.random.default_rng(np.random.SeedSequence((master_seed, _EVAL_TAG)))
    target = min(max(1000, 10 * shadow_n), len(pool))
    pos = np.flatnonzero(pool.task_labels == 1)
    neg = np.flatnonzero(pool.task_labels == 0)
    per_class = min(target // 2, len(pos), len(neg))
    eval_idx = np.concatenate([rng.choice(pos, per_class, replace=False),
                               rng.choice(neg, per_class, replace=False)])
    eval_idx.sort()
    mask = np.ones(len(pool), dtype=bool)
    mask[eval_idx] = False
    return pool.subset(eval_idx), pool.subset(np.flatnonzero(mask))


def _provenance_seed(master_seed: int, shadow_index: int) -> int:
    seq = np.random.SeedSequence((master_seed, shadow_index))
    return int(seq.generate_state(1, dtype=np.uint64)[0])


def _run_one_shadow(shadow_index: int, want_property: bool,
                    train_pool: LabeledDataset, eval_set: LabeledDataset,
                    farm: FarmConfig, train_cfg: TrainConfig,
                    pspec: PropertySpec) -> ShadowRecord:
    master = farm.master_seed
    for cycle in range(2):
        ds_seed = np.random.SeedSequence((master, shadow_index, cycle, 0))
        ds = sample_shadow_dataset(train_pool, farm.shadow_n, pspec,
                                   want_property, ds_seed)
        holds, _ = evaluate_property(ds, pspec)
        assert holds == want_property  # guaranteed by the sampler's clamp
        for attempt in range(train_cfg.max_retrain_attempts):
            seed = np.random.SeedSequence(
                (master, shadow_index, cycle, attempt, 1))
            model, accuracy = train_shadow_model(ds, farm.arch_id, train_cfg,
                                                 eval_set, seed)
            if accuracy >= train_cfg.accuracy_gate:
                weights = architectures.flatten_parameters(model, "full")
                return ShadowRecord(
                    weights=weights.astype(np.float32),
                    property_label=int(holds),
                    accuracy=accuracy,
                    seed=_provenance_seed(master, shadow_index),
                    shadow_index=shadow_index,
                    retrain_count=cycle * train_cfg.max_retrain_attempts + attempt)
    raise TrainingError(
        f"shadow {shadow_index} failed the {train_cfg.accuracy_gate:.0%} "
        f"accuracy gate after {2 * train_cfg.max_retrain_attempts} attempts")


def run_farm(pool: LabeledDataset, farm: FarmConfig, train_cfg: TrainConfig,
             pspec: PropertySpec) -> RecordFile:
    """Train the full shadow population; result order is by shadow index."""
    eval_set, train_pool = carve_eval_split(pool, farm.shadow_n,
                                            farm.master_seed)
    spec = architectures.make_spec(farm.arch_id, pool.image_shape)

    def job(index: int) -> ShadowRecord:
        # Even indices carry the property so partial populations stay balanced.
        return _run_one_shadow(index, index % 2 == 0, train_pool, eval_set,
                               farm, train_cfg, pspec)

    if farm.workers == 1:
        results = [job(i) for i in range(farm.k)]
    else:
        with ThreadPoolExecutor(max_workers=farm.workers) as pool_exec:
            results = list(pool_exec.map(job, range(farm.k)))
    return RecordFile(farm.arch_id, tuple(pool.image_shape), farm.master_seed,
                      architectures.boundary_table(spec), results)
