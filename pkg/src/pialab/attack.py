"""Meta-classifier over flattened shadow-model weights.

The attack model is a two-layer perceptron (10 hidden units, sigmoid
output) fed with one of three weight slices: all parameters, convolution
layers only, or fully-connected layers only. Splits are stratified and
held fixed across subset modes and repetitions so that comparisons
isolate the weight-subset variable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field, asdict

import numpy as np

from . import engine
from .errors import ConfigurationError, TrainingError, UsageError
from .records import RecordFile

PAPER_SPLIT = (1500, 100, 200)

# Seed-stream tags (see farm.py for the convention).
_TRAIN_TAG = 0xA77A
_PERM_TAG = 0x9E12
_SPLIT_TAG = 0x51D5
_GRID_TAG = 0x6B1D


@dataclass(frozen=True)
class AttackHyperparams:
    learning_rate: float = 0.005
    loss: str = "mse"
    batch_size: int = 32
    optimizer: str = "adam"
    activation: str = "relu"  # hidden-layer activation


# Grid-search winner, used by --tuned runs.
TUNED_HYPERPARAMS = AttackHyperparams()

FINAL_EPOCHS = 20


@dataclass(frozen=True)
class HyperGrid:
    learning_rates: tuple = (0.005, 0.001, 0.0005)
    losses: tuple = ("mse", "l1")
    batch_sizes: tuple = (16, 32, 64)
    optimizers: tuple = ("sgd", "adam")
    activations: tuple = ("sigmoid", "relu", "tanh")
    repeats: int = 6
    epochs: int = 10

    def cells(self) -> list[AttackHyperparams]:
        return [AttackHyperparams(lr, loss, bs, opt, act)
                for lr in self.learning_rates
                for loss in self.losses
                for bs in self.batch_sizes
                for opt in self.optimizers
                for act in self.activations]


@dataclass(frozen=True)
class Splits:
    train: np.ndarray
    validation: np.ndarray
    test: np.ndarray


def desk_split_counts(k: int) -> tuple[int, int, int]:
    """Fractional split 5/6 : 1/18 : 1/9, remainder to train."""
    val = round(k / 18)
    test = round(k / 9)
    return k - val - test, val, test


def split_attack_dataset(labels: np.ndarray, counts: tuple[int, int, int],
                         seed) -> Splits:
    """Stratified disjoint train/validation/test index sets."""
    n = len(labels)
    if sum(counts) != n:
        raise ConfigurationError(
            f"split sizes {counts} do not sum to the record count {n}")
    if min(counts) < 0:
        raise ConfigurationError(f"negative split size in {counts}")
    rng = np.random.default_rng(np.random.SeedSequence((int(seed), _SPLIT_TAG)))
    pos = rng.permutation(np.flatnonzero(labels == 1))
    neg = rng.permutation(np.flatnonzero(labels == 0))
    # Largest-remainder allocation of positives across splits keeps every
    # split within +-1 of exact stratification.
    quotas = [c * len(pos) / n for c in counts]
    alloc = [int(np.floor(q)) for q in quotas]
    order = np.argsort([a - q for q, a in zip(quotas, alloc)], kind="stable")
    for i in range(len(pos) - sum(alloc)):
        alloc[int(order[i])] += 1
    parts = []
    p_off = 0
    g_off = 0
    for n_split, n_pos in zip(counts, alloc):
        n_neg = n_split - n_pos
        part = np.concatenate([pos[p_off:p_off + n_pos],
                               neg[g_off:g_off + n_neg]])
        parts.append(np.sort(part))
        p_off += n_pos
        g_off += n_neg
    return Splits(*parts)


def subset_matrix(rf: RecordFile, mode: str) -> np.ndarray:
    """(records, width) float32 matrix of one weight slice."""
    want = {"full": ("conv", "fc"), "conv_only": ("conv",),
            "fcn_only": ("fc",)}.get(mode)
    if want is None:
        raise ConfigurationError(f"unknown subset mode {mode!r}")
    cols = [np.arange(e.offset, e.offset + e.length)
            for e in rf.boundaries if e.layer_kind in want]
    if not cols:
        raise ConfigurationError(f"subset {mode!r} selects no layers")
    idx = np.concatenate(cols)
    return np.stack([r.weights[idx] for r in rf.records])


def record_labels(rf: RecordFile) -> np.ndarray:
    return np.array([r.property_label for r in rf.records], dtype=np.uint8)


def build_attack_net(input_width: int, activation: str,
                     rng: np.random.Generator) -> engine.Sequential:
    return engine.Sequential([
        engine.FullyConnected(input_width, 10, rng),
        engine.Activation(activation),
        engine.FullyConnected(10, 1, rng),
        engine.Activation("sigmoid"),
    ])


def train_attack_model(x: np.ndarray, y: np.ndarray, hp: AttackHyperparams,
                       epochs: int, seed) -> engine.Sequential:
    """Train the two-layer perceptron; deterministic given the seed."""
    if x.ndim != 2:
        raise ConfigurationError(f"attack input must be 2-d, got {x.shape}")
    seq = seed if isinstance(seed, np.random.SeedSequence) \
        else np.random.SeedSequence(seed)
    init_seq, shuffle_seq = seq.spawn(2)
    net = build_attack_net(x.shape[1], hp.activation,
                           np.random.default_rng(init_seq))
    rng = np.random.default_rng(shuffle_seq)
    targets = y.astype(np.float32).reshape(-1, 1)
    opt = engine.make_optimizer(hp.optimizer, net.parameters(),
                                hp.learning_rate)
    for epoch in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(x), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            net.zero_grad()
            out = net.forward(x[idx])
            value, dloss = engine.loss(out, targets[idx], hp.loss)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite attack loss at epoch {epoch}")
            net.backward(dloss)
            opt.step()
    return net


@dataclass
class AttackResult:
    accuracy: float
    precision: float
    recall: float
    degenerate_precision: bool = False
    degenerate_recall: bool = False
    arch_id: str = ""
    mode: str = "full"
    repetition: int = 0
    seed: int = 0
    permuted_labels: bool = False
    hyperparams: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate_attack(net: engine.Sequential, x: np.ndarray,
                    y: np.ndarray) -> AttackResult:
    """Confusion-matrix metrics at decision threshold 0.5.

    Positive class is "training set has the property". Degenerate
    precision/recall (empty denominator) is reported as 0 with a flag.
    """
    if len(x) == 0:
        raise UsageError("cannot evaluate an attack on an empty split")
    pred = (net.forward(x)[:, 0] >= 0.5).astype(np.uint8)
    tp = int(np.sum((pred == 1) & (y == 1)))
    tn = int(np.sum((pred == 0) & (y == 0)))
    fp = int(np.sum((pred == 1) & (y == 0)))
    fn = int(np.sum((pred == 0) & (y == 1)))
    accuracy = (tp + tn) / len(y)
    deg_p = (tp + fp) == 0
    deg_r = (tp + fn) == 0
    precision = 0.0 if deg_p else tp / (tp + fp)
    recall = 0.0 if deg_r else tp / (tp + fn)
    return AttackResult(accuracy, precision, recall, deg_p, deg_r)


def repeated_attacks(rf: RecordFile, hp: AttackHyperparams,
                     counts: tuple[int, int, int], repetitions: int = 30,
                     modes: tuple[str, ...] = ("full", "conv_only", "fcn_only"),
                     epochs: int = FINAL_EPOCHS, seed: int = 0,
                     permute_labels: bool = False,
                     standardize: bool = False) -> dict[str, list[AttackResult]]:
    """Seeded repeated attacks per subset mode over the fixed splits.

    With permute_labels=True, every repetition shuffles all property
    labels with its own seed; the resulting accuracies are the
    chance-level control. With standardize=True, each weight coordinate
    is z-scored using the train split's statistics (off by default: the
    attack reads raw weights).
    """
    if repetitions < 1:
        raise UsageError("repetitions must be >= 1")
    labels = record_labels(rf)
    splits = split_attack_dataset(labels, counts, seed)
    out: dict[str, list[AttackResult]] = {}
    for mode in modes:
        x = subset_matrix(rf, mode)
        if standardize:
            mu = x[splits.train].mean(axis=0)
            sd = x[splits.train].std(axis=0)
            x = (x - mu) / np.where(sd > 0, sd, 1.0)
        results = []
        for rep in range(repetitions):
            y = labels
            if permute_labels:
                perm_rng = np.random.default_rng(
                    np.random.SeedSequence((seed, rep, _PERM_TAG)))
                y = labels[perm_rng.permutation(len(labels))]
            train_seed = np.random.SeedSequence((seed, rep, _TRAIN_TAG))
            net = train_attack_model(x[splits.train], y[splits.train], hp,
                                     epochs, train_seed)
            result = evaluate_attack(net, x[splits.test], y[splits.test])
            result.arch_id = rf.arch_id
            result.mode = mode
            result.repetition = rep
            result.seed = seed
            result.permuted_labels = permute_labels
            result.hyperparams = asdict(hp)
            results.append(result)
        out[mode] = results
    return out


def grid_search(record_files: dict[str, RecordFile], grid: HyperGrid,
                counts_by_arch: dict[str, tuple[int, int, int]],
                seed: int = 0) -> tuple[AttackHyperparams, list[dict]]:
    """Validation-accuracy grid search over the full cartesian product.

    Score of a cell = median over architectures of the per-architecture
    median validation accuracy over `grid.repeats` seeded runs. Ties break
    to the lower learning rate, then the smaller batch size, then cell
    order.
    """
    if not record_files:
        raise UsageError("grid search needs at least one architecture")
    prepared = {}
    for arch_id, rf in record_files.items():
        labels = record_labels(rf)
        splits = split_attack_dataset(labels, counts_by_arch[arch_id], seed)
        prepared[arch_id] = (subset_matrix(rf, "full"), labels, splits)

    table: list[dict] = []
    best = None  # (score, -(-lr)) comparisons handled explicitly below
    best_hp = None
    for ci, hp in enumerate(grid.cells()):
        per_arch = {}
        for ai, (arch_id, (x, labels, splits)) in enumerate(prepared.items()):
            accs = []
            for rep in range(grid.repeats):
                train_seed = np.random.SeedSequence(
                    (seed, ci, ai, rep, _GRID_TAG))
                net = train_attack_model(x[splits.train], labels[splits.train],
                                         hp, grid.epochs, train_seed)
                res = evaluate_attack(net, x[splits.validation],
                                      labels[splits.validation])
                accs.append(res.accuracy)
            per_arch[arch_id] = float(np.median(accs))
        score = float(np.median(list(per_arch.values())))
        row = {"cell": ci, **asdict(hp), "score": score,
               "per_arch_median": per_arch}
        table.append(row)
        key = (score, -hp.learning_rate, -hp.batch_size)
        if best is None or key > best:
            best = key
            best_hp = hp
    return best_hp, table
