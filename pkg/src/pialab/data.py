"""Dataset ingestion, synthetic generation, and property-controlled sampling.

Real data follows the CelebA layout: an attribute file (row count, header
of attribute names, then one "<filename> +-1 ... +-1" line per image) next
to a directory of images. The synthetic generator produces desk-scale
images with two independent binary latents: the task latent draws a
bright bar in the lower-center region ("mouth open"), the property latent
adds a border band plus a global hue shift ("male"). Both are learnable
by the smallest reference architecture at the default strengths.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from typing import IO, Iterable

import numpy as np

from .errors import ConfigurationError, DataError, SamplingError, UsageError


@dataclass
class AttributeTable:
    attribute_names: list[str]
    rows: dict[str, np.ndarray]  # filename -> vector of {-1, +1}

    def column(self, name: str) -> int:
        try:
            return self.attribute_names.index(name)
        except ValueError:
            raise ConfigurationError(
                f"attribute {name!r} not in table (have "
                f"{len(self.attribute_names)} attributes)") from None


def parse_attribute_file(source: str | IO[str]) -> AttributeTable:
    """Parse a CelebA-format attribute file.

    Line 1: declared row count. Line 2: attribute names. Then one row per
    image: filename followed by one -1/1 token per attribute. Errors
    carry 1-based line numbers.
    """
    if isinstance(source, str):
        lines = source.splitlines()
    else:
        lines = source.read().splitlines()
    if not lines:
        raise DataError("line 1: empty attribute file")
    try:
        declared = int(lines[0].strip())
    except ValueError:
        raise DataError(f"line 1: expected integer row count, got {lines[0]!r}")
    if declared < 0:
        raise DataError("line 1: negative row count")
    if declared > 0 and len(lines) < 2:
        raise DataError("line 2: missing attribute header")
    names = lines[1].split() if len(lines) > 1 else []
    rows: dict[str, np.ndarray] = {}
    lineno = 2
    for raw in lines[2:]:
        lineno += 1
        if not raw.strip():
            continue
        if len(rows) == declared:
            raise DataError(
                f"line {lineno}: more rows than the declared count {declared}")
        tokens = raw.split()
        fname = tokens[0]
        if fname in rows:
            raise DataError(f"line {lineno}: duplicate filename {fname!r}")
        values = tokens[1:]
        if len(values) != len(names):
            raise DataError(
                f"line {lineno}: expected {len(names)} attribute values, got "
                f"{len(values)}")
        vec = np.empty(len(names), dtype=np.int8)
        for i, tok in enumerate(values):
            if tok == "1":
                vec[i] = 1
            elif tok == "-1":
                vec[i] = -1
            else:
                raise DataError(f"line {lineno}: malformed token {tok!r}")
        rows[fname] = vec
    if len(rows) != declared:
        raise DataError(
            f"line {lineno + 1}: end of stream after {len(rows)} rows, "
            f"declared {declared}")
    return AttributeTable(list(names), rows)


def serialize_attribute_table(table: AttributeTable) -> str:
    lines = [str(len(table.rows)), " ".join(table.attribute_names)]
    for fname, vec in table.rows.items():
        lines.append(fname + " " + " ".join(str(int(v)) for v in vec))
    return "\n".join(lines) + "\n"


@dataclass
class LabeledDataset:
    """Images with a binary task label and a binary property attribute."""

    images: np.ndarray          # (N, C, H, W) float32 in [0, 1]
    task_labels: np.ndarray     # (N,) uint8 in {0, 1}
    property_attrs: np.ndarray  # (N,) uint8 in {0, 1}
    provenance: str = "synthetic"  # "real" | "synthetic"
    seed: int | None = None

    def __post_init__(self):
        n = len(self.images)
        if len(self.task_labels) != n or len(self.property_attrs) != n:
            raise ConfigurationError("label arrays must match image count")
        for arr in (self.task_labels, self.property_attrs):
            if n and not np.isin(arr, (0, 1)).all():
                raise ConfigurationError("labels must be strictly binary")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices: np.ndarray) -> "LabeledDataset":
        return LabeledDataset(self.images[indices], self.task_labels[indices],
                              self.property_attrs[indices], self.provenance,
                              self.seed)


def load_dataset(image_dir: str, table: AttributeTable,
                 task_attr: str = "Mouth_Open", property_attr: str = "Male",
                 target_size: int = 64) -> LabeledDataset:
    """Decode every table row's image, resize, scale to [0, 1]."""
    from PIL import Image, UnidentifiedImageError

    task_col = table.column(task_attr)
    prop_col = table.column(property_attr)
    n = len(table.rows)
    images = np.empty((n, 3, target_size, target_size), dtype=np.float32)
    task = np.empty(n, dtype=np.uint8)
    prop = np.empty(n, dtype=np.uint8)
    for i, (fname, vec) in enumerate(table.rows.items()):
        path = os.path.join(image_dir, fname)
        try:
            with Image.open(path) as img:
                rgb = img.convert("RGB").resize((target_size, target_size),
                                                Image.BILINEAR)
        except FileNotFoundError:
            raise DataError(f"missing image file {path!r}")
        except (UnidentifiedImageError, OSError) as exc:
            raise DataError(f"cannot decode image {path!r}: {exc}")
        arr = np.asarray(rgb, dtype=np.float32) / 255.0
        images[i] = arr.transpose(2, 0, 1)
        task[i] = 1 if vec[task_col] > 0 else 0
        prop[i] = 1 if vec[prop_col] > 0 else 0
    return LabeledDataset(images, task, prop, provenance="real")


@dataclass(frozen=True)
class SyntheticConfig:
    image_size: int = 32
    n: int = 1000
    seed: int = 0
    task_strength: float = 0.5
    property_strength: float = 0.8
    noise_level: float = 0.35

    def __post_init__(self):
        if self.task_strength <= 0 or self.property_strength <= 0:
            raise ConfigurationError("signal strengths must be positive")
        if self.noise_level < 0:
            raise ConfigurationError("noise level must be >= 0")


def generate_synthetic(config: SyntheticConfig) -> LabeledDataset:
    """Seeded synthetic faces-stand-in dataset with independent latents."""
    s = config.image_size
    n = config.n
    rng = np.random.default_rng(config.seed)
    task = rng.integers(0, 2, size=n).astype(np.uint8)
    prop = rng.integers(0, 2, size=n).astype(np.uint8)
    images = 0.4 + config.noise_level * rng.standard_normal(
        (n, 3, s, s)).astype(np.float32)

    # Task latent: bright bar in the lower-center region. The latents stay
    # independent, but their appearance interacts (as facial attributes
    # do): on property-positive images the bar also leaves a fainter echo
    # in the upper region. The lower bar is always present at full
    # strength, so a detector trained at any property mix keeps working on
    # either variant, but how much weight a trained model places on the
    # echo region tracks the mix it saw -- that adaptation is what the
    # attack reads off.
    r0, r1 = int(0.68 * s), max(int(0.68 * s) + 1, int(0.84 * s))
    c0, c1 = int(0.30 * s), max(int(0.30 * s) + 1, int(0.70 * s))
    has_prop = prop == 1
    amp = config.task_strength * task.astype(np.float32)
    images[:, :, r0:r1, c0:c1] += amp[:, None, None, None]
    e0, e1 = int(0.10 * s), max(int(0.10 * s) + 1, int(0.45 * s))
    ec0, ec1 = int(0.15 * s), max(int(0.15 * s) + 1, int(0.85 * s))
    echo = 0.7 * amp * has_prop.astype(np.float32)
    images[:, :, e0:e1, ec0:ec1] += echo[:, None, None, None]

    # Property latent: a border band and a hue tilt. Both are kept roughly
    # mean-preserving (the band is centred, the tilt sums to zero across
    # channels) so they reshape what trained weights attend to without
    # shifting a task classifier's operating point wholesale.
    border = max(1, s // 10)
    band = np.zeros((s, s), dtype=np.float32)
    band[:border, :] = band[-border:, :] = 1.0
    band[:, :border] = band[:, -border:] = 1.0
    band -= band.mean()
    images[has_prop] += 0.5 * config.property_strength * band
    images[has_prop, 0] += 0.2 * config.property_strength
    images[has_prop, 2] -= 0.2 * config.property_strength

    np.clip(images, 0.0, 1.0, out=images)
    return LabeledDataset(images.astype(np.float32), task, prop,
                          provenance="synthetic", seed=config.seed)


@dataclass(frozen=True)
class PropertySpec:
    """Predicate "at least `threshold` of the set has the attribute"."""

    attribute: str = "Male"
    threshold: float = 0.7

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ConfigurationError("threshold must be strictly inside (0, 1)")


def evaluate_property(dataset: LabeledDataset,
                      spec: PropertySpec) -> tuple[bool, float]:
    """(holds, measured proportion) over the dataset's property column."""
    if len(dataset) == 0:
        raise UsageError("cannot evaluate a property on an empty dataset")
    proportion = float(np.mean(dataset.property_attrs))
    return proportion >= spec.threshold, proportion


def sample_shadow_dataset(pool: LabeledDataset, n: int, spec: PropertySpec,
                          want_property: bool, seed) -> LabeledDataset:
    """Draw a size-n subset whose property proportion is uniform on the
    requested side of the threshold.

    p ~ Uniform[threshold, 1) when want_property else Uniform[0, threshold);
    round(p*n) positives are clamped so the realized proportion never
    contradicts want_property. Selection is uniform without replacement
    within each property class, then shuffled.
    """
    if n < 1:
        raise UsageError("shadow dataset size must be >= 1")
    rng = np.random.default_rng(seed)
    thr = spec.threshold
    p = rng.uniform(thr, 1.0) if want_property else rng.uniform(0.0, thr)
    n_pos = int(round(p * n))
    min_true = math.ceil(thr * n)  # smallest count with proportion >= thr
    if want_property:
        n_pos = min(max(n_pos, min_true), n)
    else:
        n_pos = max(min(n_pos, min_true - 1), 0)
    n_neg = n - n_pos

    pos_idx = np.flatnonzero(pool.property_attrs == 1)
    neg_idx = np.flatnonzero(pool.property_attrs == 0)
    if len(pos_idx) < n_pos or len(neg_idx) < n_neg:
        raise SamplingError(
            f"pool too small: need {n_pos} property-positive items "
            f"(have {len(pos_idx)}) and {n_neg} negative (have {len(neg_idx)})")
    take_pos = rng.choice(pos_idx, size=n_pos, replace=False)
    take_neg = rng.choice(neg_idx, size=n_neg, replace=False)
    chosen = np.concatenate([take_pos, take_neg])
    chosen = chosen[rng.permutation(n)]
    return pool.subset(chosen)


DATASET_MANIFEST = "manifest.json"
DATASET_IMAGES = "images.f32"


def save_dataset_dir(dataset: LabeledDataset, path: str,
                     config: SyntheticConfig | None = None) -> None:
    """Write a dataset as flat little-endian float32 plus a JSON manifest."""
    os.makedirs(path, exist_ok=True)
    manifest = {
        "format_version": 1,
        "n": len(dataset),
        "image_shape": list(dataset.image_shape),
        "provenance": dataset.provenance,
        "seed": dataset.seed,
        "task_labels": dataset.task_labels.tolist(),
        "property_attrs": dataset.property_attrs.tolist(),
        "config": asdict(config) if config is not None else None,
    }
    with open(os.path.join(path, DATASET_MANIFEST), "w") as fh:
        json.dump(manifest, fh, sort_keys=True)
    dataset.images.astype("<f4").tofile(os.path.join(path, DATASET_IMAGES))


def load_dataset_dir(path: str) -> LabeledDataset:
    try:
        with open(os.path.join(path, DATASET_MANIFEST)) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError(f"no dataset manifest under {path!r}")
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt dataset manifest under {path!r}: {exc}")
    shape = tuple(manifest["image_shape"])
    n = manifest["n"]
    raw = np.fromfile(os.path.join(path, DATASET_IMAGES), dtype="<f4")
    expected = n * int(np.prod(shape))
    if raw.size != expected:
        raise DataError(
            f"image file holds {raw.size} floats, manifest expects {expected}")
    return LabeledDataset(raw.reshape((n, *shape)),
                          np.asarray(manifest["task_labels"], dtype=np.uint8),
                          np.asarray(manifest["property_attrs"], dtype=np.uint8),
                          provenance=manifest["provenance"],
                          seed=manifest["seed"])
