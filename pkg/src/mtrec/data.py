"""Sample schema, CSV ingestion with frequency filtering, deterministic splits,
minibatching, and a synthetic generator with a controllable cross-task
preference-contradiction knob.

CSV contract: UTF-8, comma-separated, LF line endings, header
``f0,...,f{M-1},y0,...,y{T-1}``, integer feature ids and 0/1 labels.
Feature id 0 is reserved per field as the default/unknown slot; real features
start at 1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class FieldSchema:
    """Per-field vocabulary sizes; id 0 of every field is the default feature."""

    vocab_sizes: tuple[int, ...]

    def __post_init__(self):
        if any(v < 1 for v in self.vocab_sizes):
            raise ConfigError(f"vocabulary sizes must be >= 1, got {self.vocab_sizes}")

    @property
    def num_fields(self) -> int:
        return len(self.vocab_sizes)

    @property
    def total_features(self) -> int:
        return int(sum(self.vocab_sizes))

    @property
    def field_offsets(self) -> np.ndarray:
        """Start row of each field in the global (stacked) feature index."""
        return np.concatenate(([0], np.cumsum(self.vocab_sizes)[:-1])).astype(np.int64)

    def global_ids(self, features: np.ndarray) -> np.ndarray:
        """Map per-field ids (n, M) to rows of an N x K embedding table."""
        return features + self.field_offsets


@dataclass(frozen=True)
class Sample:
    """One interaction: M per-field feature ids plus T binary labels."""

    features: tuple[int, ...]
    labels: tuple[int, ...]


@dataclass
class Dataset:
    schema: FieldSchema
    features: np.ndarray  # (n, M) int64, per-field ids
    labels: np.ndarray  # (n, T) int64 in {0, 1}
    task_names: tuple[str, ...]

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 2:
            raise DataError("features and labels must be 2-D arrays")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError(
                f"{self.features.shape[0]} feature rows vs {self.labels.shape[0]} label rows"
            )
        if self.features.shape[1] != self.schema.num_fields:
            raise DataError(
                f"{self.features.shape[1]} feature columns vs schema with "
                f"{self.schema.num_fields} fields"
            )
        if len(self.task_names) != self.labels.shape[1]:
            raise DataError("task_names length must match label columns")
        if self.features.size:
            if self.features.min() < 0:
                raise DataError("negative feature id")
            too_big = self.features >= np.asarray(self.schema.vocab_sizes)
            if too_big.any():
                r, f = np.argwhere(too_big)[0]
                raise DataError(
                    f"feature id {self.features[r, f]} in field {f} exceeds vocabulary "
                    f"size {self.schema.vocab_sizes[f]} (sample {r})"
                )
        if self.labels.size and not np.isin(self.labels, (0, 1)).all():
            raise DataError("labels must be 0 or 1")

    def __len__(self) -> int:
        return self.features.shape[0]

    def __getitem__(self, i: int) -> Sample:
        return Sample(tuple(self.features[i]), tuple(self.labels[i]))

    @property
    def num_tasks(self) -> int:
        return self.labels.shape[1]

    @property
    def num_fields(self) -> int:
        return self.schema.num_fields

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.schema, self.features[indices], self.labels[indices], self.task_names)

    def with_schema(self, schema: FieldSchema) -> "Dataset":
        return Dataset(schema, self.features, self.labels, self.task_names)


# ------------------------------------------------------------------- CSV I/O

def _parse_header(header: str, path: str) -> tuple[int, int]:
    names = header.rstrip("\n").rstrip("\r").split(",")
    m = sum(1 for n in names if n.startswith("f"))
    t = len(names) - m
    expected = [f"f{i}" for i in range(m)] + [f"y{i}" for i in range(t)]
    if t < 1 or m < 1 or names != expected:
        raise DataError(f"{path}: header must be f0..f{{M-1}},y0..y{{T-1}}, got {names!r}")
    return m, t


def load_csv(path: str | Path, schema_hint: FieldSchema | None = None) -> Dataset:
    """Parse an interaction CSV; row numbers in errors are 1-based file lines.

    Vocabulary sizes are inferred as max id + 1 per field unless a schema hint
    is given.
    """
    path = Path(path)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        header = fh.readline()
        if not header:
            raise DataError(f"{path}: empty file")
        m, t = _parse_header(header, str(path))
        body = fh.read()

    lines = body.splitlines()
    n_cols = m + t
    rows = np.empty((len(lines), n_cols), dtype=np.int64)
    for i, line in enumerate(lines):
        cells = line.split(",")
        if len(cells) != n_cols:
            raise DataError(f"{path} row {i + 2}: expected {n_cols} columns, got {len(cells)}")
        try:
            rows[i] = [int(c) for c in cells]
        except ValueError:
            raise DataError(f"{path} row {i + 2}: non-integer cell in {line!r}") from None

    feats, labels = rows[:, :m], rows[:, m:]
    bad = ~np.isin(labels, (0, 1))
    if bad.any():
        r, c = np.argwhere(bad)[0]
        raise DataError(f"{path} row {r + 2}: label y{c} = {labels[r, c]} not in {{0, 1}}")
    if feats.size and feats.min() < 0:
        r, c = np.argwhere(feats < 0)[0]
        raise DataError(f"{path} row {r + 2}: negative feature id in f{c}")

    if schema_hint is not None:
        schema = schema_hint
    else:
        maxes = feats.max(axis=0) if len(lines) else np.zeros(m, dtype=np.int64)
        schema = FieldSchema(tuple(int(v) + 1 for v in maxes))
    return Dataset(schema, feats, labels, tuple(f"task{i}" for i in range(t)))


def write_csv(dataset: Dataset, path: str | Path) -> None:
    """Write the exact CSV format load_csv reads back."""
    m, t = dataset.num_fields, dataset.num_tasks
    header = ",".join([f"f{i}" for i in range(m)] + [f"y{i}" for i in range(t)])
    body = np.concatenate([dataset.features, dataset.labels], axis=1)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(header + "\n")
        np.savetxt(fh, body, fmt="%d", delimiter=",", newline="\n")


# ---------------------------------------------------------- frequency filter

@dataclass
class RemapTable:
    """Per-field mapping old id -> new id; ids absent or filtered map to 0."""

    maps: list[np.ndarray]  # maps[f][old_id] = new_id
    new_vocab_sizes: tuple[int, ...]

    def apply(self, dataset: Dataset) -> Dataset:
        cols = []
        for f in range(dataset.num_fields):
            ids = dataset.features[:, f]
            table = self.maps[f]
            # ids beyond the training vocabulary (unseen at fit time) -> default
            safe = np.where(ids < len(table), ids, 0)
            cols.append(table[safe])
        remapped = np.stack(cols, axis=1)
        return Dataset(
            FieldSchema(self.new_vocab_sizes), remapped, dataset.labels, dataset.task_names
        )

    def save_csv(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("field,old_id,new_id\n")
            for f, table in enumerate(self.maps):
                for old_id in range(1, len(table)):
                    fh.write(f"{f},{old_id},{table[old_id]}\n")

    @classmethod
    def load_csv(cls, path: str | Path) -> "RemapTable":
        raw = np.loadtxt(path, dtype=np.int64, delimiter=",", skiprows=1, ndmin=2)
        if raw.size == 0:
            raise DataError(f"{path}: empty remap table")
        num_fields = int(raw[:, 0].max()) + 1
        maps, sizes = [], []
        for f in range(num_fields):
            sel = raw[raw[:, 0] == f]
            old_vocab = int(sel[:, 1].max()) + 1 if sel.size else 1
            table = np.zeros(old_vocab, dtype=np.int64)
            table[sel[:, 1]] = sel[:, 2]
            maps.append(table)
            sizes.append(int(table.max()) + 1)
        return cls(maps, tuple(sizes))


def frequency_filter(train: Dataset, min_count: int) -> tuple[RemapTable, Dataset]:
    """Remap features occurring fewer than ``min_count`` times to the default id.

    Counting is per field.  Survivors are densely re-indexed from 1 in
    ascending old-id order; id 0 always stays the default.  The returned table
    is reusable for validation/test splits (unseen ids also map to 0).
    """
    if len(train) == 0:
        raise DataError("frequency_filter: empty dataset")
    if min_count < 1:
        raise ConfigError(f"min_count must be >= 1, got {min_count}")
    maps, sizes = [], []
    for f in range(train.num_fields):
        vocab = train.schema.vocab_sizes[f]
        counts = np.bincount(train.features[:, f], minlength=vocab)
        table = np.zeros(vocab, dtype=np.int64)
        survivors = np.flatnonzero(counts[1:] >= min_count) + 1
        table[survivors] = np.arange(1, len(survivors) + 1)
        maps.append(table)
        sizes.append(len(survivors) + 1)
    remap = RemapTable(maps, tuple(sizes))
    return remap, remap.apply(train)


# -------------------------------------------------------------------- splits

def split(
    dataset: Dataset, ratios: tuple[float, float, float], seed: int
) -> tuple[Dataset, Dataset, Dataset]:
    """Deterministic shuffled split; floor sizes for train/val, remainder to test."""
    if len(ratios) != 3 or any(r < 0 for r in ratios):
        raise ConfigError(f"need three non-negative ratios, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {sum(ratios)}")
    n = len(dataset)
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(math.floor(ratios[0] * n))
    n_val = int(math.floor(ratios[1] * n))
    return (
        dataset.subset(perm[:n_train]),
        dataset.subset(perm[n_train : n_train + n_val]),
        dataset.subset(perm[n_train + n_val :]),
    )


# -------------------------------------------------------------- minibatching

@dataclass(frozen=True)
class Batch:
    indices: np.ndarray
    features: np.ndarray
    labels: np.ndarray


def batch_iter(
    dataset: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0
) -> Iterator[Batch]:
    """Yield every sample exactly once; the last batch may be short."""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.random.default_rng(seed).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Batch(idx, dataset.features[idx], dataset.labels[idx])


# -------------------------------------------------------- synthetic generator

@dataclass
class SyntheticConfig:
    """Two-task latent-factor generator.

    ``correlation`` (rho) controls how task-B latents relate to task-A:
    u_B = rho * u_A + sqrt(1 - rho^2) * fresh noise, and likewise for items
    but with |rho|, so a negative rho flips the sign of user preference while
    item identity stays aligned.  The per-pair score correlation is then
    rho * |rho|: +1 makes the tasks identical, 0 independent, and negative
    values create contradictory user preferences over items while both sides
    keep task-private structure.
    """

    num_users: int
    num_items: int
    num_samples: int
    num_extra_fields: int = 0
    extra_field_vocab: int = 50
    latent_dim: int = 8
    correlation: float = -0.8
    task_bias: tuple[float, float] = (0.0, 0.0)
    target_positive_ratio: tuple[float, float] | None = None
    seed: int = 0

    def __post_init__(self):
        if not -1.0 <= self.correlation <= 1.0:
            raise ConfigError(f"correlation must be in [-1, 1], got {self.correlation}")
        for name in ("num_users", "num_items", "num_samples", "latent_dim"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.num_extra_fields < 0:
            raise ConfigError("num_extra_fields must be >= 0")
        if self.num_extra_fields and self.extra_field_vocab < 2:
            raise ConfigError("extra_field_vocab must be >= 2 when extra fields exist")
        if self.target_positive_ratio is not None:
            for r in self.target_positive_ratio:
                if not 0.0 < r < 1.0:
                    raise ConfigError(f"target positive ratios must be in (0, 1), got {r}")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _calibrate_bias(scores: np.ndarray, target: float) -> float:
    """Bisect b so that mean(sigmoid(scores + b)) == target."""
    lo, hi = -40.0, 40.0
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        if float(np.mean(_sigmoid(scores + mid))) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _latents(cfg: SyntheticConfig, rng: np.random.Generator):
    """Task-A then rho-mixed task-B user/item latent matrices."""
    rho = cfg.correlation
    mix = math.sqrt(max(0.0, 1.0 - rho * rho))
    u_a = rng.standard_normal((cfg.num_users, cfg.latent_dim))
    i_a = rng.standard_normal((cfg.num_items, cfg.latent_dim))
    u_b = rho * u_a + mix * rng.standard_normal((cfg.num_users, cfg.latent_dim))
    i_b = abs(rho) * i_a + mix * rng.standard_normal((cfg.num_items, cfg.latent_dim))
    return u_a, i_a, u_b, i_b


def generate_synthetic_with_info(cfg: SyntheticConfig) -> tuple[Dataset, dict]:
    """Generate a dataset plus a manifest-ready summary of what was drawn.

    Draw order (fixed for reproducibility): task-A user latents, task-A item
    latents, task-B user noise, task-B item noise, sampled user column, item
    column, extra fields left to right, then one label column per task.
    """
    rng = np.random.default_rng(cfg.seed)
    u_a, i_a, u_b, i_b = _latents(cfg, rng)

    n = cfg.num_samples
    user_idx = rng.integers(0, cfg.num_users, n)
    item_idx = rng.integers(0, cfg.num_items, n)
    extras = [
        rng.integers(1, cfg.extra_field_vocab, n) for _ in range(cfg.num_extra_fields)
    ]

    z_a = (u_a[user_idx] * i_a[item_idx]).sum(axis=1)
    z_b = (u_b[user_idx] * i_b[item_idx]).sum(axis=1)

    if cfg.target_positive_ratio is not None:
        biases = (
            _calibrate_bias(z_a, cfg.target_positive_ratio[0]),
            _calibrate_bias(z_b, cfg.target_positive_ratio[1]),
        )
    else:
        biases = cfg.task_bias
    p_a = _sigmoid(z_a + biases[0])
    p_b = _sigmoid(z_b + biases[1])
    y_a = (rng.random(n) < p_a).astype(np.int64)
    y_b = (rng.random(n) < p_b).astype(np.int64)

    feats = np.stack([user_idx + 1, item_idx + 1] + extras, axis=1)
    vocab = (cfg.num_users + 1, cfg.num_items + 1) + (cfg.extra_field_vocab,) * cfg.num_extra_fields
    dataset = Dataset(
        FieldSchema(vocab), feats, np.stack([y_a, y_b], axis=1), ("task0", "task1")
    )
    info = {
        "seed": cfg.seed,
        "correlation": cfg.correlation,
        "task_bias": [float(b) for b in biases],
        "positive_ratio_expected": [float(p_a.mean()), float(p_b.mean())],
        "positive_ratio_realized": [float(y_a.mean()), float(y_b.mean())],
        "label_probability_correlation": float(np.corrcoef(p_a, p_b)[0, 1]),
        "num_samples": n,
    }
    return dataset, info


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    return generate_synthetic_with_info(cfg)[0]


def pair_probabilities(cfg: SyntheticConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample true positive probabilities for both tasks (same draws as
    generate_synthetic)."""
    rng = np.random.default_rng(cfg.seed)
    u_a, i_a, u_b, i_b = _latents(cfg, rng)
    n = cfg.num_samples
    user_idx = rng.integers(0, cfg.num_users, n)
    item_idx = rng.integers(0, cfg.num_items, n)
    for _ in range(cfg.num_extra_fields):
        rng.integers(1, cfg.extra_field_vocab, n)
    z_a = (u_a[user_idx] * i_a[item_idx]).sum(axis=1)
    z_b = (u_b[user_idx] * i_b[item_idx]).sum(axis=1)
    if cfg.target_positive_ratio is not None:
        biases = (
            _calibrate_bias(z_a, cfg.target_positive_ratio[0]),
            _calibrate_bias(z_b, cfg.target_positive_ratio[1]),
        )
    else:
        biases = cfg.task_bias
    return _sigmoid(z_a + biases[0]), _sigmoid(z_b + biases[1])
