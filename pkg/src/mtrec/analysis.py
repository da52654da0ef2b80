"""Contradictory user-preference analysis: Euclidean distances between user and
item embedding rows, rank-based selection of pairs that are far under one
task's geometry and close under another's, and shared-edge histograms."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Dataset
from .errors import ConfigError, DataError


@dataclass
class PairSet:
    """Unique (user row, item row) global index pairs plus how they were chosen."""

    pairs: np.ndarray  # (P, 2) int64
    provenance: dict

    def __len__(self) -> int:
        return self.pairs.shape[0]


def pair_distance(table: np.ndarray, user_row: int, item_row: int) -> float:
    """Euclidean distance between two rows of one embedding table."""
    n = table.shape[0]
    if not (0 <= user_row < n and 0 <= item_row < n):
        raise IndexError(f"rows ({user_row}, {item_row}) out of bounds for table with {n} rows")
    return float(np.linalg.norm(table[user_row] - table[item_row]))


def pair_distances(table: np.ndarray, pairs: np.ndarray) -> np.ndarray:
    """Vectorized pair_distance over a (P, 2) array of row pairs."""
    pairs = np.asarray(pairs)
    if pairs.size and pairs.max() >= table.shape[0]:
        raise IndexError(
            f"pair row {pairs.max()} out of bounds for table with {table.shape[0]} rows"
        )
    diff = table[pairs[:, 0]] - table[pairs[:, 1]]
    return np.linalg.norm(diff, axis=1)


def candidate_pairs(dataset: Dataset, user_field: int = 0, item_field: int = 1) -> np.ndarray:
    """Distinct (user, item) combinations occurring in the dataset, as global
    embedding-row pairs, deduplicated and sorted for determinism."""
    if not 0 <= user_field < dataset.num_fields or not 0 <= item_field < dataset.num_fields:
        raise ConfigError(
            f"user/item fields ({user_field}, {item_field}) outside the "
            f"{dataset.num_fields}-field schema"
        )
    gids = dataset.schema.global_ids(dataset.features)
    raw = np.stack([gids[:, user_field], gids[:, item_field]], axis=1)
    return np.unique(raw, axis=0)


def select_contradictory(
    pairs: np.ndarray,
    table_a: np.ndarray,
    table_b: np.ndarray,
    top_frac: float = 0.40,
    bottom_frac: float = 0.40,
) -> PairSet:
    """Pairs in the top ``top_frac`` of distances under table_a AND the bottom
    ``bottom_frac`` under table_b (rank-based, stable tie-break on pair index)."""
    for name, frac in (("top_frac", top_frac), ("bottom_frac", bottom_frac)):
        if not 0.0 < frac < 1.0:
            raise ConfigError(f"{name} must be in (0, 1), got {frac}")
    pairs = np.asarray(pairs)
    n = pairs.shape[0]
    if n == 0:
        raise DataError("select_contradictory: empty candidate set")
    d_a = pair_distances(table_a, pairs)
    d_b = pair_distances(table_b, pairs)
    k_top = int(top_frac * n)
    k_bot = int(bottom_frac * n)
    top_idx = np.argsort(-d_a, kind="stable")[:k_top]
    bot_idx = np.argsort(d_b, kind="stable")[:k_bot]
    sel = np.intersect1d(top_idx, bot_idx)
    return PairSet(
        pairs[sel],
        provenance={
            "top_frac": top_frac,
            "bottom_frac": bottom_frac,
            "num_candidates": int(n),
            "num_selected": int(sel.size),
            "selected_fraction": float(sel.size / n),
            "pair_universe": "distinct pairs",
        },
    )


@dataclass
class HistogramRow:
    bin_lo: float
    bin_hi: float
    count_selected: int
    count_all: int


def distance_histogram(
    selected: PairSet, candidates: np.ndarray, table: np.ndarray, n_bins: int
) -> list[HistogramRow]:
    """Equal-width histogram of pair distances; bin edges come from the whole
    candidate set so the selected overlay shares them."""
    if n_bins < 1:
        raise ConfigError(f"n_bins must be >= 1, got {n_bins}")
    d_all = pair_distances(table, candidates)
    count_all, edges = np.histogram(d_all, bins=n_bins)
    d_sel = pair_distances(table, selected.pairs)
    count_sel, _ = np.histogram(d_sel, bins=edges)
    return [
        HistogramRow(float(edges[i]), float(edges[i + 1]), int(count_sel[i]), int(count_all[i]))
        for i in range(n_bins)
    ]


def write_histogram_csv(
    rows: list[HistogramRow], table_name: str, path: str | Path
) -> None:
    """Plot-ready CSV: table_name,bin_lo,bin_hi,count_S,count_all."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("table_name,bin_lo,bin_hi,count_S,count_all\n")
        for r in rows:
            fh.write(
                f"{table_name},{r.bin_lo:.10g},{r.bin_hi:.10g},{r.count_selected},{r.count_all}\n"
            )
