"""Synthetic classification tables with known ground truth, plus controlled
corruption: completely-at-random masking and additive outlier spikes.

Classes are unit-spread Gaussian blobs with a deterministic geometry: the
class-mean separation is spread evenly over all features (alternating sign),
so every feature carries the same signal and the seed only drives sampling
noise and corruption masks. Feature scales are then multiplied by the
requested per-feature factors, and corruption is applied on top.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .data import Column, FeatureMatrix, RawTable
from .util import rng_stream


@dataclass(frozen=True)
class SynthSpec:
    n_rows: int = 2000
    n_features: int = 10
    n_classes: int = 2
    class_sep: float = 2.0
    scale_multipliers: tuple[float, ...] = ()  # per-feature; 1.0 when unspecified
    missing_rate: float = 0.0
    outlier_rate: float | tuple[float, ...] = 0.0  # scalar or per-feature
    outlier_magnitude: float = 8.0
    seed: int = 0

    def __post_init__(self):
        rates = self.outlier_rate if isinstance(self.outlier_rate, tuple) else (self.outlier_rate,)
        if not (0.0 <= self.missing_rate < 1.0 and all(0.0 <= r < 1.0 for r in rates)):
            raise ValueError("corruption rates must lie in [0, 1)")
        if self.n_rows < 10 * self.n_features:
            raise ValueError("need at least 10 rows per feature")

    def outlier_rates(self) -> np.ndarray:
        if isinstance(self.outlier_rate, tuple):
            out = np.zeros(self.n_features)
            out[: len(self.outlier_rate)] = self.outlier_rate[: self.n_features]
            return out
        return np.full(self.n_features, self.outlier_rate)


def generate(spec: SynthSpec) -> tuple[RawTable, FeatureMatrix]:
    """Returns the corrupted table and the clean (pre-corruption) matrix."""
    rng = rng_stream(spec.seed, "synth")
    n, d, k = spec.n_rows, spec.n_features, spec.n_classes

    # class means on a fixed alternating-sign direction, spaced class_sep
    # apart along it; unit spread per feature
    direction = np.array([(-1.0) ** j for j in range(d)]) / np.sqrt(d)
    offsets = np.arange(k, dtype=np.float64) - (k - 1) / 2.0
    means = offsets[:, None] * spec.class_sep * direction[None, :]

    labels = rng.integers(0, k, size=n)
    clean = means[labels] + rng.standard_normal((n, d))

    scales = np.ones(d)
    for i, s in enumerate(spec.scale_multipliers[:d]):
        scales[i] = s
    clean = clean * scales

    corrupted = clean.copy()
    rates = spec.outlier_rates()
    if rates.any():
        hit = rng.random((n, d)) < rates[None, :]
        col_std = clean.std(axis=0)
        signs = np.where(rng.random((n, d)) < 0.5, -1.0, 1.0)
        corrupted = np.where(hit, corrupted + spec.outlier_magnitude * col_std * signs, corrupted)
    if spec.missing_rate > 0:
        mask = rng.random((n, d)) < spec.missing_rate
        corrupted = np.where(mask, np.nan, corrupted)

    columns = [
        Column(f"f{j}", "numeric", [None if np.isnan(v) else float(v) for v in corrupted[:, j]])
        for j in range(d)
    ]
    table = RawTable(columns, "label", [str(int(y)) for y in labels])
    clean_fm = FeatureMatrix(
        data=clean,
        missing_mask=np.zeros_like(clean, dtype=bool),
        labels=labels.astype(np.int64),
        numeric_cols=list(range(d)),
        groups=[],
        column_names=[f"f{j}" for j in range(d)],
        n_classes=k,
    )
    return table, clean_fm


def imputation_rmse(imputed: np.ndarray, clean: np.ndarray, mask: np.ndarray) -> float:
    """Root mean squared error over the masked cells only."""
    if imputed.shape != clean.shape or mask.shape != clean.shape:
        raise ValueError("imputed, clean and mask shapes must agree")
    if not mask.any():
        raise ValueError("mask selects no cells")
    diff = imputed[mask] - clean[mask]
    return float(np.sqrt((diff**2).mean()))


def write_csv(table: RawTable, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([c.name for c in table.columns] + [table.target_name])
        for r in range(table.row_count):
            row = ["" if c.values[r] is None else repr(c.values[r]) for c in table.columns]
            writer.writerow(row + [table.target[r]])
