"""CSV ingestion, typing, splitting and one-hot encoding.

Missing values survive encoding on purpose: imputation is the first
searchable stage of the pipeline, so numeric cells stay NaN and missing
categorical cells stay NaN across their whole one-hot group. The group
metadata carries enough information (mode slot, missing slot) for the
pipeline to realize both categorical imputers downstream.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .util import rng_stream

DEFAULT_MISSING_TOKENS = ("", "?", "NA", "NaN")


@dataclass
class Column:
    name: str
    kind: str  # "numeric" | "categorical"
    values: list  # float-or-None for numeric, str-or-None for categorical


@dataclass
class RawTable:
    """A typed table plus its label column, prior to any encoding."""

    columns: list[Column]
    target_name: str
    target: list[str]

    @property
    def row_count(self) -> int:
        return len(self.target)

    def subset(self, indices: np.ndarray) -> "RawTable":
        cols = [Column(c.name, c.kind, [c.values[i] for i in indices]) for c in self.columns]
        return RawTable(cols, self.target_name, [self.target[i] for i in indices])


@dataclass(frozen=True)
class SplitSpec:
    train_frac: float = 0.6
    val_frac: float = 0.2
    test_frac: float = 0.2
    seed: int = 0

    def __post_init__(self):
        total = self.train_frac + self.val_frac + self.test_frac
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total}")
        if not all(0.0 < f < 1.0 for f in (self.train_frac, self.val_frac, self.test_frac)):
            raise ValueError("split fractions must lie in (0, 1)")


@dataclass(frozen=True)
class OneHotGroup:
    source: str
    start: int  # first encoded column index of the group
    categories: tuple[str, ...]  # train-time categories, sorted; MISSING slot appended last
    mode_slot: int  # offset within the group of the most frequent train category

    @property
    def width(self) -> int:
        return len(self.categories) + 1

    @property
    def missing_slot(self) -> int:
        return self.width - 1

    @property
    def stop(self) -> int:
        return self.start + self.width


@dataclass
class FeatureMatrix:
    """Numeric matrix after encoding. NaN marks missing exactly where
    missing_mask is true; for a missing categorical cell the whole group row
    is NaN."""

    data: np.ndarray  # (n, c) float64
    missing_mask: np.ndarray  # (n, c) bool
    labels: np.ndarray  # (n,) int in {0..K-1}
    numeric_cols: list[int]
    groups: list[OneHotGroup]
    column_names: list[str]
    n_classes: int

    @property
    def n_rows(self) -> int:
        return int(self.data.shape[0])

    @property
    def n_cols(self) -> int:
        return int(self.data.shape[1])

    def copy(self) -> "FeatureMatrix":
        return FeatureMatrix(
            self.data.copy(),
            self.missing_mask.copy(),
            self.labels.copy(),
            list(self.numeric_cols),
            list(self.groups),
            list(self.column_names),
            self.n_classes,
        )


@dataclass
class EncoderState:
    """Everything needed to encode new rows identically: per-column typing,
    category sets with their mode, and the label vocabulary."""

    entries: list[dict]  # {"name", "kind"} or {"name", "kind", "categories", "mode"}
    label_classes: list[str]

    def to_json(self) -> str:
        return json.dumps({"entries": self.entries, "label_classes": self.label_classes}, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "EncoderState":
        obj = json.loads(text)
        return cls(entries=obj["entries"], label_classes=obj["label_classes"])


def _parse_numeric(text: str) -> float | None:
    try:
        value = float(text)
    except ValueError:
        return None
    return value if math.isfinite(value) else None


def load_csv(
    path: str,
    target_column: str,
    type_overrides: dict[str, str] | None = None,
    missing_tokens: tuple[str, ...] = DEFAULT_MISSING_TOKENS,
) -> RawTable:
    """Load a headered CSV and type each column.

    A column is numeric when every non-missing cell parses to a finite
    number; otherwise categorical. `type_overrides` maps column name to
    "numeric" or "categorical" and wins over inference; non-parsing cells
    under a forced numeric type become missing.
    """
    overrides = type_overrides or {}
    missing = set(missing_tokens)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValueError(f"{path}: empty file") from None
        rows = [row for row in reader if row]
    if target_column not in header:
        raise ValueError(f"target column {target_column!r} not in header {header}")
    if not rows:
        raise ValueError(f"{path}: zero data rows")
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ValueError(f"{path}: row {i + 2} has {len(row)} cells, expected {len(header)}")

    target_idx = header.index(target_column)
    target = [row[target_idx].strip() for row in rows]
    if any(t in missing for t in target):
        raise ValueError(f"target column {target_column!r} contains missing values")

    columns: list[Column] = []
    for j, name in enumerate(header):
        if j == target_idx:
            continue
        cells = [row[j].strip() for row in rows]
        observed = [c for c in cells if c not in missing]
        kind = overrides.get(name)
        if kind is None:
            kind = "numeric" if observed and all(_parse_numeric(c) is not None for c in observed) else "categorical"
            if not observed:
                kind = "numeric"  # fully-missing column: numeric NaNs downstream
        if kind == "numeric":
            values = [None if c in missing else _parse_numeric(c) for c in cells]
        elif kind == "categorical":
            values = [None if c in missing else c for c in cells]
        else:
            raise ValueError(f"unknown type override {kind!r} for column {name!r}")
        columns.append(Column(name, kind, values))
    return RawTable(columns, target_column, target)


def split_indices(n: int, spec: SplitSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded shuffled partition: floor-sized val/test, remainder to train."""
    if n < 3:
        raise ValueError(f"need at least 3 rows to split, got {n}")
    n_val = int(math.floor(spec.val_frac * n))
    n_test = int(math.floor(spec.test_frac * n))
    n_train = n - n_val - n_test
    if min(n_train, n_val, n_test) < 1:
        raise ValueError(f"split of {n} rows leaves an empty partition")
    perm = rng_stream(spec.seed, "split").permutation(n)
    return perm[:n_train], perm[n_train : n_train + n_val], perm[n_train + n_val :]


def split(table: RawTable, spec: SplitSpec) -> tuple[RawTable, RawTable, RawTable]:
    tr, va, te = split_indices(table.row_count, spec)
    return table.subset(tr), table.subset(va), table.subset(te)


def fit_encoder(train: RawTable) -> EncoderState:
    entries: list[dict] = []
    for col in train.columns:
        if col.kind == "numeric":
            entries.append({"name": col.name, "kind": "numeric"})
            continue
        counts: dict[str, int] = {}
        for v in col.values:
            if v is not None:
                counts[v] = counts.get(v, 0) + 1
        if not counts:
            raise ValueError(f"categorical column {col.name!r} has no observed categories in train")
        categories = sorted(counts)
        mode = min((c for c in categories if counts[c] == max(counts.values()))) if counts else None
        entries.append({"name": col.name, "kind": "categorical", "categories": categories, "mode": mode})
    label_classes = sorted(set(train.target))
    return EncoderState(entries, label_classes)


def encode_with(state: EncoderState, table: RawTable) -> FeatureMatrix:
    """Encode one table with a fitted state. Unseen categories map to the
    MISSING slot (as observed values); truly missing categorical cells become
    NaN across their group."""
    by_name = {c.name: c for c in table.columns}
    n = table.row_count
    blocks: list[np.ndarray] = []
    masks: list[np.ndarray] = []
    numeric_cols: list[int] = []
    groups: list[OneHotGroup] = []
    names: list[str] = []
    offset = 0
    for entry in state.entries:
        col = by_name.get(entry["name"])
        if col is None:
            raise ValueError(f"column {entry['name']!r} missing from table")
        if entry["kind"] == "numeric":
            vals = np.array([np.nan if v is None else float(v) for v in col.values], dtype=np.float64)
            blocks.append(vals[:, None])
            masks.append(np.isnan(vals)[:, None])
            numeric_cols.append(offset)
            names.append(col.name)
            offset += 1
            continue
        categories = list(entry["categories"])
        slot = {c: i for i, c in enumerate(categories)}
        width = len(categories) + 1
        block = np.zeros((n, width), dtype=np.float64)
        mask = np.zeros((n, width), dtype=bool)
        for r, v in enumerate(col.values):
            if v is None:
                block[r, :] = np.nan
                mask[r, :] = True
            else:
                block[r, slot.get(v, width - 1)] = 1.0
        blocks.append(block)
        masks.append(mask)
        groups.append(
            OneHotGroup(
                source=col.name,
                start=offset,
                categories=tuple(categories),
                mode_slot=slot[entry["mode"]],
            )
        )
        names.extend(f"{col.name}={c}" for c in categories)
        names.append(f"{col.name}=<missing>")
        offset += width

    label_index = {c: i for i, c in enumerate(state.label_classes)}
    try:
        labels = np.array([label_index[t] for t in table.target], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"label {exc.args[0]!r} not seen during encoder fitting") from None

    data = np.concatenate(blocks, axis=1) if blocks else np.zeros((n, 0))
    mask = np.concatenate(masks, axis=1) if masks else np.zeros((n, 0), dtype=bool)
    return FeatureMatrix(data, mask, labels, numeric_cols, groups, names, len(state.label_classes))


def encode(
    train: RawTable, val: RawTable, test: RawTable
) -> tuple[FeatureMatrix, FeatureMatrix, FeatureMatrix, EncoderState]:
    state = fit_encoder(train)
    return encode_with(state, train), encode_with(state, val), encode_with(state, test), state
