"""Feature-wise transformation operators: catalog, fitting, transforms and
black-box numerical derivatives.

All operators are deterministic scalar maps once fitted; fitting reduces a
column (or each column of a matrix) to a handful of statistics. Transforms
never produce non-finite output for finite input: degenerate statistics fall
back to safe values (std/range/max-abs/MAD/IQR of 0 are replaced by 1).
Outlier repair is realized as winsorizing (clipping into the detection
bounds) and discretizers emit the ordinal bin index.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

TF_TYPES = ("impute", "normalize", "outlier", "discretize")

_IMPUTE_NAMES = ("mean", "median", "mode")
_NORMALIZE_NAMES = ("standard", "minmax", "robust", "maxabs")


@dataclass(frozen=True)
class OperatorSpec:
    tf_type: str
    name: str
    param: float | None = None

    def __post_init__(self):
        if self.name in ("zscore", "mad", "iqr"):
            if self.param is None or self.param <= 0:
                raise ValueError(f"{self.name} requires k > 0, got {self.param}")
        if self.name in ("uniform", "quantile"):
            if self.param is None or int(self.param) < 2:
                raise ValueError(f"{self.name} requires n >= 2 bins, got {self.param}")

    @property
    def is_identity(self) -> bool:
        return self.name == "identity"

    @property
    def label(self) -> str:
        if self.param is None:
            return self.name
        p = int(self.param) if float(self.param).is_integer() else self.param
        return f"{self.name}({p})"


@dataclass(frozen=True)
class CatalogConfig:
    impute_ops: tuple[str, ...] = _IMPUTE_NAMES
    normalize_ops: tuple[str, ...] = _NORMALIZE_NAMES
    zscore_ks: tuple[float, ...] = (2.0, 3.0, 4.0)
    mad_ks: tuple[float, ...] = (2.0, 3.0, 4.0)
    iqr_ks: tuple[float, ...] = (1.5, 2.0)
    bins: tuple[int, ...] = (5, 10)

    @classmethod
    def from_dict(cls, obj: dict) -> "CatalogConfig":
        kwargs = {}
        for key in (
            "impute_ops",
            "normalize_ops",
            "zscore_ks",
            "mad_ks",
            "iqr_ks",
            "bins",
        ):
            if key in obj:
                kwargs[key] = tuple(obj[key])
        return cls(**kwargs)

    @classmethod
    def from_json_file(cls, path: str) -> "CatalogConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Catalog:
    """Operator lists per TF type. Every type except imputation carries
    exactly one identity operator; ragged lists are padded at the softmax
    level, not here."""

    ops: dict[str, tuple[OperatorSpec, ...]]
    types: tuple[str, ...] = TF_TYPES

    @property
    def max_ops(self) -> int:
        return max(len(v) for v in self.ops.values())

    def __getitem__(self, tf_type: str) -> tuple[OperatorSpec, ...]:
        return self.ops[tf_type]


def build_catalog(config: CatalogConfig | None = None) -> Catalog:
    cfg = config or CatalogConfig()
    impute = tuple(OperatorSpec("impute", name) for name in cfg.impute_ops)
    normalize = (OperatorSpec("normalize", "identity"),) + tuple(
        OperatorSpec("normalize", name) for name in cfg.normalize_ops
    )
    outlier = (OperatorSpec("outlier", "identity"),)
    outlier += tuple(OperatorSpec("outlier", "zscore", k) for k in cfg.zscore_ks)
    outlier += tuple(OperatorSpec("outlier", "mad", k) for k in cfg.mad_ks)
    outlier += tuple(OperatorSpec("outlier", "iqr", k) for k in cfg.iqr_ks)
    discretize = (OperatorSpec("discretize", "identity"),)
    for n in cfg.bins:
        discretize += (OperatorSpec("discretize", "uniform", float(n)),)
    for n in cfg.bins:
        discretize += (OperatorSpec("discretize", "quantile", float(n)),)
    ops = {"impute": impute, "normalize": normalize, "outlier": outlier, "discretize": discretize}
    for tf_type, lst in ops.items():
        if not lst:
            raise ValueError(f"TF type {tf_type!r} has no operators")
    return Catalog(ops)


# ---------------------------------------------------------------------------
# Fitting
# ---------------------------------------------------------------------------


def _quantile_sorted(sorted_vals: np.ndarray, counts: np.ndarray, q) -> np.ndarray:
    """Linear-interpolation quantile from pre-sorted columns; `counts` is the
    number of valid (leading) entries per column. `q` may be a scalar or a
    vector of levels (result gains a leading axis)."""
    q = np.asarray(q, dtype=np.float64)
    idx = (counts - 1) * (q[..., None] if q.ndim else q)
    lo = np.floor(idx).astype(np.intp)
    hi = np.ceil(idx).astype(np.intp)
    frac = idx - lo
    cols = np.arange(sorted_vals.shape[1])
    return sorted_vals[lo, cols] * (1.0 - frac) + sorted_vals[hi, cols] * frac


def _mode_sorted(sorted_vals: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Most frequent value per column from an ascending scan; the first
    maximal run wins, so ties resolve to the smallest value."""
    out = np.empty(sorted_vals.shape[1], dtype=np.float64)
    for j in range(sorted_vals.shape[1]):
        col = sorted_vals[: counts[j], j]
        if col.shape[0] == 1:
            out[j] = col[0]
            continue
        bounds = np.flatnonzero(col[1:] != col[:-1]) + 1
        starts = np.concatenate(([0], bounds))
        lengths = np.diff(np.concatenate((starts, [col.shape[0]])))
        out[j] = col[starts[np.argmax(lengths)]]
    return out


def _nonzero(x: np.ndarray) -> np.ndarray:
    # degenerate spread fallback; the cutoff also catches subnormal-tiny
    # spreads whose reciprocal would overflow to infinity
    return np.where(x < 1e-300, 1.0, x)


class _FitContext:
    """Shared per-batch statistics so fitting many operators sorts each
    column only once."""

    def __init__(self, values: np.ndarray, allow_missing: bool):
        v = np.asarray(values, dtype=np.float64)
        self.was_1d = v.ndim == 1
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError(f"expected a column or matrix of values, got shape {v.shape}")
        if v.shape[0] == 0:
            raise ValueError("cannot fit an operator on empty input")
        nan = np.isnan(v)
        if nan.any() and not allow_missing:
            raise ValueError("missing values reach only imputation operators")
        if np.isinf(v).any():
            raise ValueError("cannot fit on non-finite (infinite) values")
        self.values = v
        self.counts = v.shape[0] - nan.sum(axis=0)
        if (self.counts == 0).any():
            raise ValueError("cannot fit an operator on a fully-missing column")
        self.sorted = np.sort(v, axis=0)  # NaN sort to the end
        self.has_missing = bool(nan.any())
        self._quantiles: dict[float, np.ndarray] = {}
        self._cache: dict[str, np.ndarray] = {}

    def finish(self, stat: np.ndarray) -> np.ndarray:
        stat = np.asarray(stat, dtype=np.float64)
        return stat.reshape(()) if self.was_1d and stat.ndim == 1 and stat.shape[0] == 1 else stat

    def mean(self) -> np.ndarray:
        if "mean" not in self._cache:
            self._cache["mean"] = (
                np.nanmean(self.values, axis=0) if self.has_missing else self.values.mean(axis=0)
            )
        return self._cache["mean"]

    def std(self) -> np.ndarray:
        # population standard deviation
        if "std" not in self._cache:
            self._cache["std"] = (
                np.nanstd(self.values, axis=0) if self.has_missing else self.values.std(axis=0)
            )
        return self._cache["std"]

    def mad(self) -> np.ndarray:
        if "mad" not in self._cache:
            dev = np.sort(np.abs(self.values - self.quantile(0.5)), axis=0)
            self._cache["mad"] = _quantile_sorted(dev, self.counts, 0.5)
        return self._cache["mad"]

    def quantile(self, q: float) -> np.ndarray:
        if q not in self._quantiles:
            self._quantiles[q] = _quantile_sorted(self.sorted, self.counts, q)
        return self._quantiles[q]

    def minimum(self) -> np.ndarray:
        return self.sorted[0]

    def maximum(self) -> np.ndarray:
        cols = np.arange(self.sorted.shape[1])
        return self.sorted[self.counts - 1, cols]


@dataclass
class FittedOperator:
    spec: OperatorSpec
    stats: dict[str, np.ndarray]
    fit_count: int

    def transform(self, x):
        """Validated deterministic map; missing input is only legal for
        imputation operators."""
        arr = np.asarray(x, dtype=np.float64)
        if self.spec.tf_type != "impute" and np.isnan(arr).any():
            raise ValueError(f"missing value passed to non-imputer {self.spec.label}")
        out = self.apply(arr)
        if arr.ndim == 0:
            out = np.asarray(out)
            if out.size != 1:
                raise ValueError("scalar input to an operator fitted on several columns")
            return float(out.reshape(()))
        return out

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Unvalidated kernel used by the pipeline hot path."""
        name = self.spec.name
        s = self.stats
        if name == "identity":
            return np.asarray(x, dtype=np.float64)
        if name in _IMPUTE_NAMES:
            return np.where(np.isnan(x), s["fill"], x)
        if name == "standard":
            return (x - s["mean"]) / s["scale"]
        if name == "minmax":
            return (x - s["low"]) / s["scale"]
        if name == "robust":
            return (x - s["center"]) / s["scale"]
        if name == "maxabs":
            return x / s["scale"]
        if name in ("zscore", "mad", "iqr"):
            return np.minimum(np.maximum(x, s["low"]), s["high"])
        if name in ("uniform", "quantile"):
            edges = s["edges"]
            if edges.shape[0] == 0:
                return np.zeros_like(x)
            if edges.ndim == 1:
                return (np.asarray(x)[..., None] >= edges).sum(axis=-1).astype(np.float64)
            # per-column edges (E, c) against x (n, c)
            return (np.asarray(x)[..., None] >= np.moveaxis(edges, 0, -1)).sum(axis=-1).astype(np.float64)
        raise ValueError(f"unknown operator {name!r}")


def fit(spec: OperatorSpec, values) -> FittedOperator:
    ctx = _FitContext(values, allow_missing=spec.tf_type == "impute")
    return _fit_in_context(spec, ctx)


def fit_many(specs: list[OperatorSpec], values, allow_missing: bool = False) -> list[FittedOperator]:
    """Fit several operators on one batch, sharing the sorted columns."""
    ctx = _FitContext(values, allow_missing=allow_missing)
    return [_fit_in_context(spec, ctx) for spec in specs]


def _fit_in_context(spec: OperatorSpec, ctx: _FitContext) -> FittedOperator:
    name = spec.name
    fin = ctx.finish
    count = int(ctx.counts.min()) if ctx.counts.size else 0
    if name == "identity":
        stats = {}
    elif name == "mean":
        stats = {"fill": fin(ctx.mean())}
    elif name == "median":
        stats = {"fill": fin(ctx.quantile(0.5))}
    elif name == "mode":
        stats = {"fill": fin(_mode_sorted(ctx.sorted, ctx.counts))}
    elif name == "standard":
        stats = {"mean": fin(ctx.mean()), "scale": fin(_nonzero(ctx.std()))}
    elif name == "minmax":
        lo, hi = ctx.minimum(), ctx.maximum()
        stats = {"low": fin(lo), "scale": fin(_nonzero(hi - lo))}
    elif name == "robust":
        q1, q3 = ctx.quantile(0.25), ctx.quantile(0.75)
        stats = {"center": fin(ctx.quantile(0.5)), "scale": fin(_nonzero(q3 - q1))}
    elif name == "maxabs":
        scale = np.maximum(np.abs(ctx.minimum()), np.abs(ctx.maximum()))
        stats = {"scale": fin(_nonzero(scale))}
    elif name == "zscore":
        mean, std = ctx.mean(), _nonzero(ctx.std())
        k = spec.param
        stats = {"low": fin(mean - k * std), "high": fin(mean + k * std)}
    elif name == "mad":
        med = ctx.quantile(0.5)
        mad = _nonzero(ctx.mad())
        k = spec.param
        stats = {"low": fin(med - k * mad), "high": fin(med + k * mad)}
    elif name == "iqr":
        q1, q3 = ctx.quantile(0.25), ctx.quantile(0.75)
        iqr = _nonzero(q3 - q1)
        k = spec.param
        stats = {"low": fin(q1 - k * iqr), "high": fin(q3 + k * iqr)}
    elif name == "uniform":
        n = int(spec.param)
        lo, hi = ctx.minimum(), ctx.maximum()
        grid = np.linspace(0.0, 1.0, n + 1)[1:-1]
        edges = lo[None, :] + grid[:, None] * (hi - lo)[None, :]
        stats = {"edges": edges[:, 0] if ctx.was_1d else edges}
    elif name == "quantile":
        n = int(spec.param)
        edges = _quantile_sorted(ctx.sorted, ctx.counts, np.arange(1, n) / n)
        stats = {"edges": edges[:, 0] if ctx.was_1d else edges}
    else:
        raise ValueError(f"unknown operator {name!r}")
    return FittedOperator(spec, stats, count)


class StageBank:
    """Vectorized evaluation of all fitted operators of one stage.

    Groups operators by kernel family (identity, fill, shift-scale, clip,
    bin) so one numpy expression serves the whole family. Each family kernel
    is elementwise-identical to FittedOperator.apply, so mixing bank outputs
    reproduces per-operator transforms bitwise.
    """

    def __init__(self, fitted: list[FittedOperator]):
        self.fitted = fitted
        self.n_ops = len(fitted)
        self.identity_idx: list[int] = []
        fill_idx, fills = [], []
        affine_idx, shifts, scales = [], [], []
        clip_idx, lows, highs = [], [], []
        self.bin_idx: list[int] = []
        self.bin_edges: list[np.ndarray] = []
        for j, op in enumerate(fitted):
            name = op.spec.name
            s = op.stats
            if name == "identity":
                self.identity_idx.append(j)
            elif name in _IMPUTE_NAMES:
                fill_idx.append(j)
                fills.append(s["fill"])
            elif name in ("standard", "minmax", "robust"):
                key = {"standard": "mean", "minmax": "low", "robust": "center"}[name]
                affine_idx.append(j)
                shifts.append(s[key])
                scales.append(s["scale"])
            elif name == "maxabs":
                affine_idx.append(j)
                shifts.append(np.zeros_like(np.asarray(s["scale"], dtype=np.float64)))
                scales.append(s["scale"])
            elif name in ("zscore", "mad", "iqr"):
                clip_idx.append(j)
                lows.append(s["low"])
                highs.append(s["high"])
            elif name in ("uniform", "quantile"):
                self.bin_idx.append(j)
                self.bin_edges.append(s["edges"])
            else:
                raise ValueError(f"unknown operator {name!r}")
        def contiguous(idx: list[int]) -> slice | list[int]:
            if idx and idx == list(range(idx[0], idx[0] + len(idx))):
                return slice(idx[0], idx[0] + len(idx))
            return idx

        self.fill_idx = contiguous(fill_idx)
        self.has_fills = bool(fill_idx)
        self.fills = np.stack(fills)[:, None, :] if fills else None
        self.affine_idx = contiguous(affine_idx)
        self.has_affine = bool(affine_idx)
        self.shifts = np.stack(shifts)[:, None, :] if affine_idx else None
        self.scales = np.stack(scales)[:, None, :] if affine_idx else None
        self.clip_idx = contiguous(clip_idx)
        self.has_clip = bool(clip_idx)
        self.lows = np.stack(lows)[:, None, :] if clip_idx else None
        self.highs = np.stack(highs)[:, None, :] if clip_idx else None

    def apply_all(self, x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """(n_ops, n, F) operator outputs for a (n, F) input, written into a
        caller-provided buffer when given (kernels avoid temporaries)."""
        if out is None:
            out = np.empty((self.n_ops,) + x.shape, dtype=np.float64)
        for j in self.identity_idx:
            out[j] = x
        if self.has_fills:
            view = out[self.fill_idx]
            np.copyto(view, x[None])
            np.copyto(view, self.fills, where=np.isnan(x)[None])
            if not isinstance(self.fill_idx, slice):
                out[self.fill_idx] = view
        if self.has_affine:
            view = out[self.affine_idx] if isinstance(self.affine_idx, slice) else None
            if view is not None:
                np.subtract(x[None], self.shifts, out=view)
                np.divide(view, self.scales, out=view)
            else:
                out[self.affine_idx] = (x[None] - self.shifts) / self.scales
        if self.has_clip:
            if isinstance(self.clip_idx, slice):
                view = out[self.clip_idx]
                np.maximum(x[None], self.lows, out=view)
                np.minimum(view, self.highs, out=view)
            else:
                out[self.clip_idx] = np.minimum(np.maximum(x[None], self.lows), self.highs)
        for j, edges in zip(self.bin_idx, self.bin_edges):
            if edges.shape[0] == 0:
                out[j] = 0.0
            else:
                np.sum(x[None] >= edges[:, None, :], axis=0, dtype=np.float64, out=out[j])
        return out

    def apply_with_probes(self, x: np.ndarray, h: np.ndarray):
        """Outputs plus centered-difference slopes in one pass; identity rows
        (exact slope 1) skip the probes."""
        n, f = x.shape
        stacked = np.empty((3, n, f), dtype=np.float64)
        stacked[0] = x
        np.add(x, h, out=stacked[1])
        np.subtract(x, h, out=stacked[2])
        big = self.apply_all(stacked.reshape(3 * n, f)).reshape(self.n_ops, 3, n, f)
        # contiguous copies: the tape outlives the probe buffer and feeds
        # backward-pass reductions, which are much faster on dense arrays
        outs = np.ascontiguousarray(big[:, 0])
        slopes = np.subtract(big[:, 1], big[:, 2])
        slopes /= 2.0 * h
        for j in self.identity_idx:
            outs[j] = x
            slopes[j] = 1.0
        return outs, slopes


# ---------------------------------------------------------------------------
# Numerical differentiation (operators stay black boxes)
# ---------------------------------------------------------------------------


def default_step(x: np.ndarray) -> np.ndarray:
    """Relative probe step: 1e-3 * max(1, |x|); missing inputs get step 1 so
    the centered difference of an imputer's constant fill is exactly 0."""
    arr = np.asarray(x, dtype=np.float64)
    step = 1e-3 * np.maximum(1.0, np.abs(arr))
    return np.where(np.isnan(arr), 1.0, step)


def num_derivative(fitted: FittedOperator, x, eps: float) -> float | np.ndarray:
    """Centered difference (f(x+eps) - f(x-eps)) / (2 eps) with frozen stats."""
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    arr = np.asarray(x, dtype=np.float64)
    out = (fitted.apply(arr + eps) - fitted.apply(arr - eps)) / (2.0 * eps)
    return float(out) if arr.ndim == 0 else out
