"""Differentiable forward/backward passes through per-feature preprocessing
pipelines.

The forward pass mixes candidate operator outputs with selection weights
(and, in flexible-order mode, order weights), recording for every stage the
raw operator outputs, centered-difference slopes and weight snapshots. The
backward pass replays that tape: selection-weight gradients are inner
products of upstream gradients with recorded operator outputs, while input
gradients flow through the recorded slope mixtures. No gradient flows
through fitted statistics; operators are refit from scratch every iteration.

Imputation is always the first stage. Numeric features mix the numeric
imputers; each one-hot group mixes its two categorical encodings of missing
rows (most-frequent slot vs MISSING slot). After stage one, one-hot columns
default to pass-through and can optionally join the searched column set.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import FeatureMatrix, OneHotGroup
from .operators import Catalog, FittedOperator, OperatorSpec, StageBank, default_step, fit_many


@dataclass(frozen=True)
class PipelinePlan:
    """Static structure of the search space: stage composition and masks."""

    mode: str  # "fix" | "flex"
    catalog: Catalog
    order: tuple[str, ...]  # fix: prototype (imputation first); flex: type axis order
    search_onehot: bool = False

    def __post_init__(self):
        if self.mode not in ("fix", "flex"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.order[0] != "impute":
            raise ValueError("imputation must be the first TF type")
        if len(set(self.order)) != len(self.order):
            raise ValueError("prototype cannot repeat a TF type")

    @property
    def later_types(self) -> tuple[str, ...]:
        return self.order[1:]

    @property
    def n_positions(self) -> int:
        """Stages after imputation."""
        return len(self.order) - 1

    @property
    def max_ops(self) -> int:
        return max(len(self.catalog[t]) for t in self.later_types) if self.later_types else 1

    def stage_mask(self) -> np.ndarray:
        """(positions-or-types, max_ops) validity mask for selection logits."""
        mask = np.zeros((self.n_positions, self.max_ops), dtype=bool)
        for i, t in enumerate(self.later_types):
            mask[i, : len(self.catalog[t])] = True
        return mask

    @property
    def impute_specs(self) -> tuple[OperatorSpec, ...]:
        return self.catalog["impute"]


def make_plan(
    catalog: Catalog,
    mode: str,
    order: tuple[str, ...] | None = None,
    search_onehot: bool = False,
) -> PipelinePlan:
    if mode == "flex" or order is None:
        order = catalog.types
    if set(order) != set(catalog.types):
        raise ValueError(f"prototype {order} must use exactly the catalog types {catalog.types}")
    return PipelinePlan(mode, catalog, tuple(order), search_onehot)


@dataclass
class PipelineContext:
    """A plan bound to one encoded table layout."""

    plan: PipelinePlan
    n_cols: int
    numeric_cols: list[int]
    groups: list[OneHotGroup]

    @classmethod
    def for_matrix(cls, plan: PipelinePlan, fm: FeatureMatrix) -> "PipelineContext":
        return cls(plan, fm.n_cols, list(fm.numeric_cols), list(fm.groups))

    @property
    def extra_cols(self) -> list[int]:
        if not self.plan.search_onehot:
            return []
        return [c for g in self.groups for c in range(g.start, g.stop)]

    @property
    def searched_cols(self) -> list[int]:
        return self.numeric_cols + self.extra_cols

    @property
    def n_numeric(self) -> int:
        return len(self.numeric_cols)

    @property
    def n_searched(self) -> int:
        return len(self.searched_cols)


@dataclass
class MixWeights:
    """Derived mixture weights for one iteration (constants to the tape)."""

    impute: np.ndarray  # (Fn, n_imputers), rows on the simplex
    stage: np.ndarray  # (Fs, S, m) fix: per position; flex: per type
    group: np.ndarray  # (G, 2) most-frequent vs MISSING encodings
    order: np.ndarray | None = None  # (Fs, S, S) flex: doubly stochastic block

    def copy(self) -> "MixWeights":
        return MixWeights(
            self.impute.copy(),
            self.stage.copy(),
            self.group.copy(),
            None if self.order is None else self.order.copy(),
        )


@dataclass
class FittedStage:
    """One stage's fitted operators plus their vectorized evaluation bank."""

    ops: list[FittedOperator]
    bank: StageBank

    @classmethod
    def fit(cls, specs, x: np.ndarray) -> "FittedStage":
        ops = fit_many(list(specs), x)
        return cls(ops, StageBank(ops))

    def __len__(self) -> int:
        return len(self.ops)

    def __iter__(self):
        return iter(self.ops)

    def __getitem__(self, j):
        return self.ops[j]


@dataclass
class FittedPipeline:
    """Operators fitted stage by stage on the mixture outputs of the fitting
    batch. fix: stages[p] is a FittedStage; flex: stages[p][t] is the
    FittedStage of type t at position p."""

    ctx: PipelineContext
    imputers: list[FittedOperator]
    stages: list

    @property
    def mode(self) -> str:
        return self.ctx.plan.mode


@dataclass
class PipelineTape:
    """Recorded intermediates of one forward pass, sufficient for backward."""

    ctx: PipelineContext
    n_rows: int
    x0_numeric: np.ndarray  # (n, Fn) snapshot, NaN at missing
    impute_outputs: np.ndarray  # (J, n, Fn)
    impute_slope_mix: np.ndarray  # (n, Fn) weighted slope of the imputer mixture
    group_missing: list[np.ndarray]  # per group, (n,) bool
    weights: MixWeights  # snapshots
    stage_inputs: list[np.ndarray]  # per position, (n, Fs)
    stage_outputs: list[np.ndarray]  # per position, (n, Fs)
    op_outputs: list[np.ndarray]  # fix: (m_p, n, Fs); flex: (T, m, n, Fs)
    type_mixes: list[np.ndarray] | None  # flex: (T, n, Fs) per position
    slope_mixes: list[np.ndarray]  # (n, Fs) per position
    output: np.ndarray  # (n, c) final full matrix


@dataclass
class PipelineGrads:
    impute: np.ndarray  # (Fn, J)
    stage: np.ndarray  # (Fs, S, m)
    group: np.ndarray  # (G, 2)
    order: np.ndarray | None  # (Fs, S, S)
    x0: np.ndarray | None  # (n, c); None for batch-combined gradients


def _group_fill_vector(group: OneHotGroup, w: np.ndarray) -> np.ndarray:
    fill = np.zeros(group.width, dtype=np.float64)
    fill[group.mode_slot] = w[0]
    fill[group.missing_slot] = w[1]
    return fill


def _impute_stage(
    data: np.ndarray,
    mask: np.ndarray,
    ctx: PipelineContext,
    weights: MixWeights,
    fp: FittedPipeline,
    want_tape: bool,
):
    """Stage one: numeric imputer mixture plus per-group encoding mixture.
    Returns the full post-imputation matrix and tape pieces."""
    n = data.shape[0]
    x0n = data[:, ctx.numeric_cols]
    outputs = np.empty((len(fp.imputers), n, ctx.n_numeric), dtype=np.float64)
    for j, op in enumerate(fp.imputers):
        outputs[j] = op.apply(x0n)
    x1 = data.copy()
    if ctx.n_numeric:
        x1[:, ctx.numeric_cols] = np.einsum("fj,jnf->nf", weights.impute, outputs)
    group_missing = []
    for g_idx, group in enumerate(ctx.groups):
        miss = mask[:, group.start]
        group_missing.append(miss)
        if miss.any():
            fill = _group_fill_vector(group, weights.group[g_idx])
            x1[np.ix_(miss, range(group.start, group.stop))] = fill
    if not np.isfinite(x1).all():
        raise ValueError("missing values survived past the imputation stage")

    slope_mix = None
    if want_tape:
        # imputers are the identity on observed cells and constant on missing
        # ones, so the mixture slope is 1 or 0 regardless of the weights
        slope_mix = np.where(np.isnan(x0n), 0.0, 1.0)
    return x1, x0n, outputs, slope_mix, group_missing


def fit_stagewise(
    data: np.ndarray, mask: np.ndarray, ctx: PipelineContext, weights: MixWeights
) -> FittedPipeline:
    """Fit every candidate operator stage by stage on the mixture outputs of
    this batch. Stage-one imputers see the raw column (observed values only);
    later stages see the previous stage's mixture, so refitting every
    iteration tracks the moving weights."""
    if data.shape[0] == 0:
        raise ValueError("cannot fit a pipeline on an empty batch")
    _, _, fp = _run(data, mask, ctx, weights, fp=None, want_tape=False)
    return fp


def forward(
    data: np.ndarray,
    mask: np.ndarray,
    ctx: PipelineContext,
    weights: MixWeights,
    fp: FittedPipeline,
    want_tape: bool = True,
) -> tuple[np.ndarray, PipelineTape | None]:
    """Run the mixture pipeline on a batch with already-fitted operators."""
    out, tape, _ = _run(data, mask, ctx, weights, fp, want_tape)
    return out, tape


def fit_forward(
    data: np.ndarray,
    mask: np.ndarray,
    ctx: PipelineContext,
    weights: MixWeights,
) -> tuple[FittedPipeline, np.ndarray, PipelineTape]:
    """Fused fit_stagewise + forward on one batch: numerically identical to
    the two separate calls, but each stage is evaluated only once."""
    if data.shape[0] == 0:
        raise ValueError("cannot fit a pipeline on an empty batch")
    out, tape, fp = _run(data, mask, ctx, weights, fp=None, want_tape=True)
    return fp, out, tape


def _run(
    data: np.ndarray,
    mask: np.ndarray,
    ctx: PipelineContext,
    weights: MixWeights,
    fp: FittedPipeline | None,
    want_tape: bool,
):
    plan = ctx.plan
    fitting = fp is None
    if fitting:
        imputers = (
            fit_many(list(plan.impute_specs), data[:, ctx.numeric_cols], allow_missing=True)
            if ctx.numeric_cols
            else []
        )
        fp = FittedPipeline(ctx, imputers, [])
    x1, x0n, imp_out, imp_slope, group_missing = _impute_stage(
        data, mask, ctx, weights, fp, want_tape
    )
    x = x1[:, ctx.searched_cols]
    snap = weights.copy() if want_tape else weights
    stage_inputs: list[np.ndarray] = []
    stage_outputs: list[np.ndarray] = []
    op_outputs: list[np.ndarray] = []
    type_mixes: list[np.ndarray] = []
    slope_mixes: list[np.ndarray] = []

    for p in range(plan.n_positions):
        stage_inputs.append(x)
        h = default_step(x) if want_tape else None
        if plan.mode == "fix":
            if fitting:
                stage = FittedStage.fit(plan.catalog[plan.later_types[p]], x)
                fp.stages.append(stage)
            else:
                stage = fp.stages[p]
            if want_tape:
                outs, slopes = stage.bank.apply_with_probes(x, h)
            else:
                outs, slopes = stage.bank.apply_all(x), None
            beta = weights.stage[:, p, : len(stage)]
            x = np.einsum("fj,jnf->nf", beta, outs)
            if want_tape:
                op_outputs.append(outs)
                slope_mixes.append(np.einsum("fj,jnf->nf", snap.stage[:, p, : len(stage)], slopes))
        else:
            if fitting:
                per_type = [FittedStage.fit(plan.catalog[t], x) for t in plan.later_types]
                fp.stages.append(per_type)
            else:
                per_type = fp.stages[p]
            n_types = len(per_type)
            m = plan.max_ops
            outs = np.zeros((n_types, m, x.shape[0], x.shape[1]))
            slopes = np.zeros_like(outs) if want_tape else None
            for t, stage in enumerate(per_type):
                if want_tape:
                    outs[t, : len(stage)], slopes[t, : len(stage)] = stage.bank.apply_with_probes(x, h)
                else:
                    stage.bank.apply_all(x, out=outs[t, : len(stage)])
            mixes = np.einsum("ftk,tknf->tnf", weights.stage, outs)
            alpha_row = weights.order[:, p, :]
            x = np.einsum("ft,tnf->nf", alpha_row, mixes)
            if want_tape:
                op_outputs.append(outs)
                type_mixes.append(mixes)
                slope_by_type = np.einsum("ftk,tknf->tnf", snap.stage, slopes)
                slope_mixes.append(np.einsum("ft,tnf->nf", snap.order[:, p, :], slope_by_type))
        stage_outputs.append(x)

    out = x1  # x1 is already a private copy of the batch
    if ctx.searched_cols:
        out[:, ctx.searched_cols] = x
    if not want_tape:
        return out, None, fp
    tape = PipelineTape(
        ctx=ctx,
        n_rows=data.shape[0],
        x0_numeric=x0n.copy(),
        impute_outputs=imp_out,
        impute_slope_mix=imp_slope,
        group_missing=group_missing,
        weights=snap,
        stage_inputs=stage_inputs,
        stage_outputs=stage_outputs,
        op_outputs=op_outputs,
        type_mixes=type_mixes if plan.mode == "flex" else None,
        slope_mixes=slope_mixes,
        output=out,
    )
    return out, tape, fp


def backward(tape: PipelineTape, d_output: np.ndarray) -> PipelineGrads:
    """Propagate loss gradients at the pipeline output back to all mixture
    weights and to the raw input. Only recorded snapshots are consulted."""
    ctx = tape.ctx
    plan = ctx.plan
    if d_output.shape != tape.output.shape:
        raise ValueError(f"gradient shape {d_output.shape} does not match tape {tape.output.shape}")
    snap = tape.weights
    Fs = ctx.n_searched
    d_stage = np.zeros_like(snap.stage)
    d_order = None if snap.order is None else np.zeros_like(snap.order)

    g = d_output[:, ctx.searched_cols] if Fs else np.zeros((tape.n_rows, 0))
    for p in range(plan.n_positions - 1, -1, -1):
        if plan.mode == "fix":
            outs = tape.op_outputs[p]
            m_p = outs.shape[0]
            d_stage[:, p, :m_p] += np.einsum("nf,jnf->fj", g, outs)
        else:
            mixes = tape.type_mixes[p]
            outs = tape.op_outputs[p]
            alpha_row = snap.order[:, p, :]
            d_order[:, p, :] += np.einsum("nf,tnf->ft", g, mixes)
            d_stage += alpha_row[:, :, None] * np.einsum("nf,tknf->ftk", g, outs)
        g = g * tape.slope_mixes[p]

    # g is now the gradient at the post-imputation matrix for searched cols
    g1 = d_output.copy()
    if Fs:
        g1[:, ctx.searched_cols] = g

    Fn = ctx.n_numeric
    g1_num = g1[:, ctx.numeric_cols]
    d_impute = np.einsum("nf,jnf->fj", g1_num, tape.impute_outputs) if Fn else np.zeros((0, len(tape.impute_outputs)))

    d_group = np.zeros((len(ctx.groups), 2))
    d_x0 = np.zeros_like(d_output)
    if Fn:
        d_x0[:, ctx.numeric_cols] = g1_num * tape.impute_slope_mix
    for g_idx, group in enumerate(ctx.groups):
        miss = tape.group_missing[g_idx]
        if miss.any():
            d_group[g_idx, 0] = g1[miss, group.start + group.mode_slot].sum()
            d_group[g_idx, 1] = g1[miss, group.start + group.missing_slot].sum()
        obs = ~miss
        span = range(group.start, group.stop)
        d_x0[np.ix_(obs, span)] = g1[np.ix_(obs, span)]
    return PipelineGrads(impute=d_impute, stage=d_stage, group=d_group, order=d_order, x0=d_x0)


def impute_stage(
    data: np.ndarray,
    mask: np.ndarray,
    ctx: PipelineContext,
    weights: MixWeights,
    fp: FittedPipeline,
) -> np.ndarray:
    """Post-imputation matrix only (no later stages applied)."""
    x1, *_ = _impute_stage(data, mask, ctx, weights, fp, want_tape=False)
    return x1


def apply_discrete(
    data: np.ndarray,
    mask: np.ndarray,
    ctx: PipelineContext,
    choices: dict,
) -> tuple[np.ndarray, FittedPipeline]:
    """Fit-and-apply one discrete pipeline (one-hot weights built from the
    given choices). Used by baselines and export verification."""
    weights = one_hot_weights(ctx, choices)
    fp = fit_stagewise(data, mask, ctx, weights)
    out, _ = forward(data, mask, ctx, weights, fp, want_tape=False)
    return out, fp


def one_hot_weights(ctx: PipelineContext, choices: dict) -> MixWeights:
    """Build degenerate mixture weights from discrete picks.

    choices: {"impute": name, "group": 0|1, "stages": {tf_type: op_index}}.
    """
    plan = ctx.plan
    imp_idx = [s.name for s in plan.impute_specs].index(choices.get("impute", "mean"))
    impute = np.zeros((ctx.n_numeric, len(plan.impute_specs)))
    impute[:, imp_idx] = 1.0
    stage = np.zeros((ctx.n_searched, plan.n_positions, plan.max_ops))
    for i, t in enumerate(plan.later_types):
        j = choices.get("stages", {}).get(t, 0)
        stage[:, i, j] = 1.0
    group = np.zeros((len(ctx.groups), 2))
    group[:, int(choices.get("group", 0))] = 1.0
    order = None
    if plan.mode == "flex":
        order = np.zeros((ctx.n_searched, plan.n_positions, plan.n_positions))
        perm = choices.get("order", list(range(plan.n_positions)))
        for i, t in enumerate(perm):
            order[:, i, t] = 1.0
    return MixWeights(impute=impute, stage=stage, group=group, order=order)
