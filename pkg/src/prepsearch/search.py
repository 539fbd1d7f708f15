"""Bi-level search loop: alternating gradient descent on pipeline parameters
(outer, validation loss) and model weights (inner, training loss).

Each iteration refits all candidate operators on the training mini-batch,
takes a virtual one-step model update, and estimates the pipeline-parameter
gradient of the validation loss with the chain rule. The second-order term
is approximated by a finite difference of training-loss pipeline gradients
at model weights perturbed along the validation gradient, with step
0.01 / ||grad|| (skipped, and recorded, when that norm is zero). The
training-loss model gradient is computed once per iteration and reused for
both the virtual step and the actual model update, so the loop costs exactly
one fit pass plus four forward and four backward passes per iteration: one
training pass plus three extra for the outer gradient.

Reported results come from the epoch with minimum validation loss; training
never halts early.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import FeatureMatrix
from .models import grad_norm, make_model
from .operators import Catalog, build_catalog
from .pipeline import (
    FittedPipeline,
    MixWeights,
    PipelineContext,
    PipelineGrads,
    PipelinePlan,
    backward,
    fit_forward,
    fit_stagewise,
    forward,
    impute_stage,
    make_plan,
)
from .relax import (
    doubly_stochastic_unrolled,
    doubly_stochastic_vjp,
    export_discrete,
    masked_softmax,
    masked_softmax_vjp,
)
from .util import rng_stream

ABLATIONS = (None, "no-feature-wise", "train-only")


class SearchDiverged(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"non-finite loss at epoch {epoch}: {loss}")
        self.epoch = epoch


@dataclass(frozen=True)
class SearchConfig:
    mode: str = "fix"  # "fix" | "flex"
    ablation: str | None = None  # None | "no-feature-wise" | "train-only"
    model: str = "logreg"  # "logreg" | "mlp"
    lr_pipeline: float = 0.05  # Adam, pipeline parameters
    lr_model: float = 0.1  # SGD, model weights
    epochs: int = 1000
    batch_size: int = 512
    seed: int = 0
    prototype: tuple[str, ...] | None = None  # fix-mode type order, imputation first
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    hvp_step: float = 0.01  # numerator of the perturbation step rule
    sinkhorn_tol: float = 1e-6
    sinkhorn_iters: int = 100
    init_noise: float = 0.0  # optional tie-breaking noise on the logits
    search_onehot: bool = False

    def __post_init__(self):
        if self.mode not in ("fix", "flex"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {self.ablation!r}")
        if self.lr_pipeline <= 0 or self.lr_model < 0:
            raise ValueError("learning rates must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be at least 1")


@dataclass
class PassCounts:
    """Instrumented pass counters; loop passes and evaluation passes are kept
    apart so per-iteration accounting stays exact."""

    fit: int = 0
    forward: int = 0
    backward: int = 0
    eval_fit: int = 0
    eval_forward: int = 0

    def as_dict(self) -> dict:
        return {
            "fit_passes": self.fit,
            "forward_passes": self.forward,
            "backward_passes": self.backward,
            "eval_fit_passes": self.eval_fit,
            "eval_forward_passes": self.eval_forward,
        }


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float
    wall_ms: float
    fit_passes: int
    forward_passes: int
    backward_passes: int


@dataclass
class ParamState:
    """Underlying unconstrained pipeline parameters."""

    impute_logits: np.ndarray  # (F or 1, n_imputers)
    stage_logits: np.ndarray  # (F or 1, S, m)
    group_logits: np.ndarray  # (G or 1, 2)
    order_potentials: np.ndarray | None  # (F or 1, S, S)
    shared: bool = False

    def arrays(self) -> list[np.ndarray]:
        out = [self.impute_logits, self.stage_logits, self.group_logits]
        if self.order_potentials is not None:
            out.append(self.order_potentials)
        return out

    def with_arrays(self, arrays: list[np.ndarray]) -> "ParamState":
        order = arrays[3] if self.order_potentials is not None else None
        return ParamState(arrays[0], arrays[1], arrays[2], order, self.shared)

    def copy(self) -> "ParamState":
        return ParamState(
            self.impute_logits.copy(),
            self.stage_logits.copy(),
            self.group_logits.copy(),
            None if self.order_potentials is None else self.order_potentials.copy(),
            self.shared,
        )


def init_params(ctx: PipelineContext, config: SearchConfig) -> ParamState:
    """Uniform mixtures (zero logits/potentials) with optional seeded noise."""
    plan = ctx.plan
    shared = config.ablation == "no-feature-wise"
    fn = 1 if shared else ctx.n_numeric
    fs = 1 if shared else ctx.n_searched
    ng = 1 if shared else len(ctx.groups)
    n_imp = len(plan.impute_specs)
    state = ParamState(
        impute_logits=np.zeros((fn, n_imp)),
        stage_logits=np.zeros((fs, plan.n_positions, plan.max_ops)),
        group_logits=np.zeros((ng, 2)),
        order_potentials=np.zeros((fs, plan.n_positions, plan.n_positions))
        if plan.mode == "flex"
        else None,
        shared=shared,
    )
    if config.init_noise > 0:
        rng = rng_stream(config.seed, "init")
        for arr in state.arrays():
            arr += config.init_noise * rng.standard_normal(arr.shape)
    return state


@dataclass
class DeriveTape:
    """Intermediates of the logits -> mixture-weights map, for chaining."""

    impute_local: np.ndarray
    stage_local: np.ndarray
    group_local: np.ndarray
    sinkhorn: dict | None


def derive_weights(
    params: ParamState, ctx: PipelineContext, config: SearchConfig
) -> tuple[MixWeights, DeriveTape]:
    plan = ctx.plan
    mask = plan.stage_mask()
    imp = masked_softmax(params.impute_logits)
    stg = masked_softmax(params.stage_logits, mask)
    grp = masked_softmax(params.group_logits)
    order = None
    sink = None
    if plan.mode == "flex":
        order_local, sink = doubly_stochastic_unrolled(
            params.order_potentials, tol=config.sinkhorn_tol, max_iters=config.sinkhorn_iters
        )
    tape = DeriveTape(imp, stg, grp, sink)

    def full(local: np.ndarray, count: int) -> np.ndarray:
        if params.shared and count != local.shape[0]:
            return np.broadcast_to(local, (count,) + local.shape[1:])
        return local

    weights = MixWeights(
        impute=full(imp, ctx.n_numeric),
        stage=full(stg, ctx.n_searched),
        group=full(grp, len(ctx.groups)),
        order=None,
    )
    if plan.mode == "flex":
        weights.order = full(order_local, ctx.n_searched)
    return weights, tape


def chain_to_logits(
    params: ParamState, tape: DeriveTape, grads: PipelineGrads
) -> list[np.ndarray]:
    """Map mixture-weight gradients back to the unconstrained parameters."""

    def agg(g: np.ndarray, local: np.ndarray) -> np.ndarray:
        if g.shape == local.shape:
            return g
        if g.size == 0:  # no features of this class in the table
            return np.zeros_like(local)
        return g.sum(axis=0, keepdims=True)  # shared parameters: sum over features

    d_imp = masked_softmax_vjp(tape.impute_local, agg(grads.impute, tape.impute_local))
    d_stage = masked_softmax_vjp(tape.stage_local, agg(grads.stage, tape.stage_local))
    d_group = masked_softmax_vjp(tape.group_local, agg(grads.group, tape.group_local))
    out = [d_imp, d_stage, d_group]
    if params.order_potentials is not None:
        d_order = agg(grads.order, params.order_potentials)
        out.append(doubly_stochastic_vjp(tape.sinkhorn, d_order))
    return out


class Adam:
    def __init__(self, arrays: list[np.ndarray], lr: float, b1: float, b2: float, eps: float):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.t = 0
        self.m = [np.zeros_like(a) for a in arrays]
        self.v = [np.zeros_like(a) for a in arrays]

    def update(self, arrays: list[np.ndarray], grads: list[np.ndarray]) -> list[np.ndarray]:
        self.t += 1
        out = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = self.b1 * self.m[i] + (1 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1 - self.b2) * g * g
            mh = self.m[i] / (1 - self.b1**self.t)
            vh = self.v[i] / (1 - self.b2**self.t)
            out.append(a - self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


def virtual_step(model, train_grads: list[np.ndarray], lr_model: float):
    """One-step look-ahead model: w' = w - lr * grad(train loss); w untouched."""
    return model.stepped(train_grads, lr_model)


def combine_grads(a: PipelineGrads, b: PipelineGrads, factor: float) -> PipelineGrads:
    """Weight-space combination; input gradients are per-batch and dropped."""
    return PipelineGrads(
        impute=a.impute + factor * b.impute,
        stage=a.stage + factor * b.stage,
        group=a.group + factor * b.group,
        order=None if a.order is None else a.order + factor * b.order,
        x0=None,
    )


def scale_grads(a: PipelineGrads, factor: float) -> PipelineGrads:
    return PipelineGrads(
        impute=factor * a.impute,
        stage=factor * a.stage,
        group=factor * a.group,
        order=None if a.order is None else factor * a.order,
        x0=None,
    )


@dataclass
class HyperGradient:
    pipe: PipelineGrads  # total validation gradient in mixture-weight space
    train_grads: list[np.ndarray]  # model gradient of the training loss at w
    train_loss: float
    val_loss: float
    d3_skipped: bool


def fd_mixed_term(model, direction: list[np.ndarray], grad_fn, hvp_step: float):
    """Centered finite-difference estimate of the mixed second-order product:
    [grad_fn(w + e*d) - grad_fn(w - e*d)] / (2e) with e = hvp_step / ||d||.

    grad_fn maps a model to a list of gradient arrays. Returns None when the
    direction vanishes (the caller records the event and drops the term).
    """
    dnorm = grad_norm(direction)
    if dnorm == 0.0:
        return None
    step = hvp_step / dnorm
    up = grad_fn(model.stepped(direction, -step))
    down = grad_fn(model.stepped(direction, step))
    return [(u - d) / (2.0 * step) for u, d in zip(up, down)]


def _pipe_to_list(g: PipelineGrads) -> list[np.ndarray]:
    out = [g.impute, g.stage, g.group]
    if g.order is not None:
        out.append(g.order)
    return out


def _pipe_from_list(arrays: list[np.ndarray], like: PipelineGrads) -> PipelineGrads:
    order = arrays[3] if like.order is not None else None
    return PipelineGrads(arrays[0], arrays[1], arrays[2], order, x0=None)


def hypergradient(
    model,
    xs_train: np.ndarray,
    y_train: np.ndarray,
    tape_train,
    xs_val: np.ndarray,
    y_val: np.ndarray,
    tape_val,
    lr_model: float,
    hvp_step: float,
    counts: PassCounts,
) -> HyperGradient:
    """Validation gradient w.r.t. mixture weights through the one-step model.

    First term: validation-loss pipeline gradient at the virtual weights.
    Second term: lr_model times a finite-difference estimate of the mixed
    second-order product, probed along the validation model gradient. If that
    gradient vanishes the second term is skipped.
    """
    train_loss, train_grads, _ = model.loss_and_grads(xs_train, y_train)
    counts.backward += 1
    looked_ahead = virtual_step(model, train_grads, lr_model)

    val_loss, val_grads, d_xs_val = looked_ahead.loss_and_grads(xs_val, y_val)
    direct = backward(tape_val, d_xs_val)
    counts.backward += 1

    def train_pipe_grads(m) -> list[np.ndarray]:
        _, _, d_xs = m.loss_and_grads(xs_train, y_train)
        counts.forward += 1
        g = backward(tape_train, d_xs)
        counts.backward += 1
        return _pipe_to_list(g)

    second = fd_mixed_term(model, val_grads, train_pipe_grads, hvp_step)
    if second is None:
        return HyperGradient(direct, train_grads, train_loss, val_loss, d3_skipped=True)
    total = combine_grads(direct, _pipe_from_list(second, direct), -lr_model)
    return HyperGradient(total, train_grads, train_loss, val_loss, d3_skipped=False)


def evaluate(
    params: ParamState,
    model,
    ctx: PipelineContext,
    config: SearchConfig,
    fit_fm: FeatureMatrix,
    eval_fm: FeatureMatrix,
    counts: PassCounts | None = None,
    fitted: FittedPipeline | None = None,
) -> tuple[float, float, FittedPipeline]:
    """Full-split loss/accuracy through the continuous mixture. Operators are
    fitted on the training split and reused for any evaluated split."""
    weights, _ = derive_weights(params, ctx, config)
    if fitted is None:
        fitted = fit_stagewise(fit_fm.data, fit_fm.missing_mask, ctx, weights)
        if counts is not None:
            counts.eval_fit += 1
    xs, _ = forward(eval_fm.data, eval_fm.missing_mask, ctx, weights, fitted, want_tape=False)
    if counts is not None:
        counts.eval_forward += 1
    loss, _ = model.forward_loss(xs, eval_fm.labels)
    acc = model.accuracy(xs, eval_fm.labels)
    return loss, acc, fitted


def impute_only(
    params: ParamState,
    ctx: PipelineContext,
    config: SearchConfig,
    fit_fm: FeatureMatrix,
    apply_fm: FeatureMatrix,
) -> np.ndarray:
    """Stage-one output only (mixture imputation), for data-quality metrics."""
    weights, _ = derive_weights(params, ctx, config)
    fitted = fit_stagewise(fit_fm.data, fit_fm.missing_mask, ctx, weights)
    return impute_stage(apply_fm.data, apply_fm.missing_mask, ctx, weights, fitted)


@dataclass
class SearchResult:
    config: SearchConfig
    plan: PipelinePlan
    epochs: list[EpochMetrics]
    best_epoch: int
    best_val_loss: float
    best_val_acc: float
    test_loss: float
    test_acc: float
    counts: PassCounts
    wall_ms: float
    n_iterations: int
    d3_skips: int
    best_params: ParamState
    best_model: object
    final_params: ParamState


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    return [order[i : i + size] for i in range(0, len(order), size)]


def _val_batch(order: np.ndarray, cursor: int, size: int) -> tuple[np.ndarray, int]:
    n = len(order)
    size = min(size, n)
    if cursor + size <= n:
        return order[cursor : cursor + size], (cursor + size) % n
    head = order[cursor:]
    tail = order[: (cursor + size) % n]
    return np.concatenate([head, tail]), (cursor + size) % n


def run_search(
    config: SearchConfig,
    fm_train: FeatureMatrix,
    fm_val: FeatureMatrix,
    fm_test: FeatureMatrix,
    catalog: Catalog | None = None,
) -> SearchResult:
    catalog = catalog or build_catalog()
    plan = make_plan(catalog, config.mode, config.prototype, config.search_onehot)
    ctx = PipelineContext.for_matrix(plan, fm_train)
    params = init_params(ctx, config)
    model = make_model(config.model, fm_train.n_cols, fm_train.n_classes, rng_stream(config.seed, "model-init"))
    adam = Adam(params.arrays(), config.lr_pipeline, config.adam_beta1, config.adam_beta2, config.adam_eps)
    batch_rng = rng_stream(config.seed, "batch")
    val_rng = rng_stream(config.seed, "val-batch")
    counts = PassCounts()
    epochs: list[EpochMetrics] = []
    best = None  # (val_loss, epoch, params, model, val_acc)
    d3_skips = 0
    n_iter = 0
    t0 = time.perf_counter()

    for epoch in range(config.epochs):
        train_order = batch_rng.permutation(fm_train.n_rows)
        val_order = val_rng.permutation(fm_val.n_rows)
        val_cursor = 0
        epoch_losses: list[float] = []
        fitted = None
        for idx in _batches(train_order, config.batch_size):
            n_iter += 1
            xb = fm_train.data[idx]
            mb = fm_train.missing_mask[idx]
            yb = fm_train.labels[idx]
            weights, dtape = derive_weights(params, ctx, config)
            # fused fit + tape forward (identical numerics, one stage pass)
            fitted, xs_t, tape_t = fit_forward(xb, mb, ctx, weights)
            counts.fit += 1
            counts.forward += 1

            if config.ablation == "train-only":
                # one-level objective: pipeline and model both follow the
                # training loss, one forward/backward pair per iteration
                loss_t, train_grads, d_xs = model.loss_and_grads(xs_t, yb)
                counts.backward += 1
                pipe = backward(tape_t, d_xs)
                logit_grads = chain_to_logits(params, dtape, pipe)
                params = params.with_arrays(adam.update(params.arrays(), logit_grads))
                model = model.stepped(train_grads, config.lr_model)
                if not np.isfinite(loss_t):
                    raise SearchDiverged(epoch, loss_t)
                epoch_losses.append(loss_t)
                continue

            vidx, val_cursor = _val_batch(val_order, val_cursor, config.batch_size)
            xs_v, tape_v = forward(
                fm_val.data[vidx], fm_val.missing_mask[vidx], ctx, weights, fitted, want_tape=True
            )
            counts.forward += 1
            hg = hypergradient(
                model,
                xs_t,
                yb,
                tape_t,
                xs_v,
                fm_val.labels[vidx],
                tape_v,
                config.lr_model,
                config.hvp_step,
                counts,
            )
            if hg.d3_skipped:
                d3_skips += 1
            if not (np.isfinite(hg.train_loss) and np.isfinite(hg.val_loss)):
                raise SearchDiverged(epoch, hg.train_loss)
            logit_grads = chain_to_logits(params, dtape, hg.pipe)
            params = params.with_arrays(adam.update(params.arrays(), logit_grads))
            # reuse the training gradient: the model lands exactly on the
            # virtual-step weights, keeping the per-iteration pass budget
            model = model.stepped(hg.train_grads, config.lr_model)
            epoch_losses.append(hg.train_loss)

        # epoch metrics: training loss is the mean over this epoch's batches;
        # the full validation split runs through the operators fitted on the
        # last training mini-batch (operators are mini-batch-fitted everywhere
        # in the loop, so evaluation sees the same statistics the search sees)
        weights, _ = derive_weights(params, ctx, config)
        xs_val, _ = forward(
            fm_val.data, fm_val.missing_mask, ctx, weights, fitted, want_tape=False
        )
        counts.eval_forward += 1
        val_loss, _ = model.forward_loss(xs_val, fm_val.labels)
        val_acc = model.accuracy(xs_val, fm_val.labels)
        train_loss = float(np.mean(epoch_losses))
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise SearchDiverged(epoch, val_loss)
        epochs.append(
            EpochMetrics(
                epoch=epoch,
                train_loss=train_loss,
                val_loss=val_loss,
                val_acc=val_acc,
                wall_ms=(time.perf_counter() - t0) * 1000.0,
                fit_passes=counts.fit,
                forward_passes=counts.forward,
                backward_passes=counts.backward,
            )
        )
        if best is None or val_loss < best[0]:
            best = (val_loss, epoch, params.copy(), model.clone(), val_acc)

    best_val_loss, best_epoch, best_params, best_model, best_val_acc = best
    test_loss, test_acc, _ = evaluate(best_params, best_model, ctx, config, fm_train, fm_test, counts)
    return SearchResult(
        config=config,
        plan=plan,
        epochs=epochs,
        best_epoch=best_epoch,
        best_val_loss=best_val_loss,
        best_val_acc=best_val_acc,
        test_loss=test_loss,
        test_acc=test_acc,
        counts=counts,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
        n_iterations=n_iter,
        d3_skips=d3_skips,
        best_params=best_params,
        best_model=best_model,
        final_params=params,
    )


def export_pipelines(result: SearchResult, ctx: PipelineContext, config: SearchConfig) -> dict:
    """Inspection document: hardened per-feature pipelines plus raw weights.
    The search itself always evaluates the continuous mixtures."""
    plan = result.plan
    weights, _ = derive_weights(result.best_params, ctx, config)
    imp_names = [s.label for s in plan.impute_specs]
    later_names = [[s.label for s in plan.catalog[t]] for t in plan.later_types]
    features = []
    for f, col in enumerate(ctx.searched_cols):
        is_numeric = f < ctx.n_numeric
        full_w = np.zeros((plan.n_positions + 1, max(plan.max_ops, len(imp_names))))
        if is_numeric:
            full_w[0, : len(imp_names)] = weights.impute[f]
        else:
            full_w[0, 0] = 1.0
        full_w[1:, : plan.max_ops] = weights.stage[f]
        op_names = [imp_names if is_numeric else ["identity"]] + later_names
        order_full = None
        if plan.mode == "flex":
            s = plan.n_positions + 1
            order_full = np.zeros((s, s))
            order_full[0, 0] = 1.0
            order_full[1:, 1:] = weights.order[f]
        doc = export_discrete(
            full_w,
            op_names,
            order_weights=order_full,
            type_names=["impute"] + list(plan.later_types),
        )
        features.append({"column": f, "encoded_index": col, "pipeline": doc["stages"]})
    groups = [
        {
            "source": g.source,
            "most_frequent_weight": float(weights.group[i, 0]),
            "missing_slot_weight": float(weights.group[i, 1]),
        }
        for i, g in enumerate(ctx.groups)
    ]
    return {"features": features, "groups": groups}
