"""Reference preprocessing strategies: the fixed default pipeline and random
search over discrete pipelines. Both reuse the search loop's training
protocol (mini-batch SGD, per-epoch full-split evaluation, reporting at the
minimum-validation-loss epoch) so wall-clock and accuracy comparisons are
like for like.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .data import FeatureMatrix
from .models import make_model
from .operators import Catalog, OperatorSpec, build_catalog, fit_many
from .pipeline import PipelineContext, fit_stagewise, forward, make_plan, one_hot_weights
from .search import EpochMetrics, PassCounts, SearchConfig, SearchDiverged, _batches
from .util import rng_stream


@dataclass
class PlainResult:
    epochs: list[EpochMetrics]
    best_epoch: int
    best_val_loss: float
    best_val_acc: float
    test_loss: float
    test_acc: float
    counts: PassCounts
    wall_ms: float
    n_iterations: int


def train_plain(
    config: SearchConfig,
    x_train: np.ndarray,
    y_train: np.ndarray,
    x_val: np.ndarray,
    y_val: np.ndarray,
    x_test: np.ndarray,
    y_test: np.ndarray,
    n_classes: int,
) -> PlainResult:
    """Mini-batch SGD on already-preprocessed matrices: one forward and one
    backward pass per iteration."""
    model = make_model(config.model, x_train.shape[1], n_classes, rng_stream(config.seed, "model-init"))
    batch_rng = rng_stream(config.seed, "batch")
    counts = PassCounts()
    epochs: list[EpochMetrics] = []
    best = None
    n_iter = 0
    t0 = time.perf_counter()
    for epoch in range(config.epochs):
        for idx in _batches(batch_rng.permutation(len(y_train)), config.batch_size):
            n_iter += 1
            loss, grads, _ = model.loss_and_grads(x_train[idx], y_train[idx])
            counts.forward += 1
            counts.backward += 1
            if not np.isfinite(loss):
                raise SearchDiverged(epoch, loss)
            model = model.stepped(grads, config.lr_model)
        train_loss, _ = model.forward_loss(x_train, y_train)
        val_loss, _ = model.forward_loss(x_val, y_val)
        val_acc = model.accuracy(x_val, y_val)
        counts.eval_forward += 2
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
            best = (val_loss, epoch, model.clone(), val_acc)
    best_val_loss, best_epoch, best_model, best_val_acc = best
    test_loss, _ = best_model.forward_loss(x_test, y_test)
    test_acc = best_model.accuracy(x_test, y_test)
    counts.eval_forward += 1
    return PlainResult(
        epochs=epochs,
        best_epoch=best_epoch,
        best_val_loss=best_val_loss,
        best_val_acc=best_val_acc,
        test_loss=test_loss,
        test_acc=test_acc,
        counts=counts,
        wall_ms=(time.perf_counter() - t0) * 1000.0,
        n_iterations=n_iter,
    )


def default_transform(
    fm_train: FeatureMatrix, fm_val: FeatureMatrix, fm_test: FeatureMatrix
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """The common default: mean-impute numeric columns (most-frequent slot for
    one-hot groups), then standardize every column with train statistics.
    No outlier repair, no discretization."""
    def fill_groups(fm: FeatureMatrix) -> np.ndarray:
        x = fm.data.copy()
        for g in fm.groups:
            miss = fm.missing_mask[:, g.start]
            if miss.any():
                fill = np.zeros(g.width)
                fill[g.mode_slot] = 1.0
                x[np.ix_(miss, range(g.start, g.stop))] = fill
        return x

    x_tr, x_va, x_te = fill_groups(fm_train), fill_groups(fm_val), fill_groups(fm_test)
    nc = fm_train.numeric_cols
    if nc:
        mean_imputer = fit_many(
            [OperatorSpec("impute", "mean")], x_tr[:, nc], allow_missing=True
        )[0]
        x_tr[:, nc] = mean_imputer.apply(x_tr[:, nc])
        x_va[:, nc] = mean_imputer.apply(x_va[:, nc])
        x_te[:, nc] = mean_imputer.apply(x_te[:, nc])
    scaler = fit_many([OperatorSpec("normalize", "standard")], x_tr)[0]
    return scaler.apply(x_tr), scaler.apply(x_va), scaler.apply(x_te)


def run_default(
    config: SearchConfig,
    fm_train: FeatureMatrix,
    fm_val: FeatureMatrix,
    fm_test: FeatureMatrix,
) -> PlainResult:
    x_tr, x_va, x_te = default_transform(fm_train, fm_val, fm_test)
    return train_plain(
        config, x_tr, fm_train.labels, x_va, fm_val.labels, x_te, fm_test.labels, fm_train.n_classes
    )


@dataclass
class Trial:
    index: int
    choices: dict
    labels: dict
    val_acc: float
    test_acc: float
    best_epoch: int
    result: PlainResult


@dataclass
class RandomSearchResult:
    best: Trial
    trials: list[Trial]
    wall_ms: float
    counts: PassCounts


def sample_pipeline(catalog: Catalog, order: tuple[str, ...], rng: np.random.Generator) -> dict:
    """One operator per TF type, uniform over the type's catalog entries.
    All features share the sampled pipeline."""
    choices = {"stages": {}}
    for t in order:
        ops = catalog[t]
        j = int(rng.integers(0, len(ops)))
        if t == "impute":
            choices["impute"] = ops[j].name
            choices["group"] = int(rng.integers(0, 2))
        else:
            choices["stages"][t] = j
    return choices


def describe_choices(catalog: Catalog, order: tuple[str, ...], choices: dict) -> dict:
    out = {"impute": choices.get("impute"), "group": ["most_frequent", "missing_slot"][choices.get("group", 0)]}
    for t in order[1:]:
        out[t] = catalog[t][choices["stages"][t]].label
    return out


def random_search(
    config: SearchConfig,
    fm_train: FeatureMatrix,
    fm_val: FeatureMatrix,
    fm_test: FeatureMatrix,
    n_trials: int,
    catalog: Catalog | None = None,
) -> RandomSearchResult:
    """Train the model end to end on each sampled discrete pipeline and keep
    the trial with the best validation accuracy (ties to the earliest)."""
    if n_trials < 1:
        raise ValueError("need at least one trial")
    catalog = catalog or build_catalog()
    plan = make_plan(catalog, "fix", config.prototype, search_onehot=True)
    ctx = PipelineContext.for_matrix(plan, fm_train)
    trials: list[Trial] = []
    counts = PassCounts()
    t0 = time.perf_counter()
    for i in range(n_trials):
        # per-trial sampling stream (seed + index): trials can run in any
        # order or concurrently without changing what gets sampled
        choices = sample_pipeline(catalog, plan.order, rng_stream(config.seed + i, "trial"))
        weights = one_hot_weights(ctx, choices)
        fitted = fit_stagewise(fm_train.data, fm_train.missing_mask, ctx, weights)
        counts.fit += 1
        x_tr, _ = forward(fm_train.data, fm_train.missing_mask, ctx, weights, fitted, want_tape=False)
        x_va, _ = forward(fm_val.data, fm_val.missing_mask, ctx, weights, fitted, want_tape=False)
        x_te, _ = forward(fm_test.data, fm_test.missing_mask, ctx, weights, fitted, want_tape=False)
        counts.eval_forward += 3
        res = train_plain(
            config, x_tr, fm_train.labels, x_va, fm_val.labels, x_te, fm_test.labels,
            fm_train.n_classes,
        )
        counts.forward += res.counts.forward
        counts.backward += res.counts.backward
        trials.append(
            Trial(
                index=i,
                choices=choices,
                labels=describe_choices(catalog, plan.order, choices),
                val_acc=res.best_val_acc,
                test_acc=res.test_acc,
                best_epoch=res.best_epoch,
                result=res,
            )
        )
    best = max(trials, key=lambda t: (t.val_acc, -t.index))
    return RandomSearchResult(
        best=best, trials=trials, wall_ms=(time.perf_counter() - t0) * 1000.0, counts=counts
    )
