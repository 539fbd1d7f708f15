"""Acceptance suite: every criterion runs at its stated tolerance and prints
one PASS/FAIL line (run with `pytest -s tests/test_acceptance.py` to see the
lines as they happen).

Criteria 6-8 share one experiment matrix (5 seeds x 5 methods on the
synthetic benchmark) built once per session.
"""
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from conftest import affine_catalog, make_numeric_fm
from prepsearch.baselines import random_search, run_default
from prepsearch.data import SplitSpec, encode, split, split_indices
from prepsearch.models import LogisticModel, MLPModel
from prepsearch.operators import CatalogConfig, OperatorSpec, build_catalog, fit, fit_many
from prepsearch.pipeline import (
    MixWeights,
    PipelineContext,
    backward,
    fit_stagewise,
    forward,
    make_plan,
    one_hot_weights,
)
from prepsearch.relax import masked_softmax, sinkhorn
from prepsearch.search import (
    SearchConfig,
    chain_to_logits,
    derive_weights,
    fd_mixed_term,
    hypergradient,
    impute_only,
    init_params,
    run_search,
    virtual_step,
)
from prepsearch.search import PassCounts
from prepsearch.synth import SynthSpec, generate, imputation_rmse


def report(num: int, name: str, ok: bool, detail: str = "") -> None:
    status = "PASS" if ok else "FAIL"
    print(f"ACCEPTANCE {num} {name}: {status}" + (f" ({detail})" if detail else ""))


def vec_rel_err(fd: np.ndarray, an: np.ndarray) -> float:
    denom = max(np.linalg.norm(fd), 1e-12)
    return float(np.linalg.norm(fd - an) / denom)


# ---------------------------------------------------------------------------
# Criterion 1: relaxation invariants
# ---------------------------------------------------------------------------


def test_criterion_1_relaxation_invariants():
    rng = np.random.default_rng(11)
    t0 = time.perf_counter()
    worst_row = 0.0
    for _ in range(1000):
        logits = rng.normal(scale=rng.uniform(0.1, 20.0), size=(4, 9))
        mask = rng.random((4, 9)) < 0.7
        mask[:, 0] = True
        w = masked_softmax(logits, mask)
        assert (w[~mask] == 0.0).all()
        worst_row = max(worst_row, float(np.abs(w.sum(axis=1) - 1.0).max()))
    assert worst_row < 1e-9

    worst_marginal = 0.0
    for _ in range(1000):
        x = np.exp(rng.normal(size=(8, 8)))
        a = sinkhorn(x, tol=1e-6, max_iters=100)
        err = max(np.abs(a.sum(axis=0) - 1).max(), np.abs(a.sum(axis=1) - 1).max())
        worst_marginal = max(worst_marginal, float(err))
    elapsed = time.perf_counter() - t0
    ok = worst_row < 1e-9 and worst_marginal < 1e-6 and elapsed < 10.0
    report(1, "relaxation invariants", ok,
           f"simplex {worst_row:.1e}, marginals {worst_marginal:.1e}, {elapsed:.1f}s")
    assert worst_marginal < 1e-6
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# Criterion 2: snapshot forward equals direct evaluation
# ---------------------------------------------------------------------------


def _single_col(op, f):
    stats = {k: (v[..., f] if getattr(v, "ndim", 0) else v) for k, v in op.stats.items()}
    from prepsearch.operators import FittedOperator

    return FittedOperator(op.spec, stats, op.fit_count)


def _stagewise_direct_errors(data, ctx, weights, fp, tape):
    """Independent scalar re-evaluation of every stage's mixture from the
    recorded stage input, against the vectorized stage output.

    Comparing stage by stage from shared inputs keeps the check meaningful at
    discretizer bin edges: quantile edges are order statistics, so whole-
    pipeline re-evaluation with a different float summation order can land a
    cell on the other side of an edge and differ by a full bin, which says
    nothing about the decomposition being checked here.
    """
    plan = ctx.plan
    n = data.shape[0]
    worst = 0.0
    for f in range(ctx.n_searched):
        for r in range(n):
            v = sum(
                wj * _single_col(imp, f).transform(float(data[r, ctx.searched_cols[f]]))
                for wj, imp in zip(weights.impute[f], fp.imputers)
            )
            got = tape.stage_inputs[0][r, f]
            worst = max(worst, abs(got - v) / max(1.0, abs(v)))
            for p in range(plan.n_positions):
                x_in = float(tape.stage_inputs[p][r, f])
                if plan.mode == "fix":
                    stage = fp.stages[p]
                    v = sum(
                        wj * _single_col(op, f).transform(x_in)
                        for wj, op in zip(weights.stage[f, p, : len(stage)], stage)
                    )
                else:
                    v = 0.0
                    for t, stage in enumerate(fp.stages[p]):
                        for k, op in enumerate(stage):
                            v += (
                                weights.order[f, p, t]
                                * weights.stage[f, t, k]
                                * _single_col(op, f).transform(x_in)
                            )
                got = tape.stage_outputs[p][r, f]
                worst = max(worst, abs(got - v) / max(1.0, abs(v)))
    return worst


def _random_instance(rng, mode):
    n = int(rng.integers(12, 40))
    d = int(rng.integers(1, 4))
    data = rng.normal(size=(n, d)) * np.exp(rng.normal(size=d))
    data[rng.random((n, d)) < 0.2] = np.nan
    fm = make_numeric_fm(data)
    plan = make_plan(build_catalog(), mode)
    ctx = PipelineContext.for_matrix(plan, fm)
    w = MixWeights(
        impute=masked_softmax(rng.normal(size=(ctx.n_numeric, 3))),
        stage=masked_softmax(rng.normal(size=(ctx.n_searched, plan.n_positions, plan.max_ops)),
                             plan.stage_mask()),
        group=np.zeros((0, 2)),
    )
    if mode == "flex":
        from prepsearch.relax import doubly_stochastic_from_potentials

        w.order = doubly_stochastic_from_potentials(
            rng.normal(size=(ctx.n_searched, plan.n_positions, plan.n_positions))
        )
    return fm, ctx, w


def test_criterion_2_forward_equivalence():
    rng = np.random.default_rng(21)
    worst = 0.0
    for i in range(100):
        mode = "fix" if i % 2 == 0 else "flex"
        fm, ctx, w = _random_instance(rng, mode)
        fp = fit_stagewise(fm.data, fm.missing_mask, ctx, w)
        _, tape = forward(fm.data, fm.missing_mask, ctx, w, fp, want_tape=True)
        worst = max(worst, _stagewise_direct_errors(fm.data, ctx, w, fp, tape))
    ok = worst < 1e-12
    report(2, "forward equivalence", ok, f"max rel diff {worst:.2e} over 100 configs")
    assert ok


# ---------------------------------------------------------------------------
# Criterion 3: discrete recovery, bitwise
# ---------------------------------------------------------------------------


def _sequential_selected(data_col, f, plan, choices, fp):
    """Independent oracle: apply the selected fitted operators one after
    another through their public scalar transform. With one-hot weights the
    mixture's fitting inputs are bitwise the discrete sequence, so the
    pipeline's fitted operators are exactly 'the selected fitted operators'."""
    imp_idx = [s.name for s in plan.impute_specs].index(choices["impute"])
    x = _single_col(fp.imputers[imp_idx], f).transform(data_col)
    order = choices.get("order", list(range(plan.n_positions)))
    for pos in range(plan.n_positions):
        t_idx = order[pos]
        t = plan.later_types[t_idx]
        k = choices["stages"][t]
        stage = fp.stages[pos] if plan.mode == "fix" else fp.stages[pos][t_idx]
        x = _single_col(stage[k], f).transform(x)
    return x


def test_criterion_3_discrete_recovery():
    rng = np.random.default_rng(31)
    exact = True
    for i in range(50):
        mode = "fix" if i % 2 == 0 else "flex"
        n = int(rng.integers(10, 30))
        d = int(rng.integers(1, 3))
        data = rng.normal(size=(n, d)) * np.exp(rng.normal(size=d))
        data[rng.random((n, d)) < 0.25] = np.nan
        fm = make_numeric_fm(data)
        plan = make_plan(build_catalog(), mode)
        ctx = PipelineContext.for_matrix(plan, fm)
        choices = {
            "impute": ("mean", "median", "mode")[rng.integers(0, 3)],
            "stages": {t: int(rng.integers(0, len(plan.catalog[t]))) for t in plan.later_types},
        }
        if mode == "flex":
            choices["order"] = list(rng.permutation(plan.n_positions))
        w = one_hot_weights(ctx, choices)
        fp = fit_stagewise(fm.data, fm.missing_mask, ctx, w)
        out, _ = forward(fm.data, fm.missing_mask, ctx, w, fp, want_tape=False)
        for f in range(d):
            want = _sequential_selected(data[:, f], f, plan, choices, fp)
            if not np.array_equal(out[:, f], want):
                exact = False
    report(3, "discrete recovery (bitwise)", exact, "50 random instances")
    assert exact


# ---------------------------------------------------------------------------
# Criterion 4: gradient correctness
# ---------------------------------------------------------------------------


def _model_fd_max_err(model, X, y, rng, probes=12):
    _, grads, dX = model.loss_and_grads(X, y)
    eps = 1e-6
    worst = 0.0
    params = model.params()
    for _ in range(probes):
        pi = int(rng.integers(0, len(params)))
        idx = np.unravel_index(int(rng.integers(0, params[pi].size)), params[pi].shape)
        up, down = model.clone(), model.clone()
        up.params()[pi][idx] += eps
        down.params()[pi][idx] -= eps
        fd = (up.forward_loss(X, y)[0] - down.forward_loss(X, y)[0]) / (2 * eps)
        worst = max(worst, abs(fd - grads[pi][idx]) / max(abs(fd), 1e-8))
    for _ in range(probes):
        r, c = int(rng.integers(0, X.shape[0])), int(rng.integers(0, X.shape[1]))
        Xp, Xm = X.copy(), X.copy()
        Xp[r, c] += eps
        Xm[r, c] -= eps
        fd = (model.forward_loss(Xp, y)[0] - model.forward_loss(Xm, y)[0]) / (2 * eps)
        worst = max(worst, abs(fd - dX[r, c]) / max(abs(fd), 1e-8))
    return worst


def test_criterion_4a_model_gradients():
    rng = np.random.default_rng(41)
    worst_log = 0.0
    for _ in range(25):
        k, c, n = int(rng.integers(2, 4)), int(rng.integers(2, 6)), int(rng.integers(3, 9))
        model = LogisticModel(rng.normal(size=(k, c)), rng.normal(size=k))
        worst_log = max(
            worst_log,
            _model_fd_max_err(model, rng.normal(size=(n, c)), rng.integers(0, k, size=n), rng, 6),
        )
    worst_mlp = 0.0
    for _ in range(10):
        model = MLPModel.init(4, 3, rng, hidden=10)
        X = rng.normal(size=(6, 4)) + 0.07  # probes stay off ReLU kinks
        worst_mlp = max(worst_mlp, _model_fd_max_err(model, X, rng.integers(0, 3, size=6), rng, 6))
    ok = worst_log < 1e-5 and worst_mlp < 1e-4
    report(4, "gradients (a: model)", ok, f"logistic {worst_log:.1e} (<1e-5), mlp {worst_mlp:.1e} (<1e-4)")
    assert worst_log < 1e-5
    assert worst_mlp < 1e-4


def _pipeline_fd_err(ctx, fm, w, tol_fields, rng, probes=18):
    fp = fit_stagewise(fm.data, fm.missing_mask, ctx, w)
    out, tape = forward(fm.data, fm.missing_mask, ctx, w, fp)
    grads = backward(tape, out.copy())  # loss = 0.5 * sum(out^2)

    def loss_at(wmod):
        o, _ = forward(fm.data, fm.missing_mask, ctx, wmod, fp, want_tape=False)
        return 0.5 * float((o**2).sum())

    eps = 1e-6
    fd_list, an_list = [], []
    mask = ctx.plan.stage_mask()
    for _ in range(probes):
        field = tol_fields[int(rng.integers(0, len(tol_fields)))]
        if field == "stage":
            f = int(rng.integers(0, ctx.n_searched))
            p = int(rng.integers(0, ctx.plan.n_positions))
            valid = np.flatnonzero(mask[p])
            j = int(valid[rng.integers(0, len(valid))])
            loc = (f, p, j)
        elif field == "impute":
            loc = (int(rng.integers(0, ctx.n_numeric)), int(rng.integers(0, 3)))
        else:  # order
            f = int(rng.integers(0, ctx.n_searched))
            loc = (f, int(rng.integers(0, ctx.plan.n_positions)), int(rng.integers(0, ctx.plan.n_positions)))
        wp, wm = w.copy(), w.copy()
        getattr(wp, field)[loc] += eps
        getattr(wm, field)[loc] -= eps
        fd_list.append((loss_at(wp) - loss_at(wm)) / (2 * eps))
        an_list.append(getattr(grads, field)[loc])
    return vec_rel_err(np.array(fd_list), np.array(an_list))


def test_criterion_4b_pipeline_weight_gradients():
    rng = np.random.default_rng(42)
    # smooth case: identity/affine operators only
    data = rng.normal(size=(25, 3)) * np.array([1.0, 12.0, 0.3])
    data[rng.random((25, 3)) < 0.2] = np.nan
    fm = make_numeric_fm(data)
    plan = make_plan(affine_catalog(), "fix")
    ctx = PipelineContext.for_matrix(plan, fm)
    w = MixWeights(
        impute=masked_softmax(rng.normal(size=(3, 3))),
        stage=masked_softmax(rng.normal(size=(3, plan.n_positions, plan.max_ops)), plan.stage_mask()),
        group=np.zeros((0, 2)),
    )
    smooth_err = _pipeline_fd_err(ctx, fm, w, ("stage", "impute"), rng)

    # clipped case: winsorizers active, probes away from the clip kinks
    cat = build_catalog(CatalogConfig(bins=()))
    plan2 = make_plan(cat, "flex")
    data2 = rng.normal(size=(30, 2)) * np.array([1.0, 8.0])
    fm2 = make_numeric_fm(data2)
    ctx2 = PipelineContext.for_matrix(plan2, fm2)
    from prepsearch.relax import doubly_stochastic_from_potentials

    w2 = MixWeights(
        impute=masked_softmax(rng.normal(size=(2, 3))),
        stage=masked_softmax(rng.normal(size=(2, plan2.n_positions, plan2.max_ops)), plan2.stage_mask()),
        group=np.zeros((0, 2)),
        order=doubly_stochastic_from_potentials(rng.normal(size=(2, 3, 3)) * 0.5),
    )
    clipped_err = _pipeline_fd_err(ctx2, fm2, w2, ("stage", "impute", "order"), rng)
    ok = smooth_err < 1e-4 and clipped_err < 1e-2
    report(4, "gradients (b: pipeline weights)", ok,
           f"smooth {smooth_err:.1e} (<1e-4), clipped {clipped_err:.1e} (<1e-2)")
    assert smooth_err < 1e-4
    assert clipped_err < 1e-2


def test_criterion_4c_end_to_end_hypergradient():
    # 2 features, 2 stages (impute + normalize), 2 operators per stage; no
    # missing values, so refitting inside the finite-difference oracle has no
    # first-order effect and the comparison isolates the chain rule
    rng = np.random.default_rng(43)
    cat = build_catalog(CatalogConfig(impute_ops=("mean", "median"),
                                      normalize_ops=("standard",),
                                      zscore_ks=(), mad_ks=(), iqr_ks=(), bins=()))
    cat.ops = {"impute": cat.ops["impute"], "normalize": cat.ops["normalize"]}
    cat.types = ("impute", "normalize")
    data_t = rng.normal(size=(30, 2)) * np.array([2.0, 5.0]) + 1.0
    data_v = rng.normal(size=(20, 2)) * np.array([2.0, 5.0]) + 1.0
    fm_t = make_numeric_fm(data_t, labels=rng.integers(0, 2, size=30))
    fm_v = make_numeric_fm(data_v, labels=rng.integers(0, 2, size=20))
    plan = make_plan(cat, "fix")
    ctx = PipelineContext.for_matrix(plan, fm_t)
    config = SearchConfig(mode="fix", epochs=1, batch_size=30, seed=0, lr_model=0.2)
    params = init_params(ctx, config)
    params.impute_logits += rng.normal(size=params.impute_logits.shape) * 0.4
    params.stage_logits += rng.normal(size=params.stage_logits.shape) * 0.4
    model = LogisticModel(rng.normal(size=(2, 2)) * 0.3, rng.normal(size=2) * 0.1)

    def val_loss_at(p):
        weights, _ = derive_weights(p, ctx, config)
        fp = fit_stagewise(fm_t.data, fm_t.missing_mask, ctx, weights)
        xs_t, _ = forward(fm_t.data, fm_t.missing_mask, ctx, weights, fp, want_tape=False)
        _, grads, _ = model.loss_and_grads(xs_t, fm_t.labels)
        looked = virtual_step(model, grads, config.lr_model)
        xs_v, _ = forward(fm_v.data, fm_v.missing_mask, ctx, weights, fp, want_tape=False)
        return looked.forward_loss(xs_v, fm_v.labels)[0]

    weights, dtape = derive_weights(params, ctx, config)
    fp = fit_stagewise(fm_t.data, fm_t.missing_mask, ctx, weights)
    xs_t, tape_t = forward(fm_t.data, fm_t.missing_mask, ctx, weights, fp)
    xs_v, tape_v = forward(fm_v.data, fm_v.missing_mask, ctx, weights, fp)
    hg = hypergradient(model, xs_t, fm_t.labels, tape_t, xs_v, fm_v.labels, tape_v,
                       config.lr_model, config.hvp_step, PassCounts())
    an = chain_to_logits(params, dtape, hg.pipe)

    eps = 1e-5
    fd_imp = np.zeros_like(params.impute_logits)
    for f in range(2):
        for j in range(2):
            pp, pm = params.copy(), params.copy()
            pp.impute_logits[f, j] += eps
            pm.impute_logits[f, j] -= eps
            fd_imp[f, j] = (val_loss_at(pp) - val_loss_at(pm)) / (2 * eps)
    fd_stage = np.zeros_like(params.stage_logits)
    for f in range(2):
        for j in range(2):
            pp, pm = params.copy(), params.copy()
            pp.stage_logits[f, 0, j] += eps
            pm.stage_logits[f, 0, j] -= eps
            fd_stage[f, 0, j] = (val_loss_at(pp) - val_loss_at(pm)) / (2 * eps)
    fd = np.concatenate([fd_imp.ravel(), fd_stage.ravel()])
    got = np.concatenate([an[0].ravel(), an[1].ravel()])
    err = vec_rel_err(fd, got)
    ok = err < 1e-2
    report(4, "gradients (c: end-to-end)", ok, f"rel err {err:.1e} (<1e-2)")
    assert ok


# ---------------------------------------------------------------------------
# Criterion 5: finite-difference mixed-term fidelity on a quadratic
# ---------------------------------------------------------------------------


def test_criterion_5_mixed_term_quadratic():
    class Toy:
        def __init__(self, w):
            self.w = w

        def stepped(self, grads, lr):
            return Toy(self.w - lr * grads[0])

    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(500 + seed)
        B = rng.normal(size=(5, 4))
        w = rng.normal(size=5)
        g_val = rng.normal(size=5)
        est = fd_mixed_term(Toy(w), [g_val], lambda m: [B.T @ m.w], hvp_step=0.01)
        exact = B.T @ g_val
        worst = max(worst, vec_rel_err(exact, est[0]))
    ok = worst < 1e-2
    report(5, "mixed-term fidelity (quadratic)", ok, f"max rel err {worst:.1e} over 20 seeds")
    assert ok


# ---------------------------------------------------------------------------
# Criteria 6-8: synthetic benchmark matrix
# ---------------------------------------------------------------------------

SEEDS = (0, 1, 2, 3, 4)
OUTLIER_RATES = (0.0, 0.0, 0.0, 0.0, 0.0, 0.25, 0.25, 0.25, 0.25, 0.25)


def bench_spec(seed: int) -> SynthSpec:
    return SynthSpec(
        n_rows=2000,
        n_features=10,
        n_classes=2,
        class_sep=3.0,
        missing_rate=0.2,
        scale_multipliers=(1000.0,),
        outlier_rate=OUTLIER_RATES,
        outlier_magnitude=12.0,
        seed=seed,
    )


def bench_config(seed: int, ablation=None) -> SearchConfig:
    return SearchConfig(
        mode="fix",
        ablation=ablation,
        epochs=150,
        batch_size=512,
        seed=seed,
        lr_pipeline=0.05,
        lr_model=0.03,
    )


@dataclass
class SeedRuns:
    clean: object
    splits: tuple
    fms: tuple
    default: object
    fix: object
    rs: object
    shared: object
    train_only: object
    wall_core: float  # default + fix + rs only (criterion 6 scope)


@pytest.fixture(scope="module")
def benchmark():
    runs = []
    for seed in SEEDS:
        table, clean = generate(bench_spec(seed))
        splits = split_indices(table.row_count, SplitSpec(seed=seed))
        tr, va, te = split(table, SplitSpec(seed=seed))
        fms = encode(tr, va, te)[:3]
        t0 = time.perf_counter()
        d = run_default(bench_config(seed), *fms)
        f = run_search(bench_config(seed), *fms)
        r = random_search(bench_config(seed), *fms, n_trials=5)
        wall_core = time.perf_counter() - t0
        sh = run_search(bench_config(seed, "no-feature-wise"), *fms)
        to = run_search(bench_config(seed, "train-only"), *fms)
        runs.append(SeedRuns(clean, splits, fms, d, f, r, sh, to, wall_core))
    return runs


def _impute_rmse_for(run: SeedRuns, method: str) -> float:
    """Imputation RMSE against ground truth across all three splits."""
    imputed, clean, masks = [], [], []
    cfg = bench_config(0)
    for fm, idx in zip(run.fms, run.splits):
        if method == "fix":
            ctx = PipelineContext.for_matrix(run.fix.plan, run.fms[0])
            x1 = impute_only(run.fix.best_params, ctx, cfg, run.fms[0], fm)
        elif method == "default":
            imputer = fit_many([OperatorSpec("impute", "mean")], run.fms[0].data, allow_missing=True)[0]
            x1 = imputer.apply(fm.data)
        else:  # best random-search trial
            name = run.rs.best.choices["impute"]
            imputer = fit_many([OperatorSpec("impute", name)], run.fms[0].data, allow_missing=True)[0]
            x1 = imputer.apply(fm.data)
        imputed.append(x1)
        clean.append(run.clean.data[idx])
        masks.append(fm.missing_mask)
    return imputation_rmse(np.concatenate(imputed), np.concatenate(clean), np.concatenate(masks))


def test_criterion_6_synthetic_benchmark(benchmark):
    m_def = float(np.mean([r.default.test_acc for r in benchmark]))
    m_fix = float(np.mean([r.fix.test_acc for r in benchmark]))
    m_rs = float(np.mean([r.rs.best.test_acc for r in benchmark]))
    wall = sum(r.wall_core for r in benchmark)
    gap_def = 100 * (m_fix - m_def)
    gap_rs = 100 * (m_fix - m_rs)

    rmse = {m: float(np.mean([_impute_rmse_for(r, m) for r in benchmark]))
            for m in ("default", "fix", "rs")}
    best_rmse = min(rmse, key=rmse.get)
    # informational (recorded, not asserted): the accuracy winner need not
    # have the best imputation quality
    print(
        f"  [info] imputation RMSE: default={rmse['default']:.3f} "
        f"fix={rmse['fix']:.3f} rs={rmse['rs']:.3f} (best quality: {best_rmse}; "
        f"accuracy winner: fix)"
    )

    ok = gap_def >= 2.0 and gap_rs >= -1.0 and wall < 600.0
    report(6, "end-to-end synthetic", ok,
           f"fix {m_fix:.4f} vs default {m_def:.4f} ({gap_def:+.2f}pts, need >=+2), "
           f"vs rs5 {m_rs:.4f} ({gap_rs:+.2f}pts, need >=-1), core wall {wall:.0f}s (<600)")
    assert gap_def >= 2.0
    assert gap_rs >= -1.0
    assert wall < 600.0


def test_criterion_7_cost_accounting(benchmark):
    exact = True
    for r in benchmark:
        f = r.fix
        exact &= f.counts.fit == f.n_iterations
        exact &= f.counts.forward == 4 * f.n_iterations
        exact &= f.counts.backward == 4 * f.n_iterations
        d = r.default
        exact &= d.counts.forward == d.n_iterations
        exact &= d.counts.backward == d.n_iterations
    extra_f = benchmark[0].fix.counts.forward // benchmark[0].fix.n_iterations - 1
    extra_b = benchmark[0].fix.counts.backward // benchmark[0].fix.n_iterations - 1

    ratio = float(np.mean([r.fix.wall_ms for r in benchmark]) /
                  np.mean([r.default.wall_ms for r in benchmark]))
    ok = exact and extra_f == 3 and extra_b == 3 and ratio <= 15.0
    report(7, "cost accounting", ok,
           f"extra passes/iter forward={extra_f} backward={extra_b} (need 3/3), "
           f"wall ratio {ratio:.1f}x (need <=15x)")
    assert exact and extra_f == 3 and extra_b == 3
    # Known-red on this substrate: the bound presumes a baseline that carries
    # ML-framework per-op overhead (the reference point is ~10x for logistic
    # regression). Here plain training is a bare two-matmul numpy loop
    # (~0.2 ms/iteration), while the faithful search pays 22 operator fits
    # plus centered-difference probes every iteration (~7 ms/iteration), so
    # the honest ratio lands near 35x. The pass-count half of the criterion
    # (the substantive algorithmic claim) holds exactly.
    assert ratio <= 15.0


def test_criterion_8_ablation_directions(benchmark):
    m_fix = float(np.mean([r.fix.test_acc for r in benchmark]))
    m_shared = float(np.mean([r.shared.test_acc for r in benchmark]))
    m_tonly = float(np.mean([r.train_only.test_acc for r in benchmark]))
    gap_shared = 100 * (m_fix - m_shared)
    gap_tonly = 100 * (m_fix - m_tonly)
    ok = gap_shared >= -0.5 and gap_tonly >= -0.5
    report(8, "ablation directions", ok,
           f"feature-wise vs shared {gap_shared:+.2f}pts (need >=-0.5), "
           f"bi-level vs train-only {gap_tonly:+.2f}pts (need >=-0.5)")
    assert gap_shared >= -0.5
    # Known-red on this task family: with i.i.d. synthetic splits and a
    # low-capacity model there is nothing for the validation objective to
    # protect against, so the one-level objective trains with cleaner
    # gradients and nets about +1pt. The reference results show the same
    # direction on a third of their datasets (train-opt >= bi-level on 6/18),
    # so the -0.5 bound is tighter than this regime delivers.
    assert gap_tonly >= -0.5


# ---------------------------------------------------------------------------
# Criterion 9: byte-identical reruns
# ---------------------------------------------------------------------------


def test_criterion_9_determinism(tmp_path):
    from prepsearch.cli import RunConfig, run

    outs = []
    for name in ("a", "b"):
        cfg = RunConfig(
            synth="n=400,d=5,k=2,sep=2.5,missing=0.2,scale0=1000,seed=3",
            method="diffprep-fix",
            epochs=4,
            batch_size=128,
            seed=7,
            out=str(tmp_path / name),
        )
        assert run(cfg) == 0
        outs.append(tmp_path / name)
    same = all(
        (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes()
        for f in ("metrics.jsonl", "pipeline.json")
    )
    report(9, "determinism (byte-identical reruns)", same)
    assert same
