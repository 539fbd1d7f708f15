"""Continuous relaxation of discrete pipeline choices.

Operator selection is a row-stochastic matrix obtained from logits through a
masked, numerically stabilized softmax. Transformation order is a doubly
stochastic matrix obtained from unconstrained potentials through exp followed
by Sinkhorn normalization (alternating column/row normalization). Gradients
flow through the normalization steps actually executed, so both maps come
with explicit vector-Jacobian products.
"""
from __future__ import annotations

import numpy as np


def masked_softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax over the last axis, restricted to valid slots.

    Masked slots get exactly 0. Stabilized by subtracting the row max of the
    valid entries, which leaves the result unchanged (shift invariance).
    """
    z = np.asarray(logits, dtype=np.float64)
    if mask is None:
        m = np.ones(z.shape, dtype=bool)
    else:
        m = np.broadcast_to(np.asarray(mask, dtype=bool), z.shape)
    if not m.any(axis=-1).all():
        raise ValueError("every row needs at least one valid slot")
    neg = np.where(m, z, -np.inf)
    shifted = neg - neg.max(axis=-1, keepdims=True)
    expz = np.where(m, np.exp(shifted), 0.0)
    return expz / expz.sum(axis=-1, keepdims=True)


def masked_softmax_vjp(weights: np.ndarray, d_weights: np.ndarray) -> np.ndarray:
    """Backprop through the row softmax: d_logits = w * (g - sum_k w_k g_k).

    Masked slots have weight 0 and therefore gradient exactly 0.
    """
    inner = (weights * d_weights).sum(axis=-1, keepdims=True)
    return weights * (d_weights - inner)


def sinkhorn(x: np.ndarray, tol: float = 1e-6, max_iters: int = 100) -> np.ndarray:
    out, _ = sinkhorn_unrolled(x, tol=tol, max_iters=max_iters)
    return out


def sinkhorn_unrolled(
    x: np.ndarray, tol: float = 1e-6, max_iters: int = 100
) -> tuple[np.ndarray, list[np.ndarray]]:
    """Alternate column then row normalization until both marginals are
    within tol of 1, or max_iters full iterations. Returns the final matrix
    and the intermediate inputs of each executed half-step (the tape for
    sinkhorn_vjp).

    Works on one square matrix (s, s) or a stack (..., s, s).
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    a = np.asarray(x, dtype=np.float64)
    if a.shape[-1] != a.shape[-2]:
        raise ValueError(f"expected square matrices, got shape {a.shape}")
    if (a <= 0).any():
        raise ValueError("Sinkhorn normalization requires strictly positive entries")
    steps: list[np.ndarray] = []
    for _ in range(max_iters):
        steps.append(a)
        a = a / a.sum(axis=-2, keepdims=True)  # column normalization
        steps.append(a)
        a = a / a.sum(axis=-1, keepdims=True)  # row normalization
        col_err = np.abs(a.sum(axis=-2) - 1.0).max()
        row_err = np.abs(a.sum(axis=-1) - 1.0).max()
        if col_err < tol and row_err < tol:
            break
    return a, steps


def sinkhorn_vjp(steps: list[np.ndarray], d_out: np.ndarray) -> np.ndarray:
    """Backprop through the recorded normalization half-steps.

    For row normalization y_ij = x_ij / r_i: dx_ij = (g_ij - sum_k g_ik y_ik) / r_i,
    and symmetrically over columns.
    """
    g = np.asarray(d_out, dtype=np.float64)
    for k in range(len(steps) - 1, -1, -1):
        x = steps[k]
        if k % 2 == 1:  # row normalization consumed steps[k]
            r = x.sum(axis=-1, keepdims=True)
            y = x / r
            g = (g - (g * y).sum(axis=-1, keepdims=True)) / r
        else:  # column normalization consumed steps[k]
            c = x.sum(axis=-2, keepdims=True)
            y = x / c
            g = (g - (g * y).sum(axis=-2, keepdims=True)) / c
    return g


def doubly_stochastic_from_potentials(
    potentials: np.ndarray, tol: float = 1e-6, max_iters: int = 100
) -> np.ndarray:
    out, _ = doubly_stochastic_unrolled(potentials, tol=tol, max_iters=max_iters)
    return out


def doubly_stochastic_unrolled(
    potentials: np.ndarray, tol: float = 1e-6, max_iters: int = 100
) -> tuple[np.ndarray, dict]:
    """exp then Sinkhorn. The global max of the potentials is subtracted
    before exponentiation as overflow protection; Sinkhorn scale invariance
    makes both the value and the gradient exact under that shift."""
    p = np.asarray(potentials, dtype=np.float64)
    if not np.isfinite(p).all():
        raise ValueError("order potentials must be finite")
    if p.size == 0:
        return p.copy(), {"theta": p.copy(), "steps": []}
    # floor saturated entries at the smallest positive normal so extreme
    # potential spreads cannot underflow Sinkhorn's positivity requirement
    theta = np.maximum(np.exp(p - p.max()), np.finfo(np.float64).tiny)
    out, steps = sinkhorn_unrolled(theta, tol=tol, max_iters=max_iters)
    return out, {"theta": theta, "steps": steps}


def doubly_stochastic_vjp(tape: dict, d_out: np.ndarray) -> np.ndarray:
    d_theta = sinkhorn_vjp(tape["steps"], d_out)
    return d_theta * tape["theta"]


def export_discrete(
    op_weights: np.ndarray,
    op_names: list[list[str]],
    order_weights: np.ndarray | None = None,
    type_names: list[str] | None = None,
) -> dict:
    """Harden one feature's continuous weights into an inspectable pipeline.

    Order: row-by-row argmax of the order weights with already-used columns
    excluded (ties to the lowest index). Operator per stage: argmax of the
    stage's selection row. Inspection-only; the search itself always runs the
    continuous mixtures.
    """
    w = np.asarray(op_weights, dtype=np.float64)
    n_stages = w.shape[0]
    if order_weights is None:
        order = list(range(n_stages))
    else:
        a = np.asarray(order_weights, dtype=np.float64)
        order = []
        used: set[int] = set()
        for i in range(a.shape[0]):
            row = [(-(a[i, j]), j) for j in range(a.shape[1]) if j not in used]
            row.sort()
            pick = row[0][1]
            used.add(pick)
            order.append(pick)
    stages = []
    for position, type_idx in enumerate(order):
        names = op_names[type_idx]
        row = w[type_idx, : len(names)]
        j = int(np.argmax(row))
        stages.append(
            {
                "position": position,
                "tf_type": type_names[type_idx] if type_names else str(type_idx),
                "operator": names[j],
                "weight": float(row[j]),
            }
        )
    return {"stages": stages}
