"""Brute-force reference computations for validating the fast scores.

Nothing here is used by the active-learning loop itself.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bayes_mlp import PredictiveBatch, PredictiveMatrix

JOINT_SKIP = 1e-15
MAX_WORK = 10**7


@dataclass(frozen=True, eq=False)
class JointMatrix:
    """``J x J`` joint distribution of a pool label (rows) and a test label (columns)."""

    probs: np.ndarray
    pool_id: int | None = None
    test_id: int | None = None


def _unpack(pm):
    if isinstance(pm, PredictiveMatrix):
        return pm.probs, pm.mask_seed, pm.item_id
    return np.asarray(pm, dtype=float), None, None


def _unpack_tests(test_pms):
    if isinstance(test_pms, PredictiveBatch):
        return test_pms.probs, {test_pms.mask_seed}
    if isinstance(test_pms, np.ndarray):
        return (test_pms[None] if test_pms.ndim == 2 else test_pms), {None}
    items = [_unpack(pm) for pm in test_pms]
    if not items:
        raise ValueError("empty test set")
    shapes = {p.shape for p, _, _ in items}
    if len(shapes) != 1:
        raise ValueError(f"test matrices disagree on shape: {shapes}")
    return np.stack([p for p, _, _ in items]), {s for _, s, _ in items}


def _check_shared(pool_p, pool_seed, test_p, test_seeds):
    if pool_p.shape[0] != test_p.shape[-2]:
        raise ValueError(f"pool has M={pool_p.shape[0]} draws, tests have M={test_p.shape[-2]}")
    if pool_p.shape[1] != test_p.shape[-1]:
        raise ValueError("pool and tests disagree on the number of classes")
    seeds = {s for s in test_seeds | {pool_seed} if s is not None}
    if len(seeds) > 1:
        raise ValueError(f"pool and test draws come from different mask seeds: {sorted(seeds)}")


def joint_exact(pool_pm, test_pm) -> JointMatrix:
    """``P(a, a') = (1/M) sum_m P(a | w_m) P'(a' | w_m)`` by explicit summation."""
    p1, s1, id1 = _unpack(pool_pm)
    p2, s2, id2 = _unpack(test_pm)
    _check_shared(p1, s1, p2[None], {s2})
    M, J = p1.shape
    joint = np.zeros((J, J))
    for m in range(M):
        joint += np.outer(p1[m], p2[m])
    return JointMatrix(joint / M, id1, id2)


def mi_exact(pool_pm, test_pms) -> float:
    """Total mutual information ``sum_t I(A; A'_t)`` under the Monte-Carlo joint."""
    p1, s1, _ = _unpack(pool_pm)
    p2, seeds = _unpack_tests(test_pms)
    _check_shared(p1, s1, p2, seeds)
    T, M, J = p2.shape
    if T * J * J > MAX_WORK:
        raise ValueError(f"exact oracle limited to T*J^2 <= {MAX_WORK}, got {T * J * J}")
    joint = np.einsum("ma,tmb->tab", p1, p2) / M
    indep = p1.mean(axis=0)[None, :, None] * p2.mean(axis=1)[:, None, :]
    keep = joint > JOINT_SKIP
    terms = joint[keep] * np.log(joint[keep] / indep[keep])
    return float(np.sum(terms))


def mi_matrix_form(pool_pm, test_pms) -> float:
    """The same total mutual information assembled from the matrix rewrite.

    Per test item: ``Sum{ (M1^T M2 / M) o log(D1^-1 (M1^T M2 / M) D2^-1) }``
    with ``D`` the diagonal matrices of posterior means.
    """
    M1, s1, _ = _unpack(pool_pm)
    tests, seeds = _unpack_tests(test_pms)
    _check_shared(M1, s1, tests, seeds)
    M = M1.shape[0]
    D1_inv = np.diag(1.0 / M1.mean(axis=0))
    total = 0.0
    for M2 in tests:
        D2_inv = np.diag(1.0 / M2.mean(axis=0))
        P = M1.T @ M2 / M
        keep = P > JOINT_SKIP
        arg = D1_inv @ P @ D2_inv
        total += float(np.sum(P[keep] * np.log(arg[keep])))
    return total


def goal_taylor_trace(pool_pm, test_pms) -> float:
    """Second-order goal score through the trace identity.

    ``sum_t -1/2 + Tr[M1 D1^-1 M1^T M2 D2^-1 M2^T] / (2 M^2)``; an independent
    route to the value the fast dot-product scorer computes.
    """
    M1, s1, _ = _unpack(pool_pm)
    tests, seeds = _unpack_tests(test_pms)
    _check_shared(M1, s1, tests, seeds)
    M = M1.shape[0]
    A = M1 @ np.diag(1.0 / M1.mean(axis=0)) @ M1.T
    total = 0.0
    for M2 in tests:
        B = M2 @ np.diag(1.0 / M2.mean(axis=0)) @ M2.T
        total += -0.5 + np.trace(A @ B) / (2 * M * M)
    return float(total)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman_rho(a, b) -> float | None:
    """Spearman rank correlation with average ranks for ties.

    Returns ``None`` when either input is constant (correlation undefined).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1 or a.size < 2:
        raise ValueError("need two equal-length 1-D score vectors of length >= 2")
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    if denom == 0:
        return None
    return float(np.clip(np.sum(ra * rb) / denom, -1.0, 1.0))
