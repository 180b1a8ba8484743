"""Acquisition scores over a pool of predictive matrices.

Four strategies are supported:

passive
    i.i.d. uniform(0, 1) scores.
entropy
    Shannon entropy of the posterior-mean class distribution.
curiosity
    BALD mutual information between the label and the weights,
    ``H(mean) - mean_m H(row_m)``, clamped at zero.
goal
    Fast goal-driven score: a second-order expansion of the total mutual
    information between a pool item's label and the labels of a fixed test
    domain.  Per item it reduces to ``0.5 * (<pool_vec, test_vec> - T)`` where
    both vectors have length ``M**2`` and ``test_vec`` is shared by the pool.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .bayes_mlp import PredictiveBatch, PredictiveMatrix

STRATEGIES = ("passive", "entropy", "curiosity", "goal")
PROB_FLOOR = 1e-12
ENTROPY_FLOOR = 1e-12
GOAL_CHUNK = 256


def entropy(p, axis=-1) -> np.ndarray:
    """Natural-log Shannon entropy along ``axis`` with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=float)
    logp = np.log(np.where(p > ENTROPY_FLOOR, p, 1.0))
    return -np.sum(p * logp, axis=axis)


def _probs(pm) -> np.ndarray:
    if isinstance(pm, (PredictiveMatrix, PredictiveBatch)):
        return pm.probs
    return np.asarray(pm, dtype=float)


@dataclass
class ScoreVector:
    strategy: str
    ids: np.ndarray
    scores: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if len(self.ids) != len(self.scores):
            raise ValueError("one score per id required")

    def as_dict(self) -> dict:
        return {int(i): float(s) for i, s in zip(self.ids, self.scores)}

    def write(self, path) -> None:
        """Two-column table preceded by ``# key=value`` header lines."""
        with open(path, "w", newline="") as fh:
            fh.write(f"# strategy={self.strategy}\n")
            for key in sorted(self.meta):
                fh.write(f"# {key}={self.meta[key]}\n")
            w = csv.writer(fh)
            w.writerow(["item_id", "score"])
            for i, s in zip(self.ids, self.scores):
                w.writerow([int(i), repr(float(s))])

    @classmethod
    def read(cls, path) -> "ScoreVector":
        meta, ids, scores = {}, [], []
        lines = Path(path).read_text().splitlines()
        body = []
        for line in lines:
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            else:
                body.append(line)
        rows = list(csv.reader(body))
        if not rows or rows[0] != ["item_id", "score"]:
            raise ValueError(f"{path}: missing item_id,score header")
        for row in rows[1:]:
            ids.append(int(row[0]))
            scores.append(float(row[1]))
        strategy = meta.pop("strategy")
        return cls(strategy, np.array(ids), np.array(scores), meta)


def score_passive(ids, seed: int) -> ScoreVector:
    ids = np.asarray(ids)
    if ids.size == 0:
        raise ValueError("empty pool")
    rng = np.random.default_rng(seed)
    return ScoreVector("passive", ids, rng.random(ids.size), {"seed": seed})


def score_entropy(pm) -> float | np.ndarray:
    """Entropy of the posterior mean.  Works on one ``(M, J)`` matrix or a stack."""
    return entropy(_probs(pm).mean(axis=-2))


def score_curiosity(pm, clamp: bool = True) -> float | np.ndarray:
    """BALD score ``H(mean) - mean_m H(row_m)``."""
    p = _probs(pm)
    mi = entropy(p.mean(axis=-2)) - entropy(p).mean(axis=-1)
    return np.maximum(mi, 0.0) if clamp else mi


@dataclass(frozen=True, eq=False)
class TestSummaryVector:
    """Pre-aggregated test-domain factor of the fast goal score.

    Entry ``(m, m')`` of ``matrix`` is
    ``sum_t sum_a P_t[m,a] P_t[m',a] / mean_t[a]``.
    """

    matrix: np.ndarray
    T: int
    mask_seed: int
    floored: int = 0

    __test__ = False

    @property
    def M(self) -> int:
        return self.matrix.shape[0]

    @property
    def vector(self) -> np.ndarray:
        return self.matrix.ravel()


def _floored_mean(p: np.ndarray):
    mean = p.mean(axis=-2)
    low = mean < PROB_FLOOR
    return np.where(low, PROB_FLOOR, mean), int(low.sum())


def _seed_and_probs(pms):
    if isinstance(pms, PredictiveBatch):
        return pms.mask_seed, pms.probs
    if isinstance(pms, PredictiveMatrix):
        return pms.mask_seed, pms.probs[None]
    batch = PredictiveBatch.from_matrices(list(pms))
    return batch.mask_seed, batch.probs


def build_test_summary(test_pms) -> TestSummaryVector:
    """Aggregate the test-domain predictive matrices into one ``M x M`` factor.

    ``test_pms`` is a :class:`PredictiveBatch` or a sequence of
    :class:`PredictiveMatrix` sharing ``M`` and the mask seed.
    """
    seed, p = _seed_and_probs(test_pms)
    if p.shape[0] == 0:
        raise ValueError("empty test domain")
    T, M, _ = p.shape
    mean, floored = _floored_mean(p)
    acc = np.zeros((M, M))
    for start in range(0, T, GOAL_CHUNK):
        blk = p[start:start + GOAL_CHUNK]
        scaled = blk / np.sqrt(mean[start:start + GOAL_CHUNK])[:, None, :]
        acc += np.einsum("tma,tna->mn", scaled, scaled)
    return TestSummaryVector(acc, T, seed, floored)


def _check_compatible(seed, M, ts: TestSummaryVector):
    if M != ts.M:
        raise ValueError(f"pool uses M={M} draws, test summary M={ts.M}")
    if seed != ts.mask_seed:
        raise ValueError(f"pool mask seed {seed} differs from test summary seed {ts.mask_seed}")


def goal_scores(probs: np.ndarray, ts: TestSummaryVector, chunk: int = GOAL_CHUNK):
    """Fast goal scores for a ``(U, M, J)`` stack; returns ``(scores, n_floored)``.

    Each score is ``0.5 * (pool . test / M^2 - T)``; the per-item ``M x M``
    pool factor only exists for one chunk at a time.
    """
    U, M, _ = probs.shape
    out = np.empty(U)
    floored = 0
    test_vec = ts.vector
    for start in range(0, U, chunk):
        blk = probs[start:start + chunk]
        mean, n_low = _floored_mean(blk)
        floored += n_low
        scaled = blk / np.sqrt(mean)[:, None, :]
        pool_vecs = np.einsum("uma,una->umn", scaled, scaled).reshape(len(blk), M * M) / (M * M)
        out[start:start + chunk] = 0.5 * (pool_vecs @ test_vec - ts.T)
    return out, floored


def score_goal_fast(pm, ts: TestSummaryVector) -> float:
    seed, p = _seed_and_probs(pm)
    _check_compatible(seed, p.shape[1], ts)
    scores, _ = goal_scores(p, ts)
    return float(scores[0])


def score_pool(strategy: str, pool, ts: TestSummaryVector | None = None,
               seed: int | None = None) -> ScoreVector:
    """Score every item of ``pool`` under ``strategy``.

    ``pool`` is a :class:`PredictiveBatch` or a sequence of
    :class:`PredictiveMatrix`; for ``passive`` a plain id sequence is accepted
    as well and ``seed`` is required.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    if (strategy == "goal") != (ts is not None):
        raise ValueError("a test summary is required for goal scoring and only for it")
    if strategy == "passive":
        if seed is None:
            raise ValueError("passive scoring needs a seed")
        if isinstance(pool, PredictiveBatch):
            ids = pool.ids
        else:
            ids = [pm.item_id if isinstance(pm, PredictiveMatrix) else int(pm) for pm in pool]
        return score_passive(ids, seed)

    if not isinstance(pool, PredictiveBatch):
        pool = PredictiveBatch.from_matrices(list(pool))
    meta = {"M": pool.M, "mask_seed": pool.mask_seed}
    if strategy == "entropy":
        scores = score_entropy(pool)
    elif strategy == "curiosity":
        scores = score_curiosity(pool)
    else:
        _check_compatible(pool.mask_seed, pool.M, ts)
        scores, floored = goal_scores(pool.probs, ts)
        meta.update(T=ts.T, floored=floored + ts.floored)
    return ScoreVector(strategy, np.asarray(pool.ids), np.asarray(scores, dtype=float), meta)


def score_batches(strategy: str, pool: PredictiveBatch, test: PredictiveBatch | None = None,
                  seed: int | None = None) -> ScoreVector:
    """Convenience wrapper that builds the test summary when needed."""
    ts = build_test_summary(test) if strategy == "goal" else None
    return score_pool(strategy, pool, ts, seed)

