"""Pool-based active-learning loop.

Each iteration: draw ``M`` weight masks, predict on pool (and test domain
for goal scoring), score, take the top ``G`` items, reveal their labels,
add them to the training set and retrain for ``K`` epochs.
"""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import bayes_mlp as bm
from .datasets import Dataset, DatasetSplit
from .scoring import STRATEGIES, ScoreVector, build_test_summary, score_pool

logger = logging.getLogger(__name__)

RETRAIN_POLICIES = ("auto", "warm", "scratch")


def derive_seed(root: int, *keys: int) -> int:
    """Deterministic child seed from a root seed and integer keys."""
    return int(np.random.SeedSequence([int(root), *map(int, keys)]).generate_state(1)[0])


@dataclass(frozen=True)
class ALConfig:
    strategy: str = "passive"
    L: int = 20
    M: int = 50
    G: int = 100
    K: int = 20
    lr: float = 0.1
    batch_size: int = 32
    hidden: tuple = (64, 64)
    l2: float = 0.0
    init_scale: float = 1.0
    retrain: str = "auto"
    model_seed: int = 0
    mask_seed: int = 1
    selection_seed: int = 2
    target_type: str | None = None
    eval_masks: int | None = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.retrain not in RETRAIN_POLICIES:
            raise ValueError(f"retrain must be one of {RETRAIN_POLICIES}")
        for name in ("L", "M", "G", "K", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be positive")

    @property
    def warm_start(self) -> bool:
        if self.retrain == "auto":
            return self.target_type is None
        return self.retrain == "warm"

    @classmethod
    def from_dict(cls, d: dict) -> "ALConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class IterationRecord:
    iteration: int
    train_size: int
    accuracy: float
    selected: tuple
    type_counts: dict
    score_ms: float
    floored: int
    mask_seed: int | None


@dataclass
class ExperimentLog:
    strategy: str
    split_fingerprint: str
    type_names: tuple
    records: list = field(default_factory=list)
    truncated: str | None = None

    def selected_ids(self) -> list[int]:
        return [i for r in self.records for i in r.selected]

    def curve(self) -> tuple[np.ndarray, np.ndarray]:
        """``(queries so far, accuracy)`` per record."""
        q = np.cumsum([len(r.selected) for r in self.records])
        return q, np.array([r.accuracy for r in self.records])

    def columns(self, wallclock: bool = True) -> list[str]:
        cols = ["iteration", "train_size", "accuracy"]
        if wallclock:
            cols.append("wallclock_score_ms")
        cols += ["n_selected", "floored"] + [f"count_{t}" for t in self.type_names]
        return cols

    def rows(self, wallclock: bool = True) -> list[list[str]]:
        out = []
        for r in self.records:
            row = [str(r.iteration), str(r.train_size), repr(float(r.accuracy))]
            if wallclock:
                row.append(f"{r.score_ms:.3f}")
            row += [str(len(r.selected)), str(r.floored)]
            row += [str(r.type_counts.get(t, 0)) for t in self.type_names]
            out.append(row)
        return out

    def to_csv(self, path, wallclock: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.columns(wallclock))
            w.writerows(self.rows(wallclock))

    def write_selected(self, path) -> None:
        """Sidecar file: one line per iteration, ``iteration: id id ...``."""
        with open(path, "w") as fh:
            for r in self.records:
                fh.write(f"{r.iteration}: {' '.join(str(i) for i in r.selected)}\n")

    def fingerprint_text(self) -> str:
        """Everything except wall-clock, as text; equal logs give equal text."""
        lines = [",".join(self.columns(False))] + [",".join(r) for r in self.rows(False)]
        lines += [f"{r.iteration}: {' '.join(map(str, r.selected))}" for r in self.records]
        lines.append(f"truncated={self.truncated}")
        return "\n".join(lines)


def select_top_g(scores: ScoreVector, G: int) -> list[int]:
    """Ids of the ``G`` highest scores; ties go to the smaller id."""
    if G < 1:
        raise ValueError("G must be >= 1")
    ids = np.asarray(scores.ids)
    if G >= len(ids):
        if G > len(ids):
            logger.info("G=%d exceeds pool of %d; taking the whole pool", G, len(ids))
        G = len(ids)
    order = np.lexsort((ids, -np.asarray(scores.scores)))
    return [int(i) for i in ids[order[:G]]]


class AnswerOracle:
    """The only path through which pool labels are revealed."""

    def __init__(self, dataset: Dataset, pool_ids):
        self.dataset = dataset
        self._remaining = set(int(i) for i in pool_ids)
        self.queried: list[int] = []

    def query_answers(self, ids) -> list[tuple[int, int]]:
        ids = [int(i) for i in ids]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate ids in one query")
        bad = [i for i in ids if i not in self._remaining]
        if bad:
            raise KeyError(f"ids not in the live pool (unknown or already queried): {bad[:5]}")
        if not ids:
            return []
        labels = self.dataset.labels_for(ids)
        self._remaining.difference_update(ids)
        self.queried.extend(ids)
        return list(zip(ids, (int(a) for a in labels)))


def evaluate(params: bm.ModelParams, X: np.ndarray, y: np.ndarray, M: int, seed: int) -> float:
    """Argmax accuracy of the posterior-mean prediction; ``y`` is 0-based."""
    if len(y) == 0:
        return float("nan")
    masks = bm.sample_masks(params, M, seed)
    batch = bm.predictive_batch(params, masks, np.arange(len(y)), X)
    pred = bm.posterior_mean(batch).argmax(axis=1)
    return float(np.mean(pred == y))


def _train(cfg: ALConfig, params, X, y, seed):
    return bm.train_epochs(params, X, y, cfg.K, cfg.lr, cfg.batch_size, seed, cfg.l2)


def run_experiment(cfg: ALConfig, split: DatasetSplit, dataset: Dataset,
                   return_model: bool = False):
    """Run the full loop and return its :class:`ExperimentLog`.

    With ``return_model=True`` returns ``(log, final_params)``.
    """
    if cfg.strategy == "goal" and len(split.test) == 0:
        raise ValueError("goal scoring needs a nonempty test domain")
    if len(split.initial) == 0:
        raise ValueError("empty initial training set")
    sizes = (dataset.n_features, *cfg.hidden, dataset.n_classes)
    eval_M = cfg.eval_masks or cfg.M

    train_ids = [int(i) for i in split.initial]
    X_train = dataset.features(train_ids)
    y_train = dataset.labels_for(train_ids) - 1
    X_eval = dataset.features(split.eval)
    y_eval = dataset.labels_for(split.eval) - 1
    X_test = dataset.features(split.test) if len(split.test) else None

    pool = np.array(split.pool, dtype=int)
    oracle = AnswerOracle(dataset, pool)

    params = bm.init_params(sizes, derive_seed(cfg.model_seed, 0), cfg.init_scale)
    params = _train(cfg, params, X_train, y_train, derive_seed(cfg.model_seed, 0, 1))
    log = ExperimentLog(cfg.strategy, split.fingerprint(), dataset.type_names)
    log.records.append(IterationRecord(
        0, len(train_ids), evaluate(params, X_eval, y_eval, eval_M, derive_seed(cfg.mask_seed, 0, 1)),
        (), {}, 0.0, 0, None))

    for it in range(1, cfg.L + 1):
        if pool.size == 0:
            log.truncated = f"pool exhausted before iteration {it}"
            logger.warning(log.truncated)
            break
        mask_seed = derive_seed(cfg.mask_seed, it)
        t0 = time.perf_counter()
        floored = 0
        if cfg.strategy == "passive":
            scores = score_pool("passive", pool, seed=derive_seed(cfg.selection_seed, it))
        else:
            masks = bm.sample_masks(params, cfg.M, mask_seed)
            pool_pm = bm.predictive_batch(params, masks, pool, dataset.features(pool))
            ts = None
            if cfg.strategy == "goal":
                ts = build_test_summary(bm.predictive_batch(params, masks, split.test, X_test))
            scores = score_pool(cfg.strategy, pool_pm, ts)
            floored = int(scores.meta.get("floored", 0))
        score_ms = 1000.0 * (time.perf_counter() - t0)

        chosen = select_top_g(scores, cfg.G)
        answers = oracle.query_answers(chosen)
        pool = pool[~np.isin(pool, chosen)]
        new_ids = [i for i, _ in answers]
        train_ids += new_ids
        X_train = np.vstack([X_train, dataset.features(new_ids)])
        y_train = np.concatenate([y_train, np.array([a for _, a in answers], dtype=int) - 1])

        if cfg.warm_start:
            start = params
        else:
            start = bm.init_params(sizes, derive_seed(cfg.model_seed, it), cfg.init_scale)
        params = _train(cfg, start, X_train, y_train, derive_seed(cfg.model_seed, it, 1))

        types = dataset.types_of(chosen)
        counts = {t: int(np.sum(types == t)) for t in dataset.type_names}
        acc = evaluate(params, X_eval, y_eval, eval_M, derive_seed(cfg.mask_seed, it, 1))
        log.records.append(IterationRecord(it, len(train_ids), acc, tuple(chosen), counts,
                                           score_ms, floored, mask_seed))
        logger.debug("%s it=%d train=%d acc=%.4f", cfg.strategy, it, len(train_ids), acc)
    return (log, params) if return_model else log


def overlap_matrix(logs: dict) -> tuple[list[str], np.ndarray]:
    """Percent of strategy ``i``'s selections also chosen by strategy ``j``.

    The diagonal is NaN (omitted).  ``logs`` maps strategy name to log.
    """
    names = list(logs)
    fps = {logs[n].split_fingerprint for n in names}
    lens = {len(logs[n].records) for n in names}
    if len(fps) != 1 or len(lens) != 1:
        raise ValueError("logs come from different splits or iteration counts")
    sets = {n: set(logs[n].selected_ids()) for n in names}
    out = np.full((len(names), len(names)), np.nan)
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            if i != j and sets[a]:
                out[i, j] = 100.0 * len(sets[a] & sets[b]) / len(sets[a])
    return names, out


def pairwise_overlap(a: ExperimentLog, b: ExperimentLog) -> float:
    sa, sb = set(a.selected_ids()), set(b.selected_ids())
    return 100.0 * len(sa & sb) / len(sa) if sa else float("nan")


def write_overlap_csv(names: Sequence[str], matrix: np.ndarray, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["strategy"] + list(names))
        for n, row in zip(names, matrix):
            w.writerow([n] + ["" if np.isnan(v) else f"{v:.4f}" for v in row])


def queries_to_reach(log: ExperimentLog, target: float) -> int | None:
    """Smallest cumulative query count at which accuracy reaches ``target``."""
    q, acc = log.curve()
    hit = np.flatnonzero(acc >= target)
    return int(q[hit[0]]) if hit.size else None


def binary_fraction(log: ExperimentLog, type_name: str, first: int, last: int) -> float:
    """Fraction of ``type_name`` items among selections in iterations ``first..last``."""
    num = den = 0
    for r in log.records:
        if first <= r.iteration <= last:
            num += r.type_counts.get(type_name, 0)
            den += len(r.selected)
    return num / den if den else float("nan")


def load_selected(path) -> list[list[int]]:
    rows = []
    for line in Path(path).read_text().splitlines():
        _, _, rest = line.partition(":")
        rows.append([int(t) for t in rest.split()])
    return rows
