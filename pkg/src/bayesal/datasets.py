"""Synthetic two-modality classification data, file I/O and pool splits.

Each item has a "question" feature vector (modality A) that identifies its
question type and an "image" feature vector (modality B) drawn around a class
sub-cluster.  Items of type ``binary`` only carry labels 1 and 2, mirroring
yes/no answers inside a larger answer vocabulary; ``open`` items use all
``J`` labels.
"""
from __future__ import annotations

import hashlib
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

FORMAT_MAGIC = "bayesal-dataset"
FORMAT_VERSION = 1
BINARY_LABELS = (1, 2)


class DatasetFormatError(ValueError):
    pass


class LabelAudit:
    """Counts every ground-truth label read, per item id."""

    def __init__(self):
        self.reads = Counter()

    def record(self, ids):
        self.reads.update(int(i) for i in ids)

    def count(self, ids) -> int:
        return sum(self.reads[int(i)] for i in ids)

    def reset(self):
        self.reads.clear()


@dataclass(frozen=True, eq=False)
class Dataset:
    ids: np.ndarray
    feat_a: np.ndarray
    feat_b: np.ndarray
    labels: np.ndarray = field(repr=False)
    types: np.ndarray
    n_classes: int
    type_names: tuple
    audit: LabelAudit = field(default_factory=LabelAudit, repr=False)

    def __post_init__(self):
        n = len(self.ids)
        if not (self.feat_a.shape[0] == self.feat_b.shape[0] == len(self.labels) == len(self.types) == n):
            raise ValueError("dataset columns have different lengths")
        if self.feat_a.ndim != 2 or self.feat_b.ndim != 2:
            raise ValueError("feature arrays must be 2-D")
        if len(set(self.ids.tolist())) != n:
            raise ValueError("duplicate item ids")
        if n and (self.labels.min() < 1 or self.labels.max() > self.n_classes):
            raise ValueError(f"labels must lie in 1..{self.n_classes}")
        unknown = set(self.types.tolist()) - set(self.type_names)
        if unknown:
            raise ValueError(f"undeclared type tags {sorted(unknown)}")
        object.__setattr__(self, "_row", {int(i): r for r, i in enumerate(self.ids)})

    def __len__(self):
        return len(self.ids)

    @property
    def n_features(self) -> int:
        return self.feat_a.shape[1] + self.feat_b.shape[1]

    def rows(self, ids) -> np.ndarray:
        try:
            return np.array([self._row[int(i)] for i in ids], dtype=int)
        except KeyError as exc:
            raise KeyError(f"unknown item id {exc.args[0]}") from None

    def features(self, ids) -> np.ndarray:
        """Fused ``[modality A, modality B]`` feature matrix for ``ids``."""
        r = self.rows(ids)
        return np.hstack([self.feat_a[r], self.feat_b[r]])

    def types_of(self, ids) -> np.ndarray:
        return self.types[self.rows(ids)]

    def labels_for(self, ids) -> np.ndarray:
        """Ground-truth labels (1-based).  Every read is recorded in ``audit``."""
        self.audit.record(ids)
        return self.labels[self.rows(ids)]

    def equals(self, other: "Dataset") -> bool:
        return (self.n_classes == other.n_classes and self.type_names == other.type_names
                and np.array_equal(self.ids, other.ids)
                and np.array_equal(self.feat_a, other.feat_a)
                and np.array_equal(self.feat_b, other.feat_b)
                and np.array_equal(self.labels, other.labels)
                and np.array_equal(self.types, other.types))


@dataclass(frozen=True)
class SyntheticConfig:
    n_items: int = 10000
    dim_a: int = 8
    dim_b: int = 8
    n_classes: int = 10
    type_mix: tuple = (("binary", 0.4), ("open", 0.6))
    label_noise: float = 0.0
    class_sep: float = 3.0
    cluster_std: float = 1.0
    n_subclusters: int = 1
    binary_subclusters: int | None = None
    binary_sep: float | None = None
    subcluster_spread: float = 1.5
    subcluster_skew: float = 0.0
    type_sep: float = 3.0
    question_std: float = 0.5
    transfer: float = 0.5
    label_rule: str = "cluster"
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        d = dict(d)
        if "type_mix" in d and isinstance(d["type_mix"], dict):
            d["type_mix"] = tuple(d["type_mix"].items())
        elif "type_mix" in d:
            d["type_mix"] = tuple(tuple(x) for x in d["type_mix"])
        return cls(**d)

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["type_mix"] = {k: v for k, v in self.type_mix}
        return d


def _unit_rows(rng, n, dim):
    v = rng.normal(size=(n, dim))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def generate_synthetic(cfg: SyntheticConfig) -> Dataset:
    """Draw a dataset from per-(type, class, sub-cluster) Gaussian blobs.

    With ``label_rule="nearest"`` an item's label is the class of the closest
    sub-cluster centre of its type (a noise-free Voronoi labelling) instead of
    the class it was drawn from.

    Binary-type centroids are a blend of the corresponding open-type centroids
    (weight ``transfer``) and independent directions, which sets how much
    learning on one type carries over to the other.
    """
    names = tuple(n for n, _ in cfg.type_mix)
    props = np.array([p for _, p in cfg.type_mix], dtype=float)
    if cfg.n_items < 1 or cfg.dim_a < 1 or cfg.dim_b < 1 or cfg.n_subclusters < 1:
        raise ValueError("sizes and dimensions must be >= 1")
    if np.any(props < 0) or abs(props.sum() - 1.0) > 1e-9:
        raise ValueError(f"type proportions must be nonnegative and sum to 1, got {props.tolist()}")
    if len(set(names)) != len(names):
        raise ValueError("duplicate type names")
    if "binary" in names and cfg.n_classes < 2:
        raise ValueError("binary items need at least two classes")
    if cfg.label_rule not in ("cluster", "nearest"):
        raise ValueError(f"label_rule must be 'cluster' or 'nearest', got {cfg.label_rule!r}")
    if not 0.0 <= cfg.label_noise <= 1.0 or not 0.0 <= cfg.transfer <= 1.0:
        raise ValueError("label_noise and transfer must lie in [0, 1]")

    rng = np.random.default_rng(cfg.seed)
    J, S = cfg.n_classes, cfg.n_subclusters
    Sb = cfg.binary_subclusters or S
    type_centers = cfg.type_sep * _unit_rows(rng, len(names), cfg.dim_a)
    open_cent = cfg.class_sep * _unit_rows(rng, J, cfg.dim_b)
    sub_offsets = cfg.subcluster_spread * rng.normal(size=(J, S, cfg.dim_b)) / np.sqrt(cfg.dim_b)
    open_sub = open_cent[:, None, :] + sub_offsets
    own_offsets = cfg.subcluster_spread * rng.normal(size=(2, Sb, cfg.dim_b)) / np.sqrt(cfg.dim_b)
    bsep = cfg.class_sep if cfg.binary_sep is None else cfg.binary_sep
    own = bsep * _unit_rows(rng, 2, cfg.dim_b)[:, None, :] + own_offsets
    mix = np.sqrt(max(0.0, 1.0 - cfg.transfer ** 2))
    binary_sub = cfg.transfer * open_sub[:2, np.arange(Sb) % S] + mix * own

    def sub_weights(k):
        w = np.arange(1, k + 1, dtype=float) ** (-cfg.subcluster_skew)
        return w / w.sum()

    n = cfg.n_items
    type_idx = rng.choice(len(names), size=n, p=props)
    labels = np.empty(n, dtype=int)
    feat_b = np.empty((n, cfg.dim_b))
    for k, name in enumerate(names):
        sel = np.flatnonzero(type_idx == k)
        choices = np.array(BINARY_LABELS) if name == "binary" else np.arange(1, J + 1)
        labels[sel] = rng.choice(choices, size=sel.size)
        table = binary_sub if name == "binary" else open_sub
        subs = rng.choice(table.shape[1], size=sel.size, p=sub_weights(table.shape[1]))
        feat_b[sel] = table[labels[sel] - 1, subs]
    feat_b += cfg.cluster_std * rng.normal(size=feat_b.shape)
    feat_a = type_centers[type_idx] + cfg.question_std * rng.normal(size=(n, cfg.dim_a))
    if cfg.label_rule == "nearest":
        for k, name in enumerate(names):
            sel = np.flatnonzero(type_idx == k)
            table = binary_sub if name == "binary" else open_sub
            flat = table.reshape(-1, cfg.dim_b)
            d2 = ((feat_b[sel, None, :] - flat[None]) ** 2).sum(axis=-1)
            labels[sel] = d2.argmin(axis=1) // table.shape[1] + 1

    noisy = rng.random(n) < cfg.label_noise
    for k, name in enumerate(names):
        sel = np.flatnonzero(noisy & (type_idx == k))
        choices = np.array(BINARY_LABELS) if name == "binary" else np.arange(1, J + 1)
        labels[sel] = rng.choice(choices, size=sel.size)

    types = np.array(names, dtype=object)[type_idx].astype(str)
    return Dataset(np.arange(n), feat_a, feat_b, labels, types, J, names)


def save_dataset(ds: Dataset, path) -> None:
    """Line-oriented text file; floats written with 17 significant digits."""
    da, db = ds.feat_a.shape[1], ds.feat_b.shape[1]
    out = [f"{FORMAT_MAGIC} {FORMAT_VERSION}",
           f"dim_a={da} dim_b={db} classes={ds.n_classes} types={','.join(ds.type_names)}"]
    for r in range(len(ds)):
        fields = [str(int(ds.ids[r])), str(ds.types[r]), str(int(ds.labels[r]))]
        fields += [f"{v:.17g}" for v in ds.feat_a[r]]
        fields += [f"{v:.17g}" for v in ds.feat_b[r]]
        out.append(",".join(fields))
    Path(path).write_text("\n".join(out) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise DatasetFormatError(f"{path}: empty file")
    if lines[0].split() != [FORMAT_MAGIC, str(FORMAT_VERSION)]:
        raise DatasetFormatError(f"{path}:1: not a version {FORMAT_VERSION} dataset file")
    if len(lines) < 2:
        raise DatasetFormatError(f"{path}: missing header line")
    try:
        header = dict(tok.split("=", 1) for tok in lines[1].split())
        da, db, J = int(header["dim_a"]), int(header["dim_b"]), int(header["classes"])
        type_names = tuple(header["types"].split(","))
    except (KeyError, ValueError) as exc:
        raise DatasetFormatError(f"{path}:2: bad header ({exc})") from None

    ids, types, labels, fa, fb = [], [], [], [], []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3 + da + db:
            raise DatasetFormatError(
                f"{path}:{lineno}: expected {3 + da + db} fields, got {len(parts)}")
        try:
            item, label = int(parts[0]), int(parts[2])
            values = [float(v) for v in parts[3:]]
        except ValueError as exc:
            raise DatasetFormatError(f"{path}:{lineno}: {exc}") from None
        if not 1 <= label <= J:
            raise DatasetFormatError(f"{path}:{lineno}: label {label} outside 1..{J}")
        if parts[1] not in type_names:
            raise DatasetFormatError(f"{path}:{lineno}: undeclared type {parts[1]!r}")
        ids.append(item)
        types.append(parts[1])
        labels.append(label)
        fa.append(values[:da])
        fb.append(values[da:])
    if not ids:
        raise DatasetFormatError(f"{path}: no records")
    try:
        return Dataset(np.array(ids), np.array(fa, dtype=float).reshape(-1, da),
                       np.array(fb, dtype=float).reshape(-1, db), np.array(labels),
                       np.array(types), J, type_names)
    except ValueError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None


@dataclass(frozen=True, eq=False)
class DatasetSplit:
    initial: np.ndarray
    pool: np.ndarray
    test: np.ndarray
    eval: np.ndarray
    target_type: str | None = None

    def __post_init__(self):
        parts = [self.initial, self.pool, self.test, self.eval]
        total = sum(len(p) for p in parts)
        if len(set(np.concatenate(parts).tolist())) != total:
            raise ValueError("split id sets overlap")

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for part in (self.initial, self.pool, self.test, self.eval):
            h.update(np.asarray(part, dtype=np.int64).tobytes())
            h.update(b"|")
        h.update(str(self.target_type).encode())
        return h.hexdigest()[:16]

    def replace_pool(self, pool) -> "DatasetSplit":
        return DatasetSplit(self.initial, np.asarray(pool), self.test, self.eval, self.target_type)


def make_split(ds: Dataset, n_initial: int, n_test: int, n_eval: int,
               target_type: str | None = None, seed: int = 0) -> DatasetSplit:
    """Seeded random split into initial-train, pool, test-domain and evaluation ids.

    With ``target_type`` the test-domain and evaluation items are drawn from
    that type only; initial set and pool stay unfiltered.
    """
    if min(n_initial, n_test, n_eval) < 0:
        raise ValueError("split sizes must be nonnegative")
    if target_type is not None and target_type not in ds.type_names:
        raise ValueError(f"unknown type {target_type!r}")
    rng = np.random.default_rng(seed)
    order = ds.ids[rng.permutation(len(ds))]
    if target_type is not None:
        eligible = order[ds.types_of(order) == target_type]
    else:
        eligible = order
    if n_test + n_eval > len(eligible) or n_initial + n_test + n_eval > len(ds):
        raise ValueError(f"infeasible split sizes N={n_initial}, T={n_test}, eval={n_eval} "
                         f"for {len(ds)} items ({len(eligible)} eligible for test/eval)")
    test = eligible[:n_test]
    evals = eligible[n_test:n_test + n_eval]
    taken = set(test.tolist()) | set(evals.tolist())
    rest = np.array([i for i in order if int(i) not in taken], dtype=ds.ids.dtype)
    # test/eval consumed the front of ``order``; reshuffle so the initial set is unbiased
    rest = rest[rng.permutation(len(rest))]
    initial, pool = rest[:n_initial], rest[n_initial:]
    if pool.size == 0:
        logger.warning("split leaves an empty pool")
    return DatasetSplit(initial, pool, test, evals, target_type)


def cheat_filter(split: DatasetSplit, ds: Dataset, target_type: str) -> DatasetSplit:
    """Restrict the pool to items of ``target_type``; everything else unchanged."""
    pool = split.pool[ds.types_of(split.pool) == target_type] if len(split.pool) else split.pool
    if pool.size == 0:
        raise ValueError(f"no {target_type!r} items left in the pool")
    return split.replace_pool(pool)
