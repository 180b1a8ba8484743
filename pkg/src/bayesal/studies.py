"""Study runners: savings, overlap, goal-domain, Monte-Carlo convergence and
fast-vs-exact checks.  Every study writes CSV files plus ``manifest.json``
into its output directory; plotting is left to external tools.
"""
from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import platform
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import bayes_mlp as bm
from .al_loop import (ALConfig, ExperimentLog, binary_fraction, derive_seed, overlap_matrix,
                      pairwise_overlap, queries_to_reach, run_experiment, write_overlap_csv)
from .datasets import (Dataset, SyntheticConfig, cheat_filter, generate_synthetic, load_dataset,
                       make_split)
from .exact_oracle import mi_exact, spearman_rho
from .scoring import build_test_summary, goal_scores, score_curiosity, score_entropy

logger = logging.getLogger(__name__)

STUDY_KINDS = ("savings", "overlap", "goal", "convergence", "fastcheck")
ACTIVE = ("entropy", "curiosity", "goal")

DEFAULTS = {
    "study": "savings",
    "out": "runs",
    "data": {"synthetic": {}},
    "split": {"n_initial": 500, "n_test": 500, "n_eval": 2000, "target_type": None},
    "al": {},
    "seeds": [0],
    "strategies": ["passive", "entropy", "curiosity", "goal"],
    "savings": {"breakpoint_sizes": []},
    "goal": {"target_type": "binary", "window": [5, 20]},
    "convergence": {"checkpoint": None, "n_items": 200, "n_test": 200, "reps": 3,
                    "Ms": [1, 2, 5, 10, 20, 50, 100, 200, 500], "trace_items": 50,
                    "threshold": 0.9},
    "fastcheck": {"checkpoint": None, "n_items": 200, "n_test": 200, "Ms": [2, 5, 10, 20, 50]},
}

# header schemas for validate-outputs; ``*`` marks a variable tail of count_ columns
SCHEMAS = {
    "curve": ["iteration", "train_size", "accuracy", "wallclock_score_ms", "n_selected",
              "floored", "*count_"],
    "savings.csv": ["seed", "strategy", "target_accuracy", "queries_to_target",
                    "passive_queries", "saving_pct"],
    "breakpoint.csv": ["n_initial", "seed", "strategy", "final_accuracy", "queries_to_target",
                       "passive_queries", "saving_pct"],
    "overlap_mean.csv": ["strategy", "*"],
    "overlap_seed": ["strategy", "*"],
    "composition.csv": ["seed", "strategy", "iteration", "n_selected", "n_target", "fraction",
                        "base_rate"],
    "goal_summary.csv": ["seed", "strategy", "final_accuracy", "target_fraction", "base_rate"],
    "convergence.csv": ["rep", "strategy", "M", "rho"],
    "convergence_summary.csv": ["rep", "strategy", "min_M_reaching_threshold"],
    "traces.csv": ["rep", "strategy", "M", "item_id", "score"],
    "fastcheck.csv": ["M", "item_id", "fast", "exact"],
    "fastcheck_rho.csv": ["M", "rho"],
}


class StudyError(RuntimeError):
    """A study cannot start (missing input, bad configuration)."""


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def set_key(cfg: dict, dotted: str, value) -> None:
    """Override ``a.b.c`` in a nested config; ``value`` is parsed as YAML."""
    if isinstance(value, str):
        value = yaml.safe_load(value)
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise StudyError(f"config file {p} not found")
        raw = yaml.safe_load(p.read_text()) or {}
    cfg = _merge(DEFAULTS, raw)
    for k, v in (overrides or {}).items():
        set_key(cfg, k, v)
    if cfg["study"] not in STUDY_KINDS:
        raise StudyError(f"unknown study kind {cfg['study']!r}; expected one of {STUDY_KINDS}")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def write_manifest(out: Path, cfg: dict, extra: dict | None = None) -> None:
    manifest = {
        "config": cfg,
        "config_sha256": config_hash(cfg),
        "seeds": cfg.get("seeds"),
        "versions": {"bayesal": __version__, "numpy": np.__version__,
                     "python": platform.python_version()},
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def _writer(path: Path, header):
    fh = open(path, "w", newline="")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(header)
    return fh, w


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if np.isnan(v) else repr(v)
    return str(v)


# ---------------------------------------------------------------------------
# data plumbing


def build_dataset(cfg: dict, seed: int) -> Dataset:
    data = cfg["data"]
    if data.get("path"):
        p = Path(data["path"])
        if not p.exists():
            raise StudyError(f"dataset file {p} not found")
        return load_dataset(p)
    syn = dict(data.get("synthetic") or {})
    syn["seed"] = derive_seed(syn.get("seed", 0), seed)
    return generate_synthetic(SyntheticConfig.from_dict(syn))


def build_split(cfg: dict, ds: Dataset, seed: int, target_type=None, n_initial=None):
    sp = cfg["split"]
    return make_split(ds, sp["n_initial"] if n_initial is None else n_initial, sp["n_test"],
                      sp["n_eval"], target_type if target_type is not None else sp.get("target_type"),
                      seed=derive_seed(seed, 11))


def al_config(cfg: dict, strategy: str, seed: int, **extra) -> ALConfig:
    d = dict(cfg["al"])
    d.update(extra)
    d.update(strategy=strategy, model_seed=derive_seed(seed, 21), mask_seed=derive_seed(seed, 22),
             selection_seed=derive_seed(seed, 23))
    return ALConfig.from_dict(d)


def _save_log(out: Path, name: str, log: ExperimentLog) -> None:
    (out / "curves").mkdir(parents=True, exist_ok=True)
    (out / "selected").mkdir(parents=True, exist_ok=True)
    log.to_csv(out / "curves" / f"{name}.csv")
    log.write_selected(out / "selected" / f"{name}.txt")


def saving_pct(active: ExperimentLog, passive: ExperimentLog) -> tuple[float, int | None, int]:
    """Saving of ``active`` in reaching ``passive``'s final accuracy.

    Returns ``(target, queries_needed, passive_queries)``; the saving is
    ``1 - queries_needed / passive_queries``.
    """
    target = passive.records[-1].accuracy
    q_passive = int(passive.curve()[0][-1])
    return target, queries_to_reach(active, target), q_passive


def _saving_value(q_needed, q_passive) -> float:
    return float("nan") if q_needed is None or q_passive == 0 else 100.0 * (1 - q_needed / q_passive)


# ---------------------------------------------------------------------------
# studies


def run_strategies(cfg: dict, seed: int, strategies, ds=None, split=None, **al_extra) -> dict:
    ds = ds if ds is not None else build_dataset(cfg, seed)
    split = split if split is not None else build_split(cfg, ds, seed)
    return {s: run_experiment(al_config(cfg, s, seed, **al_extra), split, ds) for s in strategies}


def run_savings_study(cfg: dict, out) -> dict:
    """Learning curves per strategy and seed, savings table, breakpoint sweep."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    strategies = list(cfg["strategies"])
    if "passive" not in strategies:
        strategies.insert(0, "passive")
    results = {}
    fh, w = _writer(out / "savings.csv", SCHEMAS["savings.csv"])
    with fh:
        for seed in cfg["seeds"]:
            logs = run_strategies(cfg, seed, strategies)
            results[seed] = logs
            for name, log in logs.items():
                _save_log(out, f"{name}_seed{seed}", log)
                target, q, qp = saving_pct(log, logs["passive"])
                w.writerow([seed, name, _fmt(target), _fmt(q), qp, _fmt(_saving_value(q, qp))])
    sizes = cfg["savings"].get("breakpoint_sizes") or []
    if sizes:
        fh, w = _writer(out / "breakpoint.csv", SCHEMAS["breakpoint.csv"])
        with fh:
            for n0 in sizes:
                for seed in cfg["seeds"]:
                    ds = build_dataset(cfg, seed)
                    split = build_split(cfg, ds, seed, n_initial=n0)
                    logs = run_strategies(cfg, seed, strategies, ds, split)
                    for name, log in logs.items():
                        target, q, qp = saving_pct(log, logs["passive"])
                        w.writerow([n0, seed, name, _fmt(log.records[-1].accuracy), _fmt(q), qp,
                                    _fmt(_saving_value(q, qp))])
    write_manifest(out, cfg)
    return results


def write_overlaps(out: Path, results: dict) -> np.ndarray:
    mats = []
    names = None
    for seed, logs in results.items():
        names, mat = overlap_matrix(logs)
        write_overlap_csv(names, mat, out / f"overlap_seed{seed}.csv")
        mats.append(mat)
    mean = np.mean(mats, axis=0)
    write_overlap_csv(names, mean, out / "overlap_mean.csv")
    return mean


def overlap_summary(results: dict) -> tuple[float, float]:
    """Mean active-active and active-passive overlap percentages over seeds."""
    aa, ap = [], []
    for logs in results.values():
        act = [s for s in logs if s in ACTIVE]
        for i, a in enumerate(act):
            for b in act:
                if a != b:
                    aa.append(pairwise_overlap(logs[a], logs[b]))
            if "passive" in logs:
                ap.append(pairwise_overlap(logs[a], logs["passive"]))
                ap.append(pairwise_overlap(logs["passive"], logs[a]))
    return float(np.mean(aa)), float(np.mean(ap))


def run_overlap_study(cfg: dict, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results = {}
    for seed in cfg["seeds"]:
        logs = run_strategies(cfg, seed, cfg["strategies"])
        results[seed] = logs
        for name, log in logs.items():
            _save_log(out, f"{name}_seed{seed}", log)
    write_overlaps(out, results)
    aa, ap = overlap_summary(results)
    write_manifest(out, cfg, {"mean_active_active": aa, "mean_active_passive": ap})
    return results


def run_goal_study(cfg: dict, out) -> dict:
    """Target-type experiment: four strategies plus a pool-filtered passive baseline."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    target = cfg["goal"].get("target_type") or cfg["split"].get("target_type")
    if not target:
        raise StudyError("goal study needs a target type")
    first, last = cfg["goal"].get("window", [5, 20])
    strategies = [s for s in cfg["strategies"] if s != "cheat"]
    results = {}
    comp_fh, comp = _writer(out / "composition.csv", SCHEMAS["composition.csv"])
    sum_fh, summ = _writer(out / "goal_summary.csv", SCHEMAS["goal_summary.csv"])
    with comp_fh, sum_fh:
        for seed in cfg["seeds"]:
            ds = build_dataset(cfg, seed)
            split = build_split(cfg, ds, seed, target_type=target)
            base = float(np.mean(ds.types_of(split.pool) == target))
            logs = {s: run_experiment(al_config(cfg, s, seed, target_type=target), split, ds)
                    for s in strategies}
            logs["cheat"] = run_experiment(al_config(cfg, "passive", seed, target_type=target),
                                           cheat_filter(split, ds, target), ds)
            results[seed] = {"logs": logs, "base_rate": base}
            for name, log in logs.items():
                _save_log(out, f"{name}_seed{seed}", log)
                for r in log.records[1:]:
                    n_t = r.type_counts.get(target, 0)
                    comp.writerow([seed, name, r.iteration, len(r.selected), n_t,
                                   _fmt(n_t / len(r.selected) if r.selected else float("nan")),
                                   _fmt(base)])
                summ.writerow([seed, name, _fmt(log.records[-1].accuracy),
                               _fmt(binary_fraction(log, target, first, last)), _fmt(base)])
    write_manifest(out, cfg)
    return results


def _load_checkpoint(section: dict) -> bm.ModelParams:
    path = section.get("checkpoint")
    if not path or not Path(path).exists():
        raise StudyError(f"model checkpoint {path!r} not found")
    return bm.load_params(path)


def _study_items(cfg: dict, section: dict, seed: int):
    ds = build_dataset(cfg, seed)
    split = build_split(cfg, ds, seed)
    rng = np.random.default_rng(derive_seed(seed, 31))
    n_items, n_test = section["n_items"], section["n_test"]
    if n_items > len(split.pool):
        raise StudyError(f"pool has {len(split.pool)} items, {n_items} requested")
    test_src = split.test if len(split.test) >= n_test else split.eval
    pool_ids = np.sort(rng.choice(split.pool, size=n_items, replace=False))
    test_ids = np.sort(rng.choice(test_src, size=min(n_test, len(test_src)), replace=False))
    return ds, pool_ids, test_ids


def mc_scores(params, ds, pool_ids, test_ids, M: int, seed: int) -> dict:
    """Entropy, curiosity and exact goal scores of ``pool_ids`` from ``M`` draws."""
    masks = bm.sample_masks(params, M, seed)
    pool = bm.predictive_batch(params, masks, pool_ids, ds.features(pool_ids))
    test = bm.predictive_batch(params, masks, test_ids, ds.features(test_ids))
    goal = np.array([mi_exact(p, test.probs) for p in pool.probs])
    return {"entropy": score_entropy(pool), "curiosity": score_curiosity(pool), "goal": goal}


def run_convergence_study(cfg: dict, out, params: bm.ModelParams | None = None) -> dict:
    """Rank agreement of M-sample scores with an independent large-M reference."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sec = cfg["convergence"]
    params = params if params is not None else _load_checkpoint(sec)
    seed = cfg["seeds"][0]
    ds, pool_ids, test_ids = _study_items(cfg, sec, seed)
    Ms = sorted(sec["Ms"])
    ref_M = Ms[-1]
    thr = sec.get("threshold", 0.9)
    n_trace = sec.get("trace_items", 50)
    rhos = {}
    fh, w = _writer(out / "convergence.csv", SCHEMAS["convergence.csv"])
    tfh, tw = _writer(out / "traces.csv", SCHEMAS["traces.csv"])
    with fh, tfh:
        for rep in range(sec["reps"]):
            per_M = {M: mc_scores(params, ds, pool_ids, test_ids, M, derive_seed(seed, 41, rep, M))
                     for M in Ms}
            ref = per_M[ref_M]
            for strat in ("entropy", "curiosity", "goal"):
                for M in Ms:
                    rho = spearman_rho(per_M[M][strat], ref[strat])
                    rhos[(rep, strat, M)] = rho
                    w.writerow([rep, strat, M, _fmt(rho)])
                    for i in range(min(n_trace, len(pool_ids))):
                        tw.writerow([rep, strat, M, int(pool_ids[i]), _fmt(float(per_M[M][strat][i]))])
    summary = convergence_summary(rhos, Ms, thr)
    fh, w = _writer(out / "convergence_summary.csv", SCHEMAS["convergence_summary.csv"])
    with fh:
        for (rep, strat), m in sorted(summary.items(), key=lambda kv: (str(kv[0][0]), kv[0][1])):
            w.writerow([rep, strat, _fmt(m)])
    write_manifest(out, cfg)
    return {"rhos": rhos, "summary": summary}


def convergence_summary(rhos: dict, Ms, threshold: float) -> dict:
    """Smallest ``M`` whose rho reaches ``threshold`` per (rep, strategy), plus medians.

    Median entries use the key ``("median", strategy)``.
    """
    reps = sorted({k[0] for k in rhos})
    out = {}
    for strat in ("entropy", "curiosity", "goal"):
        mins = []
        for rep in reps:
            hit = [M for M in Ms if rhos[(rep, strat, M)] is not None and rhos[(rep, strat, M)] >= threshold]
            out[(rep, strat)] = hit[0] if hit else None
            mins.append(hit[0] if hit else np.inf)
        med = float(np.median(mins))
        out[("median", strat)] = None if np.isinf(med) else med
    return out


def run_fastcheck_study(cfg: dict, out, params: bm.ModelParams | None = None) -> dict:
    """Fast goal scores against exact mutual information at several ``M``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    sec = cfg["fastcheck"]
    params = params if params is not None else _load_checkpoint(sec)
    seed = cfg["seeds"][0]
    if sec["n_test"] > 200:
        raise StudyError("fastcheck caps the test domain at 200 items")
    ds, pool_ids, test_ids = _study_items(cfg, sec, seed)
    rhos, pairs = {}, {}
    fh, w = _writer(out / "fastcheck.csv", SCHEMAS["fastcheck.csv"])
    with fh:
        for M in sec["Ms"]:
            masks = bm.sample_masks(params, M, derive_seed(seed, 51, M))
            pool = bm.predictive_batch(params, masks, pool_ids, ds.features(pool_ids))
            test = bm.predictive_batch(params, masks, test_ids, ds.features(test_ids))
            fast, _ = goal_scores(pool.probs, build_test_summary(test))
            exact = np.array([mi_exact(p, test.probs) for p in pool.probs])
            rhos[M] = spearman_rho(fast, exact)
            pairs[M] = (fast, exact)
            for i, f, e in zip(pool_ids, fast, exact):
                w.writerow([M, int(i), _fmt(float(f)), _fmt(float(e))])
    fh, w = _writer(out / "fastcheck_rho.csv", SCHEMAS["fastcheck_rho.csv"])
    with fh:
        for M, r in rhos.items():
            w.writerow([M, _fmt(r)])
    write_manifest(out, cfg)
    return {"rhos": rhos, "pairs": pairs}


RUNNERS = {
    "savings": run_savings_study,
    "overlap": run_overlap_study,
    "goal": run_goal_study,
    "convergence": run_convergence_study,
    "fastcheck": run_fastcheck_study,
}


def run_study(cfg: dict, out=None):
    out = Path(out or cfg["out"])
    return RUNNERS[cfg["study"]](cfg, out)


# ---------------------------------------------------------------------------
# output validation


def _schema_for(path: Path):
    name = path.name
    if path.parent.name == "curves":
        return SCHEMAS["curve"]
    if name.startswith("overlap_seed"):
        return SCHEMAS["overlap_seed"]
    return SCHEMAS.get(name)


def _header_ok(header: list[str], schema: list[str]) -> bool:
    if schema[-1].startswith("*"):
        fixed, prefix = schema[:-1], schema[-1][1:]
        tail = header[len(fixed):]
        return header[:len(fixed)] == fixed and all(c.startswith(prefix) for c in tail)
    return header == schema


def validate_outputs(root) -> list[str]:
    """Return a list of problems found in the CSV files under ``root``."""
    root = Path(root)
    if not root.is_dir():
        return [f"{root}: not a directory"]
    problems = []
    files = sorted(root.rglob("*.csv"))
    if not files:
        problems.append(f"{root}: no CSV outputs")
    for path in files:
        schema = _schema_for(path)
        if schema is None:
            problems.append(f"{path}: no declared schema")
            continue
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or not _header_ok(rows[0], schema):
            problems.append(f"{path}: header {rows[0] if rows else None} does not match {schema}")
            continue
        width = len(rows[0])
        bad = [i + 2 for i, r in enumerate(rows[1:]) if len(r) != width]
        if bad:
            problems.append(f"{path}: rows {bad[:5]} have the wrong number of fields")
    return problems
