"""Command-line entry point: ``bayesal generate-data | run | validate-outputs``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import bayes_mlp as bm
from .al_loop import run_experiment
from .datasets import SyntheticConfig, generate_synthetic, save_dataset
from .studies import (STUDY_KINDS, StudyError, al_config, build_dataset, build_split,
                      load_config, run_study, validate_outputs, write_manifest)
from .scoring import STRATEGIES


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bayesal", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="write a synthetic dataset file")
    g.add_argument("--config", help="YAML config; uses its data.synthetic section")
    g.add_argument("--seed", type=int, help="generator seed (overrides config)")
    g.add_argument("--out", required=True, help="dataset file to write")
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")

    r = sub.add_parser("run", help="run one experiment or a study")
    r.add_argument("--config", help="YAML config file")
    r.add_argument("--study", choices=STUDY_KINDS)
    r.add_argument("--strategy", choices=STRATEGIES,
                   help="run a single experiment with this strategy instead of a study")
    r.add_argument("--seed", type=int, action="append", help="seed roster entry (repeatable)")
    r.add_argument("--out", help="output directory")
    r.add_argument("--checkpoint", help="model checkpoint for convergence/fastcheck")
    r.add_argument("--save-checkpoint", help="with --strategy: write the final model here")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a dotted config key, e.g. al.M=20")

    v = sub.add_parser("validate-outputs", help="check CSV outputs against their schemas")
    v.add_argument("directory")
    return p


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs:
        key, sep, value = item.partition("=")
        if not sep:
            raise StudyError(f"--set expects KEY=VALUE, got {item!r}")
        out[key] = value
    return out


def _generate(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    syn = dict(cfg["data"].get("synthetic") or {})
    if args.seed is not None:
        syn["seed"] = args.seed
    ds = generate_synthetic(SyntheticConfig.from_dict(syn))
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} items to {args.out}")
    return 0


def _run(args) -> int:
    over = _overrides(args.set)
    if args.study:
        over["study"] = args.study
    cfg = load_config(args.config, over)
    if args.seed:
        cfg["seeds"] = list(args.seed)
    if args.out:
        cfg["out"] = args.out
    if args.checkpoint:
        for sec in ("convergence", "fastcheck"):
            cfg[sec]["checkpoint"] = args.checkpoint
    out = Path(cfg["out"])

    if args.strategy:
        seed = cfg["seeds"][0]
        ds = build_dataset(cfg, seed)
        split = build_split(cfg, ds, seed)
        log, params = run_experiment(al_config(cfg, args.strategy, seed), split, ds,
                                     return_model=True)
        out.mkdir(parents=True, exist_ok=True)
        log.to_csv(out / f"{args.strategy}_seed{seed}.csv")
        log.write_selected(out / f"{args.strategy}_seed{seed}.txt")
        if args.save_checkpoint:
            bm.save_params(params, args.save_checkpoint)
        write_manifest(out, cfg, {"strategy": args.strategy})
        print(f"{args.strategy}: final accuracy {log.records[-1].accuracy:.4f} "
              f"after {len(log.records) - 1} iterations -> {out}")
        return 0

    run_study(cfg, out)
    print(f"{cfg['study']} study written to {out}")
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "generate-data":
            return _generate(args)
        if args.command == "run":
            return _run(args)
        problems = validate_outputs(args.directory)
        for p in problems:
            print(p, file=sys.stderr)
        if problems:
            print(f"validate-outputs: {len(problems)} problem(s)", file=sys.stderr)
            return 1
        print("validate-outputs: ok")
        return 0
    except (StudyError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"bayesal: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
