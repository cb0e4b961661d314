"""Command-line front end.

Exit codes: 0 success, 1 oracle disagreement, 2 invalid input,
3 numerical failure (separation, singular design, sampler stall),
4 size cap exceeded.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace

import numpy as np

from .core import MatchedDesign, Sample, ValidationError, jitter_ties, read_design_csv, read_sample_csv, write_design_csv
from .inference import EXACT_CAP, METHODS, STATISTICS, TestSpec, confidence_interval, randomization_test
from .matcher import EmptyArmError, MatchProblem, match
from .oracle import MAX_PAIRS, OracleSizeError, compare_with_permuter
from .permuter import SamplingError, SupportTooLarge, build_distribution
from .propensity import SeparationError, SingularDesignError, fit_logistic, predict
from .simulation import SimConfig, config_dict, simulate, table_csv, table_two_configs
from .structure import StructureError, analyze

EXIT_OK, EXIT_DISAGREE, EXIT_INVALID, EXIT_NUMERIC, EXIT_SIZE = 0, 1, 2, 3, 4


def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _emit(doc: dict, out: str | None) -> None:
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if out:
        with open(out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _load(args) -> Sample:
    sample = read_sample_csv(args.input)
    if getattr(args, "fit_propensity", False) or any(u.score is None for u in sample.units):
        if sample.X.shape[1] == 0:
            raise ValidationError("no scores in input and no covariates to fit a propensity model")
        model = fit_logistic(sample.X, sample.z)
        sample = sample.with_scores(predict(model, sample.X))
    return jitter_ties(sample)


def _caliper(args, sample: Sample) -> float | None:
    if getattr(args, "caliper_sd", None) is not None:
        return float(args.caliper_sd) * float(np.std(sample.scores, ddof=1))
    return getattr(args, "caliper", None)


def _design(args, sample: Sample) -> MatchedDesign:
    caliper = _caliper(args, sample)
    if getattr(args, "design", None):
        design = read_design_csv(args.design, sample, caliper)
        if sample.strata is not None and args.strata:
            design = replace(design, stratum_of=dict(zip(sample.ids, sample.strata)))
        return design
    return match(MatchProblem(sample, caliper, bool(args.strata and sample.strata is not None)))


def _prob_scores(args, sample: Sample):
    if not getattr(args, "prob_column", None):
        return None
    other = read_sample_csv(args.input, score_column=args.prob_column)
    probs = {u.id: u.score for u in other.units}
    if any(v is None for v in probs.values()):
        raise ValidationError(f"column {args.prob_column!r} is missing or incomplete")
    return probs


def cmd_match(args) -> int:
    sample = _load(args)
    design = _design(args, sample)
    write_design_csv(design, sample, args.out_design)
    doc = json.loads(analyze(design, sample).to_json())
    doc.update(config=_config(args), n_unmatched=len(design.unmatched), objective=design.objective)
    if args.out_structure:
        _emit(doc, args.out_structure)
    return EXIT_OK


def cmd_audit(args) -> int:
    sample = _load(args)
    design = _design(args, sample)
    st = analyze(design, sample)
    dist = build_distribution(design, sample, _prob_scores(args, sample), st)
    doc = json.loads(st.to_json())
    doc["config"] = _config(args)
    for entry, meta in zip(doc["meta_components"], dist.metas):
        entry["mode"] = meta.mode
        entry["support_size"] = meta.support_size
    size = dist.support_size
    doc["support_size"] = size
    if args.support and size is not None and size <= EXACT_CAP:
        doc["support"] = json.loads(dist.support_json(design))["assignments"]
    _emit(doc, args.out)
    return EXIT_OK


def _spec(args) -> TestSpec:
    return TestSpec(args.statistic, args.method, args.sidedness, args.n_draws, args.exact, args.alpha, args.tau)


def cmd_infer(args) -> int:
    start = time.perf_counter()
    sample = _load(args)
    design = _design(args, sample)
    res = randomization_test(_spec(args), design, sample, _prob_scores(args, sample), seed=args.seed)
    doc = {"config": _config(args), **res.to_dict(), "n_pairs": design.K, "seed": args.seed}
    if args.timing:
        doc["runtime_seconds"] = time.perf_counter() - start
    _emit(doc, args.out)
    return EXIT_OK


def cmd_ci(args) -> int:
    start = time.perf_counter()
    sample = _load(args)
    design = _design(args, sample)
    grid = None
    if args.grid_min is not None and args.grid_max is not None:
        grid = np.linspace(args.grid_min, args.grid_max, args.grid_points)
    ci = confidence_interval(
        _spec(args), design, sample, grid, _prob_scores(args, sample), seed=args.seed, sides=args.sides
    )
    doc = {
        "config": _config(args),
        "lower": ci.lower,
        "upper": ci.upper,
        "contiguous": ci.contiguous,
        "empty": ci.empty,
        "grid_points": int(ci.grid.size),
        "seed": args.seed,
    }
    if args.timing:
        doc["runtime_seconds"] = time.perf_counter() - start
    _emit(doc, args.out)
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    sample = _load(args)
    design = _design(args, sample)
    if design.K > MAX_PAIRS:
        raise OracleSizeError(f"oracle is capped at {MAX_PAIRS} pairs, design has {design.K}")
    agreement = compare_with_permuter(sample, design, _prob_scores(args, sample))
    example = agreement.first_counterexample()
    doc = {
        "config": _config(args),
        "result": "PASS" if agreement.agree else "FAIL",
        "oracle_support_size": agreement.oracle_size,
        "permuter_support_size": agreement.permuter_size,
        "max_probability_gap": agreement.max_probability_gap,
        "counterexample": None
        if example is None
        else {
            "where": example[0],
            "flipped_pairs": [list(design.pairs[k]) for k, b in enumerate(example[1]) if b],
        },
    }
    _emit(doc, args.out)
    return EXIT_OK if agreement.agree else EXIT_DISAGREE


def cmd_simulate(args) -> int:
    base = SimConfig(
        n=args.n,
        z_model=args.z_model,
        y_model=args.y_model,
        caliper=args.caliper,
        statistic=args.statistic,
        replications=args.replications,
        master_seed=args.seed,
        n_draws=args.n_draws,
        alpha=args.alpha,
    )
    configs = table_two_configs(base) if args.table else [base]
    rows = [simulate(c, args.workers) for c in configs]
    text = table_csv(rows)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        with open(args.out + ".config.json", "w") as fh:
            json.dump({"config": _config(args), "cells": [config_dict(c) for c in configs]}, fh, indent=2, sort_keys=True)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _add_design_args(p, with_design=True):
    p.add_argument("--input", required=True, help="sample CSV: id,z,y,x1..xp[,stratum][,score]")
    if with_design:
        p.add_argument("--design", help="design CSV from `match`; matched on the fly when omitted")
    p.add_argument("--caliper", type=float, help="caliper on the score scale")
    p.add_argument("--caliper-sd", type=float, help="caliper as a multiple of the score SD")
    p.add_argument("--strata", action="store_true", help="match exactly within the stratum column")
    p.add_argument("--fit-propensity", action="store_true", help="fit a logistic model even if scores are given")
    p.add_argument("--prob-column", help="column with the scores used for treatment probabilities")


def _add_test_args(p):
    p.add_argument("--method", choices=METHODS, default="match-adaptive")
    p.add_argument("--statistic", choices=STATISTICS, default="diff-means")
    p.add_argument("--sidedness", choices=("greater", "less"), default="greater")
    p.add_argument("--n-draws", type=int, default=50_000)
    p.add_argument("--exact", choices=("auto", "always", "never"), default="auto")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--tau", type=float, default=0.0)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--timing", action="store_true", help="add wall-clock runtime to the output")
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="match-adaptive", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("match", help="optimal pair match; writes design CSV and structure JSON")
    _add_design_args(p, with_design=False)
    p.add_argument("--out-design", required=True)
    p.add_argument("--out-structure")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("audit", help="overlap graph, components, meta-components and support sizes")
    _add_design_args(p)
    p.add_argument("--support", action="store_true", help="list the support when small")
    p.add_argument("--out")
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("infer", help="randomization test")
    _add_design_args(p)
    _add_test_args(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ci", help="confidence interval by test inversion")
    _add_design_args(p)
    _add_test_args(p)
    p.add_argument("--sides", choices=("two-sided", "greater", "less"), default="two-sided")
    p.add_argument("--grid-min", type=float)
    p.add_argument("--grid-max", type=float)
    p.add_argument("--grid-points", type=int, default=201)
    p.set_defaults(func=cmd_ci)

    p = sub.add_parser("oracle-check", help="compare the support with brute force")
    _add_design_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle_check)

    p = sub.add_parser("simulate", help="Type I error table")
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--z-model", choices=("linear", "nonlinear"), default="linear")
    p.add_argument("--y-model", choices=("linear", "nonlinear", "constant"), default="linear")
    p.add_argument("--caliper", action="store_true", help="0.2 SD caliper on estimated scores")
    p.add_argument("--statistic", choices=STATISTICS, default="diff-means")
    p.add_argument("--replications", type=int, default=1000)
    p.add_argument("--n-draws", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--table", action="store_true", help="run all 16 cells")
    p.add_argument("--workers", type=int, help="processes (default: MATCH_ADAPTIVE_WORKERS or 1)")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OracleSizeError, SupportTooLarge) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SIZE
    except (ValidationError, EmptyArmError, StructureError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SeparationError, SingularDesignError, SamplingError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
