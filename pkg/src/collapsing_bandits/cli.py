"""Command-line front end.

Subcommands: ``index``, ``simulate``, ``bench``, ``verify``, ``generate`` and
``perturb``. Exit status is 0 on success, 1 on bad input and 2 when a
verification check fails.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from collapsing_bandits import __version__
from collapsing_bandits.belief import ModelValidationError, TransitionModel, build_chains
from collapsing_bandits.cohorts import (
    NON_RECOVERABLE,
    SELF_CORRECTING,
    CohortFormatError,
    GenerationError,
    GeneratorSpec,
    fmt,
    format_cohort,
    generate_cohort,
    perturb_matrix,
    read_base_matrices,
    read_cohort,
)
from collapsing_bandits.reference import reference_index_table
from collapsing_bandits.sim import POLICIES, SimulationConfig, intervention_benefit, run_trials
from collapsing_bandits.verify import (
    index_agreement,
    indexability_suite,
    sample_forward_models,
    shape_scan,
)
from collapsing_bandits.whittle import compute_index_table

logger = logging.getLogger("collapsing_bandits")

EXIT_OK, EXIT_INVALID, EXIT_VERIFY_FAILED = 0, 1, 2
DEFAULT_POLICIES = "threshold_whittle,myopic,random"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage, which is reserved for failed checks here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def round_floats(obj):
    """Recursively round floats to 12 significant digits for JSON output."""
    if isinstance(obj, float):
        return float(fmt(obj)) if np.isfinite(obj) else None
    if isinstance(obj, (np.floating,)):
        return round_floats(float(obj))
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, dict):
        return {k: round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [round_floats(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return round_floats(obj.tolist())
    return obj


def dump_json(obj) -> str:
    return json.dumps(round_floats(obj), indent=2, sort_keys=True) + "\n"


@contextmanager
def _output(path):
    if path is None or str(path) == "-":
        yield sys.stdout
    else:
        with Path(path).open("w", newline="") as fh:
            yield fh


def _template(text: str) -> tuple[float, ...]:
    values = tuple(float(v) for v in text.split(","))
    if len(values) != 4:
        raise argparse.ArgumentTypeError("template needs four comma-separated probabilities")
    return values


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def add_cohort_args(p: argparse.ArgumentParser, default_n: int | None = None) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--arms-file", type=Path, help="cohort CSV: arm_id,p01p,p11p,p01a,p11a")
    src.add_argument("--generate", metavar="SPEC", help="generator spec, e.g. self_correcting_mix:fraction=0.6")
    p.add_argument("--n", type=int, default=default_n, help="number of generated arms")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--relaxed", action="store_true", help="only require probabilities inside (0, 1)")
    p.add_argument("--sc-template", type=_template, default=SELF_CORRECTING, help="self-correcting template p01p,p11p,p01a,p11a")
    p.add_argument("--nr-template", type=_template, default=NON_RECOVERABLE, help="non-recoverable template")


def load_cohort(args) -> tuple[list[str], list[TransitionModel], dict]:
    """Cohort from ``--arms-file`` or ``--generate``; also returns its description."""
    if args.arms_file is not None:
        pairs = read_cohort(args.arms_file, strict=not args.relaxed)
        if not pairs:
            raise CohortFormatError(f"{args.arms_file}: no arms")
        ids = [a for a, _ in pairs]
        return ids, [m for _, m in pairs], {"arms_file": str(args.arms_file)}
    if args.generate is None:
        raise UsageError("give either --arms-file or --generate")
    if args.n is None:
        raise UsageError("--generate needs --n")
    spec = GeneratorSpec.parse(args.generate, args.n, args.seed)
    spec = GeneratorSpec(spec.kind, spec.n, spec.seed, spec.params, (tuple(args.sc_template), tuple(args.nr_template)))
    models = generate_cohort(spec)
    info = {"generator": spec.describe(), "n": spec.n, "seed": spec.seed}
    if spec.kind == "self_correcting_mix":
        info["templates"] = {"self_correcting": list(spec.templates[0]), "non_recoverable": list(spec.templates[1])}
    return [str(i) for i in range(len(models))], models, info


def _index_rows(model: TransitionModel, T: int) -> np.ndarray:
    return compute_index_table(build_chains(model, T)).w


def cmd_index(args) -> int:
    ids, models, _ = load_cohort(args)
    start = time.perf_counter()
    if args.threads > 1:
        with ProcessPoolExecutor(max_workers=args.threads) as pool:
            tables = list(pool.map(_index_rows, models, [args.t_horizon] * len(models)))
    else:
        tables = [_index_rows(m, args.t_horizon) for m in models]
    elapsed = time.perf_counter() - start
    with _output(args.out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["arm_id", "omega", "u", "index"])
        for arm_id, w in zip(ids, tables):
            for omega in (0, 1):
                for u in range(1, w.shape[1] + 1):
                    writer.writerow([arm_id, omega, u, fmt(w[omega, u - 1])])
    print(f"indexed {len(models)} arms at T={args.t_horizon} in {elapsed:.3f} s", file=sys.stderr)
    return EXIT_OK


def _budget(args, n: int) -> int:
    if args.k is not None:
        k = args.k
    else:
        k = int(round(n * (args.k_pct if args.k_pct is not None else 10.0) / 100.0))
    if not 0 <= k <= n:
        raise UsageError(f"budget {k} outside 0..{n}")
    return k


def cmd_simulate(args) -> int:
    ids, models, cohort_info = load_cohort(args)
    policies = tuple(p.strip() for p in args.policies.split(",") if p.strip())
    config = SimulationConfig(
        n_arms=len(models),
        budget=_budget(args, len(models)),
        horizon=args.t_horizon,
        trials=args.trials,
        seed=args.seed,
        beta=args.beta,
        policies=policies,
        threads=args.threads,
    )
    start = time.perf_counter()
    results = run_trials(models, config)
    elapsed = time.perf_counter() - start
    ib = intervention_benefit(results)
    notes = []
    if cohort_info.get("generator", "").startswith("state_one_responsive"):
        notes.append("arms outside the state-one-responsive fraction are drawn uniformly from strict-natural models")
    if ib["oracle"] is None:
        notes.append("oracle did not beat never_act; intervention benefit undefined")
    bundle = {
        "tool": "collapsing-bandits",
        "version": __version__,
        "config": {
            "cohort": cohort_info,
            "n_arms": config.n_arms,
            "budget": config.budget,
            "horizon": config.horizon,
            "trials": config.trials,
            "seed": config.seed,
            "beta": config.beta,
            "policies": list(results),
        },
        "results": {
            name: {
                "intervention_benefit": ib[name],
                "mean_reward": res.mean,
                "stderr": res.stderr,
                "per_round_mean": res.per_round_mean.tolist(),
            }
            for name, res in results.items()
        },
        "notes": notes,
    }
    if args.timing:
        bundle["runtimes"] = {"simulate_seconds": round(elapsed, 3)}
    with _output(args.out) as fh:
        fh.write(dump_json(bundle))
    if args.summary is not None:
        with Path(args.summary).open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["policy", "intervention_benefit", "mean_reward", "stderr"])
            for name, res in results.items():
                benefit = "" if ib[name] is None else fmt(ib[name])
                writer.writerow([name, benefit, fmt(res.mean), fmt(res.stderr)])
    return EXIT_OK


def cmd_bench(args) -> int:
    sizes = args.n_list
    if not sizes or min(sizes) < 1:
        raise UsageError("--n-list needs positive sizes")
    spec = GeneratorSpec.parse(args.generate or "uniform_natural", max(sizes), args.seed)
    models = generate_cohort(spec)
    T = args.t_horizon
    rows = []
    for n in sizes:
        cohort = models[:n]
        start = time.perf_counter()
        for m in cohort:
            compute_index_table(build_chains(m, T))
        t_fast = time.perf_counter() - start
        start = time.perf_counter()
        for m in cohort:
            reference_index_table(m, args.beta, T)
        t_ref = time.perf_counter() - start
        rows.append((n, t_fast, t_ref))
        print(f"N={n}: threshold_whittle {t_fast:.3f} s, reference {t_ref:.3f} s", file=sys.stderr)
    with _output(args.out) as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["N", "t_threshold_whittle", "t_reference", "speedup"])
        for n, t_fast, t_ref in rows:
            speedup = t_ref / t_fast if t_fast > 0 else float("inf")
            writer.writerow([n, f"{t_fast:.3f}", f"{t_ref:.3f}", fmt(speedup)])
    return EXIT_OK


def cmd_verify(args) -> int:
    rng = np.random.default_rng(args.seed)
    report = {"tool": "collapsing-bandits", "version": __version__, "seed": args.seed}
    if args.n_agreement > 0:
        models = sample_forward_models(rng, args.n_agreement, args.condition_beta)
        report["index_agreement"] = index_agreement(models, beta=args.beta).to_dict()
    if args.n_indexability > 0:
        models = sample_forward_models(rng, args.n_indexability, args.condition_beta, require_nib=False)
        report["indexability"] = indexability_suite(models, args.condition_beta).to_dict()
    if args.n_scan > 0:
        report["shape_scan"] = shape_scan(args.n_scan, seed=args.seed).to_dict()
    checks = [v["passed"] for v in report.values() if isinstance(v, dict)]
    report["passed"] = all(checks)
    with _output(args.out) as fh:
        fh.write(dump_json(report))
    for key, value in report.items():
        if isinstance(value, dict):
            print(f"{key}: {'PASS' if value['passed'] else 'FAIL'}", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_VERIFY_FAILED


def cmd_generate(args) -> int:
    if args.generate is None:
        raise UsageError("generate needs --generate")
    ids, models, _ = load_cohort(args)
    with _output(args.out) as fh:
        fh.write(format_cohort(models, ids))
    return EXIT_OK


def cmd_perturb(args) -> int:
    deltas = args.deltas
    if len(deltas) != 4:
        raise UsageError("--deltas needs four values d1,d2,d3,d4")
    rows = read_base_matrices(args.base_file)
    ids, models = [], []
    for arm_id, q01, q11 in rows:
        try:
            models.append(perturb_matrix((q01, q11), deltas, args.eps))
        except ModelValidationError as exc:
            raise ModelValidationError(f"arm {arm_id!r}: {exc}") from None
        ids.append(arm_id)
    with _output(args.out) as fh:
        fh.write(format_cohort(models, ids))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="collapsing-bandits", description="Whittle index planning for collapsing bandits.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("index", help="write per-arm Whittle index tables as CSV")
    add_cohort_args(p)
    p.add_argument("--t-horizon", type=int, default=180)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("simulate", help="run policies on a cohort and report intervention benefit")
    add_cohort_args(p)
    budget = p.add_mutually_exclusive_group()
    budget.add_argument("--k", type=int, help="arms acted on per round")
    budget.add_argument("--k-pct", type=float, help="arms acted on per round, as a percentage of N (default 10)")
    p.add_argument("--t-horizon", type=int, default=180)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--beta", type=float, default=0.999, help="discount for the reference and oracle indices")
    p.add_argument("--policies", default=DEFAULT_POLICIES, help=f"comma list from {', '.join(POLICIES)}")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", type=Path, help="result JSON (stdout if omitted)")
    p.add_argument("--summary", type=Path, help="optional per-policy summary CSV")
    p.add_argument("--timing", action="store_true", help="add wall-clock runtimes to the JSON")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="time the index sweep against the reference solver")
    p.add_argument("--n-list", type=_int_list, default=[10, 25, 50])
    p.add_argument("--generate", metavar="SPEC", help="generator spec (default uniform_natural)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--t-horizon", type=int, default=180)
    p.add_argument("--beta", type=float, default=0.999)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("verify", help="run the reference checks and write a JSON report")
    p.add_argument("--n-agreement", type=int, default=100, help="models for the index agreement check")
    p.add_argument("--n-indexability", type=int, default=50, help="models for the indexability check")
    p.add_argument("--n-scan", type=int, default=10_000, help="relaxed models for the policy shape scan")
    p.add_argument("--condition-beta", type=float, default=0.2, help="discount for the forward condition")
    p.add_argument("--beta", type=float, default=0.999, help="discount for reference indices")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("generate", help="write a synthetic cohort CSV")
    add_cohort_args(p)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("perturb", help="split observed transition rates into passive and active matrices")
    p.add_argument("--base-file", type=Path, required=True, help="CSV: arm_id,q01,q11")
    p.add_argument("--deltas", type=_float_list, required=True, help="d1,d2,d3,d4")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_perturb)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, CohortFormatError, ModelValidationError, GenerationError, ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
