#!/usr/bin/env python3
"""CMDF Lab Scenario Runner.

Runs the analyses a scenario file selects and writes one long-format CSV
per analysis plus a ``manifest.json`` (scenario hash, seed, versions) into
the output directory. Each run is tracked as an Opik trace when
``OPIK_API_KEY`` and ``OPIK_WORKSPACE`` are set.

Usage:
    # Reproduce the 3-sensor worked example
    python -m _lib.experiments.run_scenario run _lib/experiments/scenarios/example1.json

    # Case 5 along the time axis, custom output directory and seed
    python -m _lib.experiments.run_scenario run _lib/experiments/scenarios/case5.json --out out/case5 --seed 7

    # Check a scenario file without running it
    python -m _lib.experiments.run_scenario validate my_scenario.json

    # Rank the candidate 3-sensor topologies against the published example
    python -m _lib.experiments.run_scenario infer-topology --out out/topology

Exit status: 0 success, 2 invalid scenario, 3 numerical failure, 4 analysis
precondition or argument failure.
"""

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import numpy as np
from joblib import Parallel, delayed

from _lib.analysis import (
    check_phi_vanishing,
    classify_relation,
    counterexamples,
    difference_report,
    index_rows,
    one_step,
    one_step_all,
    recursive_relation_check,
    recursive_rows,
    relation_rows,
)
from _lib.errors import LabError, NumericalError, ScenarioError
from _lib.experiments.infer_topology import candidate_rows, infer_example_topology
from _lib.filter import DistributedFilter, run_filter, simulate_truth, trajectory_rows
from _lib.montecarlo import mc_rows, run_monte_carlo
from _lib.network import consensus_power, surrogate_fusion_step
from _lib.opik_client import track_operation
from _lib.reports import write_csv, write_manifest
from _lib.scenario import ScenarioSetup, load_scenario
from _lib.steady_state import steady_state_all, steady_state_rows

logger = logging.getLogger(__name__)

LONG_FIELDS = ["sensor", "L", "k", "quantity", "value"]


@dataclass
class RunContext:
    seed: int
    threads: int = 1
    seed_overridden: bool = False


@dataclass
class AnalysisResult:
    rows: List[Dict[str, Any]]
    fieldnames: Optional[List[str]] = None
    comments: List[str] = field(default_factory=list)
    scores: Dict[str, float] = field(default_factory=dict)


def _parallel(ctx: RunContext, fn: Callable, items: List[Any]) -> List[Any]:
    return Parallel(n_jobs=ctx.threads, prefer="threads")(delayed(fn)(item) for item in items)


def _fusion_grid(setup: ScenarioSetup) -> List[int]:
    """L_list plus the surrogate for L → ∞ when the scenario asks for it."""
    grid = list(setup.L_list)
    if setup.scenario.sweep.include_surrogate:
        surrogate = surrogate_fusion_step(setup.consensus)
        if surrogate not in grid:
            grid.append(surrogate)
    return grid


# ── Analysis Tasks ───────────────────────────────────────────────────

def run_one_step_sweep(setup: ScenarioSetup, ctx: RunContext) -> AnalysisResult:
    """Equal-start indices, Φ traces and R^ts for every sensor and L."""
    def at(L):
        return one_step_all(setup.model, setup.noise, setup.consensus, L, setup.sigma0)

    rows, residual = [], 0.0
    steps_by_L = dict(zip(_fusion_grid(setup), _parallel(ctx, at, _fusion_grid(setup))))
    for L, steps in steps_by_L.items():
        for step in steps:
            rows.extend(index_rows(step))
            residual = max(residual, *difference_report(step).residuals.values(), step.phi.phi_identity_residual)

    scores = {"max_identity_residual": residual}
    ref = setup.scenario.reference
    if ref is not None:
        steps = steps_by_L.get(ref.fusion_steps) or at(ref.fusion_steps)
        deviation = 0.0
        for key in ("sigma", "sigma_f", "sigma_t"):
            expected = getattr(ref, key)
            if expected is None:
                continue
            actual = [float(np.trace(getattr(s, key))) for s in steps]
            deviation = max(deviation, max(abs(a - e) for a, e in zip(actual, expected)))
        scores["reference_max_deviation"] = deviation
        if deviation > ref.tolerance:
            logger.warning("reference values missed by %.3e (tolerance %.1e)", deviation, ref.tolerance)
    return AnalysisResult(rows, LONG_FIELDS, scores=scores)


def run_time_sweep(setup: ScenarioSetup, ctx: RunContext) -> AnalysisResult:
    """Indices of every sensor along k = 1..horizon at the scenario's fusion step."""
    L = setup.fusion_steps
    power = consensus_power(setup.consensus, L)

    def track(i):
        out = []
        sigma = sigma_f = sigma_t = setup.sigma0
        for k in range(1, setup.horizon + 1):
            step = one_step(setup.model, setup.noise, power[i], sigma, sigma_f, sigma_t,
                            sensor=i, fusion_steps=L, k=k)
            out.extend(index_rows(step))
            sigma, sigma_f, sigma_t = step.sigma, step.sigma_f, step.sigma_t
        return out

    per_sensor = _parallel(ctx, track, list(range(setup.model.n_sensors)))
    rows = sorted((r for rs in per_sensor for r in rs), key=lambda r: (r["k"], r["sensor"]))
    return AnalysisResult(rows, LONG_FIELDS)


def run_relations(setup: ScenarioSetup, ctx: RunContext) -> AnalysisResult:
    """One-step theorem verdicts over L; limiting chains only at the surrogate L."""
    surrogate = surrogate_fusion_step(setup.consensus)
    grid = _fusion_grid(setup)

    def at(L):
        reports = []
        for step in one_step_all(setup.model, setup.noise, setup.consensus, L, setup.sigma0):
            reports.extend(classify_relation(step, limiting=(L >= surrogate)))
        return reports

    reports = [r for rs in _parallel(ctx, at, grid) for r in rs]
    bad = counterexamples(reports)
    return AnalysisResult(
        relation_rows(reports),
        comments=[f"surrogate L={surrogate}"],
        scores={"relation_counterexamples": float(len(bad))},
    )


def run_recursive(setup: ScenarioSetup, ctx: RunContext) -> AnalysisResult:
    reports = recursive_relation_check(setup.model, setup.noise, setup.consensus, setup.fusion_steps,
                                       setup.horizon, setup.sigma0)
    violated = sum(1 for r in reports if r.asserted and not r.holds)
    return AnalysisResult(recursive_rows(reports), comments=[f"L={setup.fusion_steps}"],
                          scores={"recursive_violations": float(violated)})


def run_phi_vanishing(setup: ScenarioSetup, ctx: RunContext) -> AnalysisResult:
    result = check_phi_vanishing(setup.model, setup.noise, setup.consensus, setup.L_list, setup.sigma0)
    rows = []
    for r in result["rows"]:
        for quantity in ("phi_ts", "r_ts", "d_tf", "phi_t_minus_phi"):
            rows.append({"sensor": r["sensor"] + 1, "L": r["L"], "k": None,
                         "quantity": f"fro_{quantity}", "value": r[quantity]})
    for s in result["sensors"]:
        for quantity in ("phi_ts_ratio", "r_ts_ratio", "d_tf_ratio"):
            if s[quantity] is not None:
                rows.append({"sensor": s["sensor"] + 1, "L": None, "k": None,
                             "quantity": quantity, "value": s[quantity]})
    return AnalysisResult(rows, LONG_FIELDS, scores={"phi_vanishing_passed": float(result["passed"])})


def run_steady_state(setup: ScenarioSetup, ctx: RunContext) -> AnalysisResult:
    def at(L):
        return steady_state_all(setup.model, setup.noise, setup.consensus, L, setup.sigma0)

    states = [s for ss in _parallel(ctx, at, _fusion_grid(setup)) for s in ss]
    return AnalysisResult(
        steady_state_rows(states),
        scores={
            "trace_bound_violations": float(sum(1 for s in states if not s.bound.holds)),
            "max_signed_identity_residual": max(s.bound.signed_residual for s in states),
        },
    )


def run_monte_carlo_suite(setup: ScenarioSetup, ctx: RunContext) -> AnalysisResult:
    cfg = setup.scenario.monte_carlo
    updates = {"threads": ctx.threads}
    if ctx.seed_overridden:
        updates["seed"] = ctx.seed
    cfg = cfg.model_copy(update=updates)
    report = run_monte_carlo(setup.mc_problem(), cfg)
    return AnalysisResult(
        mc_rows(report),
        comments=[f"seed={cfg.seed}", f"n_runs={cfg.n_runs}", f"batch_size={cfg.batch_size}"],
        scores={"mc_max_rel_error": report.max_rel_error, "mc_passed": float(report.passed)},
    )


def run_trajectory(setup: ScenarioSetup, ctx: RunContext) -> AnalysisResult:
    """One simulated CMDF run with estimates next to the truth."""
    filt = DistributedFilter(setup.model, setup.noise, setup.consensus, setup.fusion_steps)
    truth = simulate_truth(setup.model, setup.noise, setup.horizon, ctx.seed, setup.x0, setup.sigma0)
    record = run_filter(filt, truth, setup.x0, setup.sigma0)
    fusion = max(s.fusion_residual for s in record.states)
    return AnalysisResult(trajectory_rows(record), comments=[f"seed={ctx.seed}", f"L={setup.fusion_steps}"],
                          scores={"max_fusion_residual": fusion})


# ── Analysis Suite Definitions ───────────────────────────────────────

ANALYSIS_SUITES = {
    "one_step_sweep": {
        "task": run_one_step_sweep,
        "output": "one_step_sweep.csv",
        "description": "indices, Φ traces and R^ts vs L from an equal start",
    },
    "time_sweep": {
        "task": run_time_sweep,
        "output": "time_sweep.csv",
        "description": "indices vs k at the scenario fusion step",
    },
    "relations": {
        "task": run_relations,
        "output": "relations.csv",
        "description": "one-step and limiting ordering theorems",
    },
    "recursive": {
        "task": run_recursive,
        "output": "recursive.csv",
        "description": "recursive ordering chains over k",
    },
    "phi_vanishing": {
        "task": run_phi_vanishing,
        "output": "phi_vanishing.csv",
        "description": "decay of Φ^ts, R^ts and Σ^t − Σ^f in L",
    },
    "steady_state": {
        "task": run_steady_state,
        "output": "steady_state.csv",
        "description": "DARE/DLE solutions and trace bounds",
    },
    "monte_carlo": {
        "task": run_monte_carlo_suite,
        "output": "monte_carlo.csv",
        "description": "empirical error covariance vs Σ^t",
    },
    "trajectory": {
        "task": run_trajectory,
        "output": "trajectory.csv",
        "description": "simulated estimates and truth",
    },
}


# ── Runner Functions ─────────────────────────────────────────────────

def _report_failure(e: Exception) -> None:
    print(f"error: {e}", file=sys.stderr)


def execute(setup: ScenarioSetup, out_dir: Path, ctx: RunContext) -> Dict[str, float]:
    """Run every selected analysis of a loaded scenario and write its outputs."""
    scores: Dict[str, float] = {}
    outputs: List[str] = []
    with track_operation(
        f"scenario:{setup.name}",
        input_data={"scenario": setup.name, "analyses": setup.analyses},
        metadata={"sha256": setup.sha256, "seed": ctx.seed, "threads": ctx.threads},
    ) as op:
        for name in setup.analyses:
            suite = ANALYSIS_SUITES[name]
            print(f"  {name}: {suite['description']}")
            span = op.add_span(name, {"scenario": setup.name})
            result = suite["task"](setup, ctx)
            path = write_csv(out_dir / suite["output"], result.rows, result.fieldnames, result.comments)
            outputs.append(path.name)
            scores.update(result.scores)
            try:
                span.end(output=result.scores)
            except Exception as e:
                logger.warning("span %s not closed: %s", name, e)
        for key, value in scores.items():
            op.log_score(key, value)
        op.set_output({"outputs": outputs, "scores": scores})

    write_manifest(out_dir / "manifest.json", scenario=setup.name, sha256=setup.sha256, seed=ctx.seed,
                   analyses=setup.analyses, outputs=outputs, scores=scores)
    return scores


def run_scenario(path, out_dir=None, seed: Optional[int] = None, threads: int = 1) -> int:
    """Load, run and write one scenario; returns the process exit status."""
    try:
        setup = load_scenario(path)
    except ScenarioError as e:
        _report_failure(e)
        return 2

    target = Path(out_dir or setup.scenario.output_dir or Path("out") / setup.name)
    ctx = RunContext(seed=setup.scenario.seed if seed is None else seed, threads=max(1, threads),
                     seed_overridden=seed is not None)
    print(f"\n{'=' * 60}")
    print(f"  Scenario: {setup.name}")
    print(f"{'=' * 60}")
    print(f"  File: {path} (sha256 {setup.sha256[:12]})")
    print(f"  Sensors: {setup.model.n_sensors} | L: {setup.L_list} | horizon: {setup.horizon} | seed: {ctx.seed}")
    try:
        scores = execute(setup, target, ctx)
    except NumericalError as e:
        _report_failure(e)
        return 3
    except (LabError, ValueError) as e:
        _report_failure(e)
        return 4

    for key, value in sorted(scores.items()):
        print(f"  {key} = {value:.6g}")
    print(f"  Done: {target}")
    return 0


def validate_scenario(path) -> int:
    try:
        setup = load_scenario(path)
    except ScenarioError as e:
        _report_failure(e)
        return 2
    print(f"{path}: ok ({setup.name}, {setup.model.n_sensors} sensors, analyses: {', '.join(setup.analyses)})")
    return 0


def run_infer_topology(out_dir=None, fusion_steps: int = 2) -> int:
    ranking = infer_example_topology(fusion_steps)
    target = Path(out_dir or Path("out") / "infer_topology")
    write_csv(target / "topology_candidates.csv", candidate_rows(ranking))
    best = ranking.best
    print(f"\nRanked {len(ranking.candidates)} candidate topologies.")
    print(f"  Best: edges {best.edges} ({best.convention}), max deviation {best.max_deviation:.3e}")
    for c in ranking.rejected:
        print(f"  Rejected: edges {c.edges} ({c.convention}): {c.reason}")
    return 0


# ── CLI ──────────────────────────────────────────────────────────────

def main(argv: Optional[List[str]] = None) -> int:
    parser = argparse.ArgumentParser(
        description="CMDF Lab Scenario Runner",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""Examples:
  python -m _lib.experiments.run_scenario run _lib/experiments/scenarios/example1.json
  python -m _lib.experiments.run_scenario run _lib/experiments/scenarios/case1.json --threads 4
  python -m _lib.experiments.run_scenario run _lib/experiments/scenarios/case5.json --seed 7 --out out/case5
  python -m _lib.experiments.run_scenario validate _lib/experiments/scenarios/case2.json
  python -m _lib.experiments.run_scenario infer-topology

Exit status: 0 success, 2 invalid scenario, 3 numerical failure, 4 analysis failure.
""",
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Library log level (default: WARNING)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Run a scenario file")
    run.add_argument("scenario", help="Path to the scenario JSON file")
    run.add_argument("--out", help="Output directory (default: scenario output_dir or out/<name>)")
    run.add_argument("--seed", type=int, help="Override the scenario and Monte Carlo seed")
    run.add_argument("--threads", type=int, default=1, help="Worker threads for sweeps and batches")

    validate = sub.add_parser("validate", help="Validate a scenario file")
    validate.add_argument("scenario", help="Path to the scenario JSON file")

    infer = sub.add_parser("infer-topology", help="Rank candidate 3-sensor example topologies")
    infer.add_argument("--out", help="Output directory (default: out/infer_topology)")
    infer.add_argument("--fusion-steps", type=int, default=2, help="Fusion step of the example (default: 2)")

    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(levelname)s %(name)s: %(message)s")

    if args.command == "run":
        return run_scenario(args.scenario, args.out, args.seed, args.threads)
    if args.command == "validate":
        return validate_scenario(args.scenario)
    return run_infer_topology(args.out, args.fusion_steps)


if __name__ == "__main__":
    sys.exit(main())
