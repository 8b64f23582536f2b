#!/usr/bin/env python3
"""Walk through the 3-sensor worked example without the scenario runner."""

import os
import sys

# Add lab directory to path
sys.path.insert(0, os.path.join(os.path.dirname(__file__), 'lab'))

import numpy as np

from _lib.analysis import classify_relation, difference_report, one_step_all
from _lib.experiments.infer_topology import (
    EXAMPLE_MODEL,
    EXAMPLE_NOISE,
    EXAMPLE_SIGMA_PREV,
    MATCH_TOLERANCE,
    PUBLISHED_SIGMA,
    PUBLISHED_SIGMA_T,
    infer_example_topology,
)
from _lib.network import EXAMPLE_TOPOLOGY, metropolis_weights


def test_example1():
    """Reproduce the published one-step values of the worked example."""
    print("=" * 80)
    print("WORKED EXAMPLE: 3 SENSORS, L = 2")
    print("=" * 80)

    consensus = metropolis_weights(EXAMPLE_TOPOLOGY)
    print("\nConsensus matrix:")
    print(np.array2string(consensus.weights, precision=4))

    steps = one_step_all(EXAMPLE_MODEL, EXAMPLE_NOISE, consensus, 2, EXAMPLE_SIGMA_PREV)
    print("\nsensor  Σ (ours)  Σ (published)  Σ^t (ours)  Σ^t (published)")
    ok = True
    for step, sigma, sigma_t in zip(steps, PUBLISHED_SIGMA, PUBLISHED_SIGMA_T):
        ours, ours_t = step.sigma[0, 0], step.sigma_t[0, 0]
        match = abs(ours - sigma) < MATCH_TOLERANCE and abs(ours_t - sigma_t) < MATCH_TOLERANCE
        ok = ok and match
        mark = "✅" if match else "❌"
        print(f"  {mark} {step.sensor + 1}   {ours:.6f}  {sigma:.4f}        {ours_t:.6f}    {sigma_t:.4f}")

    print("\nDecomposition residuals:")
    for step in steps:
        worst = max(difference_report(step).residuals.values())
        print(f"  sensor {step.sensor + 1}: max residual {worst:.2e}")

    print("\nTheorems asserted:")
    for step in steps:
        for report in classify_relation(step):
            if report.status != "not asserted":
                print(f"  sensor {step.sensor + 1}: {report.theorem_id} {report.predicted_ordering} -> {report.status}")

    print("\nTopology ranking (top 3):")
    ranking = infer_example_topology(2)
    for cand in ranking.candidates[:3]:
        edges = " ".join(f"{a}-{b}" for a, b in cand.edges)
        print(f"  {edges:<12} {cand.convention:<9} max deviation {cand.max_deviation:.2e}")

    print("\n" + "=" * 80)
    assert ok
    assert ranking.best.matches


if __name__ == "__main__":
    test_example1()
