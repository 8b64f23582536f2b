#!/usr/bin/env python3
"""End-to-end regression suite for the CMDF lab.

Each class pins one published or derived behaviour of the lab: the worked
example, the decomposition identities over random scenarios, the ordering
theorems over a sign-patterned grid, convergence and trace bounds on every
shipped scenario, the Monte Carlo check and the qualitative case studies.

Usage:
    pytest tests/test_lab_regression.py -v
    pytest tests/test_lab_regression.py -v -k example
    pytest tests/test_lab_regression.py -v -k monte
"""

import numpy as np
import pytest

from _lib.analysis import (
    classify_relation,
    counterexamples,
    difference_report,
    one_step_all,
    recursive_relation_check,
)
from _lib.experiments.infer_topology import (
    EXAMPLE_MODEL,
    EXAMPLE_NOISE,
    EXAMPLE_SIGMA_PREV,
    MATCH_TOLERANCE,
    PUBLISHED_SIGMA,
    PUBLISHED_SIGMA_T,
    infer_example_topology,
)
from _lib.filter import iterate_indices
from _lib.linalg import Ordering, loewner_compare
from _lib.model import NoiseSpec, SystemModel
from _lib.montecarlo import McConfig, run_monte_carlo, sampling_rate_slope
from _lib.network import consensus_power, surrogate_fusion_step
from _lib.scenario import load_scenario
from _lib.steady_state import steady_state, steady_state_all


# ── Thresholds ──────────────────────────────────────────────────────

RECONSTRUCTION_RTOL = 1e-9
PHI_IDENTITY_RTOL = 1e-10
ORDERING_RTOL = 1e-9
ITERATE_RTOL = 1e-8
SIGNED_IDENTITY_RTOL = 1e-9
MC_REL_ERROR_MAX = 0.01
RANDOM_SCENARIOS = 1000
CONVERGENCE_STEPS = 2000
SHIPPED = ["example1", "case1", "case2", "case3_qu_high", "case3_qu_low", "case4", "case5"]


def _m(x):
    return np.array([[float(x)]])


# ── Fixtures ─────────────────────────────────────────────────────────

@pytest.fixture(scope="session")
def shipped(scenario_dir):
    return {name: load_scenario(scenario_dir / f"{name}.json") for name in SHIPPED}


# ── Worked example ───────────────────────────────────────────────────

class TestWorkedExample:
    """The 3-sensor example reproduces its published values."""

    def test_best_topology_matches(self):
        ranking = infer_example_topology(2)
        best = ranking.best
        assert best.matches, f"best deviation {best.max_deviation:.3e}"
        assert best.edges == ((1, 2), (2, 3))
        assert best.convention == "degree+1"
        assert all(not c.accepted for c in ranking.rejected)

    def test_one_step_values(self, example_consensus):
        steps = one_step_all(EXAMPLE_MODEL, EXAMPLE_NOISE, example_consensus, 2, EXAMPLE_SIGMA_PREV)
        for step, sigma, sigma_t in zip(steps, PUBLISHED_SIGMA, PUBLISHED_SIGMA_T):
            assert abs(step.sigma[0, 0] - sigma) < MATCH_TOLERANCE
            assert abs(step.sigma_t[0, 0] - sigma_t) < MATCH_TOLERANCE


# ── Identities over random scenarios ─────────────────────────────────

class TestRandomIdentities:
    """Decompositions and Φ identities over seeded random scenarios."""

    def test_reconstructions(self, make_random_problem):
        rng = np.random.default_rng(2024)
        for index in range(RANDOM_SCENARIOS):
            model, noise, consensus, L, sigma = make_random_problem(rng)
            for step in one_step_all(model, noise, consensus, L, sigma):
                assert step.phi.phi_identity_residual < PHI_IDENTITY_RTOL, index
                report = difference_report(step)
                assert "tf_dq_form" in report.residuals, index
                for name, residual in report.residuals.items():
                    assert residual < RECONSTRUCTION_RTOL, (index, name)
                assert report.ts.tilde_verdict.geq, index

    def test_single_sensor_ordering(self, make_random_problem):
        rng = np.random.default_rng(77)
        for index in range(RANDOM_SCENARIOS):
            model, noise, consensus, L, sigma = make_random_problem(rng, n_sensors=1)
            step = one_step_all(model, noise, consensus, L, sigma)[0]
            verdict = loewner_compare(step.sigma_t, step.sigma)
            scale = 1.0 + max(np.linalg.norm(step.sigma_t), np.linalg.norm(step.sigma))
            assert verdict.min_eig_of_difference >= -ORDERING_RTOL * scale, index


# ── Ordering theorems over a sign grid ───────────────────────────────

def _scalar_grid():
    model = SystemModel(_m(2.0), (_m(1.0),) * 5)
    for qu in (5.0, 10.0, 20.0):
        for ru in ([10.0] * 5, [20.0] * 5, [5.0] * 5, [10.0, 20.0, 10.0, 20.0, 10.0],
                   [10.0, 5.0, 10.0, 5.0, 10.0], [10.0, 12.0, 10.0, 10.0, 5.0]):
            yield model, NoiseSpec(_m(10.0), _m(qu), tuple(_m(10.0) for _ in ru), tuple(_m(r) for r in ru))


def _matrix_grid():
    H = tuple(np.array([row], dtype=float) for row in ([1, 0], [0, 1], [1, 1], [1, -1], [2, 1]))
    model = SystemModel(np.array([[1.0, 0.1], [0.0, 0.9]]), H)
    Q = np.eye(2)
    for q_scale in (0.5, 1.0, 2.0):
        for r_scales in ([1.0] * 5, [2.0] * 5, [0.5] * 5, [1.0, 2.0, 1.0, 2.0, 1.0], [1.0, 0.5, 1.0, 0.5, 1.0]):
            yield model, NoiseSpec(Q, q_scale * Q, tuple(_m(1.0) for _ in r_scales),
                                   tuple(_m(s) for s in r_scales))


class TestRelationGrid:
    """Whenever a theorem's preconditions pass, its ordering chain holds."""

    @pytest.mark.parametrize("grid", [_scalar_grid, _matrix_grid], ids=["scalar", "matrix"])
    def test_no_counterexamples(self, grid, simulation_consensus):
        surrogate = surrogate_fusion_step(simulation_consensus)
        asserted = 0
        for model, noise in grid():
            sigma_prev = 20.0 * np.eye(model.n)
            for L in list(range(1, 11)) + [surrogate]:
                for step in one_step_all(model, noise, simulation_consensus, L, sigma_prev):
                    reports = classify_relation(step, limiting=(L == surrogate))
                    assert not counterexamples(reports), [r.theorem_id for r in counterexamples(reports)]
                    asserted += sum(1 for r in reports if r.status == "holds")
        assert asserted > 0


# ── Recursive ordering ───────────────────────────────────────────────

class TestRecursiveCase:
    def test_case5_chain_for_200_steps(self, shipped):
        setup = shipped["case5"]
        reports = recursive_relation_check(setup.model, setup.noise, setup.consensus, 5, 200, setup.sigma0)
        assert len(reports) == 200 * setup.model.n_sensors
        assert all(r.asserted and r.holds for r in reports)
        for r in reports:
            f_vs_s, t_vs_s, t_vs_f = r.verified_ordering
            assert f_vs_s.geq and t_vs_s.geq and t_vs_f.leq


# ── Steady state ─────────────────────────────────────────────────────

class TestConvergence:
    """Long index recursions land on the DARE/DLE solutions."""

    @pytest.mark.parametrize("name", SHIPPED)
    def test_iterates_match_steady_state(self, name, shipped):
        setup = shipped[name]
        rows = consensus_power(setup.consensus, setup.fusion_steps)
        for i in range(setup.model.n_sensors):
            history = iterate_indices(setup.model, setup.noise, rows[i], setup.sigma0, CONVERGENCE_STEPS)
            state = steady_state(setup.model, setup.noise, rows[i], setup.sigma0, sensor=i)
            nominal = history.nominal[-1].prior
            true = history.true[-1].prior
            assert np.linalg.norm(nominal - state.Sigma_f_bar) <= ITERATE_RTOL * np.linalg.norm(state.Sigma_f_bar)
            assert np.linalg.norm(true - state.Sigma_t_bar) <= ITERATE_RTOL * np.linalg.norm(state.Sigma_t_bar)
            assert state.dle.closed_form_residual < 1e-9


class TestTraceBounds:
    @pytest.mark.parametrize("name", SHIPPED)
    def test_bounds_on_fusion_grid(self, name, shipped):
        setup = shipped[name]
        surrogate = surrogate_fusion_step(setup.consensus)
        consensus_terms = {}
        for L in list(range(1, 11)) + [surrogate]:
            for state in steady_state_all(setup.model, setup.noise, setup.consensus, L, setup.sigma0):
                bound = state.bound
                assert bound.holds, (L, state.sensor)
                assert bound.signed_residual < SIGNED_IDENTITY_RTOL, (L, state.sensor)
                consensus_terms[(L, state.sensor)] = bound.rho_terms["consensus"]
        for i in range(setup.model.n_sensors):
            first = consensus_terms[(1, i)]
            assert first == 0.0 or consensus_terms[(surrogate, i)] <= 1e-6 * first


# ── Monte Carlo ──────────────────────────────────────────────────────

class TestMonteCarlo:
    """Σ^t is the covariance the nominal filter actually attains."""

    def test_million_runs(self, shipped):
        setup = shipped["example1"]
        report = run_monte_carlo(setup.mc_problem(),
                                 McConfig(n_runs=1_000_000, seed=2024, batch_size=100_000, threads=2))
        for cell in report.cells:
            assert cell.rel_error < MC_REL_ERROR_MAX, (cell.sensor, cell.rel_error)
            assert cell.unbiased

    def test_sampling_rate(self, shipped):
        slope = sampling_rate_slope(shipped["example1"].mc_problem(), seed=5)
        assert slope.passed, slope.slope


# ── Case studies ─────────────────────────────────────────────────────

def _limiting_status(setup, theorem_id):
    L = surrogate_fusion_step(setup.consensus)
    statuses = set()
    for step in one_step_all(setup.model, setup.noise, setup.consensus, L, setup.sigma0):
        statuses.update(r.status for r in classify_relation(step, limiting=True) if r.theorem_id == theorem_id)
    return statuses


class TestCaseStudies:
    """Qualitative structure of the 5-sensor cases on the shipped topology."""

    def test_case1_ordering_switches_with_l(self, shipped):
        setup = shipped["case1"]
        surrogate = surrogate_fusion_step(setup.consensus)
        early = one_step_all(setup.model, setup.noise, setup.consensus, 1, setup.sigma0)
        late = one_step_all(setup.model, setup.noise, setup.consensus, surrogate, setup.sigma0)
        switched = [
            a.sensor for a, b in zip(early, late)
            if loewner_compare(a.sigma_f, a.sigma).ordering is Ordering.GEQ
            and loewner_compare(b.sigma_f, b.sigma).ordering is Ordering.LEQ
        ]
        assert switched

    @pytest.mark.parametrize("name,theorem_id", [
        ("case2", "T4-1"),
        ("case3_qu_high", "T5-1L"),
        ("case3_qu_low", "T5-2L"),
    ])
    def test_limiting_chains(self, name, theorem_id, shipped):
        assert _limiting_status(shipped[name], theorem_id) == {"holds"}

    @pytest.mark.parametrize("name", ["case1", "case2", "case3_qu_high", "case3_qu_low", "case4"])
    def test_indices_flatten_in_l(self, name, shipped):
        setup = shipped[name]
        surrogate = surrogate_fusion_step(setup.consensus)
        at = {L: one_step_all(setup.model, setup.noise, setup.consensus, L, setup.sigma0)
              for L in (surrogate, surrogate + 10)}
        for b, c in zip(at[surrogate], at[surrogate + 10]):
            for key in ("sigma", "sigma_f", "sigma_t"):
                tail = abs(np.trace(getattr(c, key)) - np.trace(getattr(b, key)))
                assert tail <= 1e-8 * np.trace(getattr(b, key))
