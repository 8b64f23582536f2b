"""Tests for the index recursions and the distributed filter."""

import numpy as np
import pytest

from _lib.errors import DimensionError
from _lib.filter import (
    DistributedFilter,
    FilterState,
    IndexTriple,
    cmdf_step,
    iterate_indices,
    nominal_index_step,
    posterior_error_closed_form,
    run_filter,
    simulate_truth,
    standard_index_step,
    trajectory_rows,
    true_covariance_step,
)
from _lib.model import NoiseSpec, SystemModel, build_stacked
from _lib.network import consensus_power


# ── Thresholds ──────────────────────────────────────────────────────

FORM_RTOL = 1e-9
COLLAPSE_RTOL = 1e-10


def _m(x):
    return np.array([[float(x)]])


@pytest.fixture(scope="module")
def random_setup(make_random_problem):
    rng = np.random.default_rng(11)
    return [make_random_problem(rng) for _ in range(40)]


class TestIndexSteps:
    """Each recursion agrees with its equivalent closed form."""

    def test_forms_agree(self, random_setup):
        for model, noise, consensus, L, sigma in random_setup:
            row = consensus_power(consensus, L)[0]
            stacked = build_stacked(model, noise, row)
            std = standard_index_step(sigma, model.F, noise.Q, stacked)
            nom = nominal_index_step(sigma, model.F, noise.Qu, stacked)
            tru = true_covariance_step(sigma, model.F, noise.Q, nom, stacked)
            assert std.form_residual < FORM_RTOL
            assert nom.joseph_residual < FORM_RTOL
            assert nom.gain_residual < FORM_RTOL
            assert nom.identity_residual < FORM_RTOL
            assert tru.form_residual < FORM_RTOL

    def test_gain_shape_checked(self):
        model = SystemModel(np.eye(2), (np.ones((1, 2)),))
        noise = NoiseSpec.matched(np.eye(2), [_m(1.0)])
        stacked = build_stacked(model, noise, [1.0])
        nom = nominal_index_step(np.eye(2), model.F, noise.Qu, stacked)
        other = SystemModel(np.eye(2), (np.eye(2),))
        other_stacked = build_stacked(other, NoiseSpec.matched(np.eye(2), [np.eye(2)]), [1.0])
        with pytest.raises(DimensionError):
            true_covariance_step(np.eye(2), model.F, noise.Q, nom, other_stacked)


class TestMatchedCollapse:
    """With ΔQ = 0 and ΔR = 0 the three indices coincide."""

    def test_collapse_over_time_and_fusion_steps(self, scalar_case_model, simulation_consensus, case_noise):
        noise = case_noise(10.0, 10.0)
        for L in range(1, 11):
            rows = consensus_power(simulation_consensus, L)
            for i in range(5):
                history = iterate_indices(scalar_case_model, noise, rows[i], _m(20.0), 100)
                for std, nom, tru in zip(history.standard, history.nominal, history.true):
                    scale = 1.0 + np.linalg.norm(std.post)
                    assert np.linalg.norm(std.post - nom.post) < COLLAPSE_RTOL * scale
                    assert np.linalg.norm(std.post - tru.post) < COLLAPSE_RTOL * scale


class TestDistributedFilter:
    def test_fusion_matches_power(self, example_consensus):
        model = SystemModel(_m(1.0), (_m(1.0),) * 3)
        noise = NoiseSpec.matched(_m(1.0), [_m(1.0)] * 3)
        filt = DistributedFilter(model, noise, example_consensus, 4)
        values = np.arange(3.0).reshape(3, 1)
        expected = consensus_power(example_consensus, 4) @ values
        assert np.allclose(filt.fuse(values), expected)

    def test_information_matches_nominal_posterior(self, example_consensus):
        model = SystemModel(_m(1.0), (_m(1.0),) * 3)
        noise = NoiseSpec(Q=_m(1.0), Qu=_m(2.0), R=(_m(1.0), _m(1.0), _m(0.1)),
                          Ru=(_m(1.0), _m(1.0), _m(0.11)))
        filt = DistributedFilter(model, noise, example_consensus, 2)
        state = FilterState.initial(3, [0.0])
        triple = IndexTriple.equal_start(3, _m(4.0))
        state, triple = cmdf_step(filt, state, triple, [np.array([1.0])] * 3)
        assert state.fusion_residual < FORM_RTOL
        assert state.k == 1
        assert len(triple.gains) == 3

    def test_batch_matches_single(self, example_consensus):
        model = SystemModel(_m(1.0), (_m(1.0),) * 3)
        noise = NoiseSpec.matched(_m(1.0), [_m(1.0)] * 3)
        filt = DistributedFilter(model, noise, example_consensus, 2)
        ys = [np.array([[0.5], [1.5]]) for _ in range(3)]
        batch_state, _ = filt.step(FilterState.initial(3, [0.0], batch=2),
                                   IndexTriple.equal_start(3, _m(1.0)), ys)
        single_state, _ = filt.step(FilterState.initial(3, [0.0]),
                                    IndexTriple.equal_start(3, _m(1.0)), [y[1] for y in ys])
        assert batch_state.xhat_post.shape == (3, 2, 1)
        assert np.allclose(batch_state.xhat_post[:, 1], single_state.xhat_post)

    def test_missing_measurement(self, example_consensus):
        model = SystemModel(_m(1.0), (_m(1.0),) * 3)
        filt = DistributedFilter(model, NoiseSpec.matched(_m(1.0), [_m(1.0)] * 3), example_consensus, 1)
        with pytest.raises(ValueError):
            filt.step(FilterState.initial(3, [0.0]), IndexTriple.equal_start(3, _m(1.0)),
                      [np.array([1.0]), None, np.array([1.0])])

    def test_fusion_steps_validated(self, example_consensus):
        model = SystemModel(_m(1.0), (_m(1.0),) * 3)
        with pytest.raises(ValueError):
            DistributedFilter(model, NoiseSpec.matched(_m(1.0), [_m(1.0)] * 3), example_consensus, 0)


class TestPosteriorError:
    """The estimate error follows the closed-form propagation."""

    def test_closed_form_matches_filter(self, example_consensus):
        model = SystemModel(_m(1.0), (_m(1.0),) * 3)
        noise = NoiseSpec(Q=_m(1.0), Qu=_m(2.0), R=(_m(1.0), _m(1.0), _m(0.1)),
                          Ru=(_m(1.0), _m(1.0), _m(0.11)))
        filt = DistributedFilter(model, noise, example_consensus, 2)
        truth = simulate_truth(model, noise, 1, seed=5, sigma0=_m(4.0))
        record = run_filter(filt, truth, sigma0=_m(4.0))
        prior_error = truth.states[1] - record.states[1].xhat_prior
        for i in range(3):
            nominal = nominal_index_step(_m(4.0), model.F, noise.Qu, filt.stacked[i])
            e_post = posterior_error_closed_form(nominal, filt.stacked[i], prior_error[i],
                                                 truth.measurement_noise[0])
            assert np.allclose(e_post, truth.states[1] - record.states[1].xhat_post[i])


class TestTrajectory:
    def test_deterministic(self):
        model = SystemModel(_m(1.0), (_m(1.0),) * 2)
        noise = NoiseSpec.matched(_m(1.0), [_m(1.0)] * 2)
        a = simulate_truth(model, noise, 10, seed=3)
        b = simulate_truth(model, noise, 10, seed=3)
        assert np.array_equal(a.states, b.states)
        assert a.horizon == 10

    def test_rows(self, example_consensus):
        model = SystemModel(_m(1.0), (_m(1.0),) * 3)
        noise = NoiseSpec.matched(_m(1.0), [_m(1.0)] * 3)
        filt = DistributedFilter(model, noise, example_consensus, 2)
        record = run_filter(filt, simulate_truth(model, noise, 5, seed=1))
        rows = trajectory_rows(record)
        assert len(rows) == 6 * 3
        assert rows[0]["sensor"] == 1
        assert {"estimate_0", "truth_0", "trace_sigma_t"} <= set(rows[0])

    def test_horizon_validated(self):
        model = SystemModel(_m(1.0), (_m(1.0),))
        with pytest.raises(ValueError):
            simulate_truth(model, NoiseSpec.matched(_m(1.0), [_m(1.0)]), 0, seed=1)
