"""Tests for the system model, noise specification and stacked operators."""

import numpy as np
import pytest

from _lib.errors import DimensionError, NotPositiveDefiniteError
from _lib.model import NoiseSpec, SystemModel, build_stacked, information_sum


def _m(x):
    return np.array([[float(x)]])


@pytest.fixture
def three_sensors():
    model = SystemModel(_m(1.0), (_m(1.0), _m(1.0), _m(1.0)))
    noise = NoiseSpec(Q=_m(1.0), Qu=_m(2.0), R=(_m(1.0), _m(1.0), _m(0.1)),
                      Ru=(_m(1.0), _m(1.0), _m(0.11)))
    return model, noise


class TestSystemModel:
    def test_dimensions(self):
        model = SystemModel(np.eye(2), (np.ones((1, 2)), np.eye(2)))
        assert model.n == 2
        assert model.n_sensors == 2
        assert model.sensor_dims == (1, 2)

    def test_non_square_F(self):
        with pytest.raises(DimensionError):
            SystemModel(np.ones((2, 3)), (np.ones((1, 3)),))

    def test_H_width(self):
        with pytest.raises(DimensionError):
            SystemModel(np.eye(2), (np.ones((1, 3)),))


class TestNoiseSpec:
    def test_mismatch_signs(self, three_sensors):
        _, noise = three_sensors
        assert noise.dQ[0, 0] == pytest.approx(1.0)
        assert noise.dR[2][0, 0] == pytest.approx(0.01)

    def test_matched(self):
        noise = NoiseSpec.matched(_m(1.0), [_m(2.0)])
        assert np.array_equal(noise.dQ, _m(0.0))

    def test_not_positive_definite(self):
        with pytest.raises(NotPositiveDefiniteError):
            NoiseSpec(Q=_m(-1.0), Qu=_m(1.0), R=(_m(1.0),), Ru=(_m(1.0),))

    def test_sensor_count(self):
        with pytest.raises(DimensionError):
            NoiseSpec(Q=_m(1.0), Qu=_m(1.0), R=(_m(1.0),), Ru=(_m(1.0), _m(1.0)))


class TestStackedOperators:
    def test_inactive_sensors_dropped(self, three_sensors):
        model, noise = three_sensors
        stacked = build_stacked(model, noise, [0.5, 0.5, 0.0])
        assert stacked.active == (0, 1)
        assert stacked.Htilde.shape == (2, 1)
        assert len(stacked.H_blocks) == 2

    def test_scaled_covariances(self, three_sensors):
        model, noise = three_sensors
        row = np.array([0.25, 0.25, 0.5])
        stacked = build_stacked(model, noise, row)
        h = 1.0 / (3 * row)
        assert np.allclose(np.diag(stacked.Rtilde), h * np.array([1.0, 1.0, 0.1]))
        assert np.allclose(np.diag(stacked.Rtilde_u), h * np.array([1.0, 1.0, 0.11]))
        assert np.allclose(np.diag(stacked.dRbar), [0.0, 0.0, 0.01])

    def test_information_matches_sum(self, three_sensors):
        model, noise = three_sensors
        row = np.array([0.2, 0.3, 0.5])
        stacked = build_stacked(model, noise, row)
        assert np.allclose(stacked.information(), information_sum(row, model.H, noise.R))
        assert np.allclose(stacked.information(nominal=True), information_sum(row, model.H, noise.Ru))

    def test_true_information(self, three_sensors):
        model, noise = three_sensors
        row = np.array([1 / 3, 1 / 3, 1 / 3])
        stacked = build_stacked(model, noise, row)
        # N·l = 1 for every sensor
        expected = 1.0 + 1.0 + 0.1 / 0.11 ** 2
        assert stacked.true_information()[0, 0] == pytest.approx(expected)

    def test_row_must_be_stochastic(self, three_sensors):
        model, noise = three_sensors
        with pytest.raises(ValueError):
            build_stacked(model, noise, [0.5, 0.2, 0.2])

    def test_row_length(self, three_sensors):
        model, noise = three_sensors
        with pytest.raises(DimensionError):
            build_stacked(model, noise, [0.5, 0.5])
