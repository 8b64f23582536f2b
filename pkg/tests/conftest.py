"""Shared pytest fixtures for CMDF lab tests."""

import os
import sys
from pathlib import Path

import numpy as np
import pytest

# Ensure lab/ is on the path for imports
sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "lab"))

from _lib.model import NoiseSpec, SystemModel
from _lib.network import (
    EXAMPLE_TOPOLOGY,
    SIMULATION_TOPOLOGY,
    metropolis_weights,
    random_connected_topology,
)

SCENARIO_DIR = Path(__file__).resolve().parent.parent / "lab" / "_lib" / "experiments" / "scenarios"


def _spd(rng: np.random.Generator, n: int, low: float = 0.5, high: float = 3.0) -> np.ndarray:
    """Random SPD matrix with eigenvalues in [low, high]."""
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    return (q * rng.uniform(low, high, n)) @ q.T


def _scalar(value: float) -> np.ndarray:
    return np.array([[float(value)]])


# ── Fixtures ─────────────────────────────────────────────────────────

@pytest.fixture(scope="session")
def scenario_dir() -> Path:
    return SCENARIO_DIR


@pytest.fixture(scope="session")
def example_consensus():
    """Path 1-2-3 with Metropolis weights counting the sensor itself."""
    return metropolis_weights(EXAMPLE_TOPOLOGY, include_self=True)


@pytest.fixture(scope="session")
def simulation_consensus():
    """The shipped 5-sensor ring with chord 2-4."""
    return metropolis_weights(SIMULATION_TOPOLOGY, include_self=True)


@pytest.fixture(scope="session")
def scalar_case_model():
    """F=2, H_i=1 on five sensors."""
    return SystemModel(_scalar(2.0), (_scalar(1.0),) * 5)


@pytest.fixture(scope="session")
def case_noise():
    """Q=10, R_i=10 with per-case nominal Qu and Ru_i."""

    def build(qu: float, ru) -> NoiseSpec:
        if np.isscalar(ru):
            ru = [ru] * 5
        return NoiseSpec(
            Q=_scalar(10.0),
            Qu=_scalar(qu),
            R=tuple(_scalar(10.0) for _ in range(5)),
            Ru=tuple(_scalar(r) for r in ru),
        )

    return build


@pytest.fixture(scope="session")
def make_random_problem():
    """Factory for random (model, noise, consensus, L, sigma_prev) problems."""

    def build(rng: np.random.Generator, max_state: int = 4, max_sensors: int = 6,
              n_sensors: int = None):
        n = int(rng.integers(1, max_state + 1))
        N = int(n_sensors or rng.integers(1, max_sensors + 1))
        F = rng.standard_normal((n, n)) * 0.8
        dims = [int(rng.integers(1, 3)) for _ in range(N)]
        H = tuple(rng.standard_normal((m, n)) for m in dims)
        noise = NoiseSpec(
            Q=_spd(rng, n),
            Qu=_spd(rng, n),
            R=tuple(_spd(rng, m) for m in dims),
            Ru=tuple(_spd(rng, m) for m in dims),
        )
        topology = random_connected_topology(rng, N)
        consensus = metropolis_weights(topology, include_self=True)
        L = int(rng.integers(1, 6))
        return SystemModel(F, H), noise, consensus, L, _spd(rng, n)

    return build
