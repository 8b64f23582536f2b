"""Communication topology, Metropolis weights and consensus-matrix checks.

Check functions return result dicts with a top-level ``"passed"`` flag plus
per-row or per-bound details, so they can be logged or written as report
rows without conversion.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Any, Dict, FrozenSet, Iterable, List, Sequence, Tuple, Union

import numpy as np

from _lib.errors import (
    ConsensusMatrixError,
    ConvergenceError,
    DimensionError,
    DisconnectedTopologyError,
)
from _lib.linalg import as_matrix, frobenius

logger = logging.getLogger(__name__)

STOCHASTIC_ATOL = 1e-12
BOUND_RTOL = 1e-10
SURROGATE_GAP = 1e-10
SURROGATE_MAX_STEPS = 100_000


# ── Topology ─────────────────────────────────────────────────────────

@dataclass(frozen=True)
class Topology:
    """Undirected connected graph on sensors 0..N-1 (self-loops implicit)."""

    n_sensors: int
    edges: FrozenSet[Tuple[int, int]]

    def __post_init__(self):
        n = int(self.n_sensors)
        if n < 1:
            raise ValueError("a topology needs at least one sensor")
        normalized = set()
        for i, j in self.edges:
            i, j = int(i), int(j)
            if i == j:
                raise ValueError(f"self-loop ({i}, {j}) given explicitly; self-loops are implicit")
            if not (0 <= i < n and 0 <= j < n):
                raise ValueError(f"edge ({i}, {j}) references a sensor outside 0..{n - 1}")
            normalized.add((min(i, j), max(i, j)))
        object.__setattr__(self, "n_sensors", n)
        object.__setattr__(self, "edges", frozenset(normalized))
        if not self._is_connected():
            raise DisconnectedTopologyError(
                f"topology on {n} sensors with edges {self.labels()} is not connected"
            )

    def _is_connected(self) -> bool:
        seen = {0}
        queue = deque([0])
        while queue:
            node = queue.popleft()
            for other in self.neighbors(node):
                if other not in seen:
                    seen.add(other)
                    queue.append(other)
        return len(seen) == self.n_sensors

    def neighbors(self, i: int) -> Tuple[int, ...]:
        """Neighbors of ``i`` excluding ``i`` itself."""
        out = [b if a == i else a for a, b in self.edges if i in (a, b)]
        return tuple(sorted(out))

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))

    def adjacency(self) -> np.ndarray:
        adj = np.zeros((self.n_sensors, self.n_sensors))
        for i, j in self.edges:
            adj[i, j] = adj[j, i] = 1.0
        return adj

    def labels(self) -> List[Tuple[int, int]]:
        """Edges as sorted 1-based sensor labels."""
        return sorted((i + 1, j + 1) for i, j in self.edges)

    @classmethod
    def from_labels(cls, n_sensors: int, pairs: Iterable[Sequence[int]]) -> "Topology":
        """Build from 1-based sensor labels, as written in scenario files."""
        return cls(n_sensors, frozenset((int(a) - 1, int(b) - 1) for a, b in pairs))

    @classmethod
    def path(cls, n_sensors: int) -> "Topology":
        return cls(n_sensors, frozenset((i, i + 1) for i in range(n_sensors - 1)))

    @classmethod
    def ring(cls, n_sensors: int) -> "Topology":
        if n_sensors < 3:
            return cls.path(n_sensors)
        return cls(n_sensors, frozenset((i, (i + 1) % n_sensors) for i in range(n_sensors)))

    @classmethod
    def complete(cls, n_sensors: int) -> "Topology":
        return cls(n_sensors, frozenset(
            (i, j) for i in range(n_sensors) for j in range(i + 1, n_sensors)
        ))


def random_connected_topology(rng: np.random.Generator, n_sensors: int,
                              extra_edge_prob: float = 0.3) -> Topology:
    """Random spanning tree plus independently drawn extra edges."""
    order = rng.permutation(n_sensors)
    edges = set()
    for k in range(1, n_sensors):
        parent = order[int(rng.integers(k))]
        edges.add((int(order[k]), int(parent)))
    for i in range(n_sensors):
        for j in range(i + 1, n_sensors):
            if rng.random() < extra_edge_prob:
                edges.add((i, j))
    return Topology(n_sensors, frozenset(edges))


# Ring 1–2–3–4–5–1 plus chord 2–4; the drawn 5-sensor network of the original
# simulations is not available as an edge list.
SIMULATION_TOPOLOGY = Topology.from_labels(5, [(1, 2), (2, 3), (3, 4), (4, 5), (5, 1), (2, 4)])

# Best match for the 3-sensor worked example (see experiments/infer_topology.py).
EXAMPLE_TOPOLOGY = Topology.from_labels(3, [(1, 2), (2, 3)])


# ── Consensus matrix ─────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class ConsensusMatrix:
    """Doubly stochastic, nonnegative weight matrix with positive diagonal."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.array(as_matrix(self.weights, "weights"), dtype=float)
        if w.shape[0] != w.shape[1]:
            raise DimensionError(f"consensus matrix must be square, got {w.shape}")
        if np.any(w < -STOCHASTIC_ATOL):
            raise ConsensusMatrixError("consensus matrix has negative entries")
        if np.any(np.abs(w.sum(axis=1) - 1.0) > STOCHASTIC_ATOL):
            raise ConsensusMatrixError("consensus matrix rows do not sum to 1")
        if np.any(np.abs(w.sum(axis=0) - 1.0) > STOCHASTIC_ATOL):
            raise ConsensusMatrixError("consensus matrix columns do not sum to 1")
        if np.any(np.diag(w) <= 0.0):
            raise ConsensusMatrixError("consensus matrix has a non-positive diagonal entry")
        w.flags.writeable = False
        object.__setattr__(self, "weights", w)

    @property
    def n(self) -> int:
        return self.weights.shape[0]

    @property
    def row_sums(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    @property
    def col_sums(self) -> np.ndarray:
        return self.weights.sum(axis=0)

    @property
    def is_symmetric(self) -> bool:
        return bool(np.array_equal(self.weights, self.weights.T))

    def in_weights(self, i: int) -> List[Tuple[int, float]]:
        """(j, l_ij) for every j with a nonzero weight into sensor ``i``, self included."""
        row = self.weights[i]
        return [(int(j), float(row[j])) for j in np.flatnonzero(row)]


MatrixLike = Union[ConsensusMatrix, np.ndarray]


def _weights(L: MatrixLike) -> np.ndarray:
    return L.weights if isinstance(L, ConsensusMatrix) else as_matrix(L, "L")


def metropolis_weights(topology: Topology, include_self: bool = True) -> ConsensusMatrix:
    """l_ij = 1/max(|N_i|, |N_j|) on edges, l_ii = 1 − Σ_{j≠i} l_ij.

    ``include_self`` selects whether |N_i| counts the sensor itself
    (degree + 1) or only its neighbors (degree).
    """
    n = topology.n_sensors
    offset = 1 if include_self else 0
    size = [topology.degree(i) + offset for i in range(n)]
    w = np.zeros((n, n))
    for i, j in sorted(topology.edges):
        w[i, j] = w[j, i] = 1.0 / max(size[i], size[j])
    for i in range(n):
        w[i, i] = 1.0 - w[i].sum()
    return ConsensusMatrix(w)


def consensus_power(L: MatrixLike, m: int) -> np.ndarray:
    """𝓛^m by repeated multiplication (𝓛^0 = I)."""
    if int(m) != m or m < 0:
        raise ValueError(f"power must be a non-negative integer, got {m}")
    w = _weights(L)
    result = np.eye(w.shape[0])
    for _ in range(int(m)):
        result = result @ w
    return result


def consensus_powers(L: MatrixLike, m_max: int) -> List[np.ndarray]:
    """[𝓛^0, 𝓛^1, ..., 𝓛^m_max]."""
    w = _weights(L)
    out = [np.eye(w.shape[0])]
    for _ in range(int(m_max)):
        out.append(out[-1] @ w)
    return out


@dataclass(frozen=True, eq=False)
class ConsensusDeviation:
    lbar: np.ndarray
    gamma: int
    m: int


def _check_gamma(gamma: int) -> int:
    if gamma not in (0, 1):
        raise ValueError(f"gamma must be 0 or 1, got {gamma}")
    return int(gamma)


def deviation_from_power(power: np.ndarray, gamma: int) -> np.ndarray:
    """Entrywise (N·l)² − γ·N·l."""
    scaled = power.shape[0] * power
    return scaled ** 2 - _check_gamma(gamma) * scaled


def consensus_deviation(L: MatrixLike, m: int, gamma: int) -> ConsensusDeviation:
    if int(m) != m or m < 1:
        raise ValueError(f"fusion power must be a positive integer, got {m}")
    gamma = _check_gamma(gamma)
    return ConsensusDeviation(deviation_from_power(consensus_power(L, m), gamma), gamma, int(m))


def _check_steps(d: int, m: int) -> None:
    if d < 1:
        raise ValueError(f"reference step d must be >= 1, got {d}")
    if m < d:
        raise ValueError(f"m ({m}) must be >= d ({d})")


def check_majorization_sums(L: MatrixLike, d: int, m: int, gamma: int) -> Dict[str, Any]:
    """(1−γ)N ≤ Σ_j l̄^(m)_ij ≤ Σ_j l̄^(d)_ij for every row i."""
    _check_steps(d, m)
    n = _weights(L).shape[0]
    tol = BOUND_RTOL * n * n
    sums_m = consensus_deviation(L, m, gamma).lbar.sum(axis=1)
    sums_d = consensus_deviation(L, d, gamma).lbar.sum(axis=1)
    lower = (1 - gamma) * n
    rows = []
    for i in range(n):
        ok = bool(sums_m[i] >= lower - tol and sums_m[i] <= sums_d[i] + tol)
        rows.append({"row": i, "sum_m": float(sums_m[i]), "sum_d": float(sums_d[i]), "passed": ok})
    return {
        "passed": all(r["passed"] for r in rows),
        "lower_bound": float(lower),
        "d": d,
        "m": m,
        "gamma": gamma,
        "rows": rows,
    }


def check_entry_bounds(L: MatrixLike, d: int, m: int) -> Dict[str, Any]:
    """Entries of 𝓛^m lie within [min 𝓛^d, max 𝓛^d]; 1/N ≤ l_high ≤ 1, 0 ≤ l_low ≤ 1/N."""
    _check_steps(d, m)
    power_d = consensus_power(L, d)
    power_m = consensus_power(L, m)
    n = power_d.shape[0]
    low, high = float(power_d.min()), float(power_d.max())
    tol = BOUND_RTOL
    within = bool(power_m.min() >= low - tol and power_m.max() <= high + tol)
    high_ok = bool(1.0 / n - tol <= high <= 1.0 + tol)
    low_ok = bool(-tol <= low <= 1.0 / n + tol)
    return {
        "passed": within and high_ok and low_ok,
        "l_low": low,
        "l_high": high,
        "entry_min": float(power_m.min()),
        "entry_max": float(power_m.max()),
        "entries_within": within,
        "l_high_in_range": high_ok,
        "l_low_in_range": low_ok,
    }


def check_lbar_bounds(L: MatrixLike, d: int, m: int, gamma: int) -> Dict[str, Any]:
    """min{−γ/4, f(l_low)} ≤ l̄^(m)_ij ≤ f(l_high) with f(x) = (Nx)² − γNx."""
    _check_steps(d, m)
    gamma = _check_gamma(gamma)
    power_d = consensus_power(L, d)
    n = power_d.shape[0]
    low, high = float(power_d.min()), float(power_d.max())

    def f(x: float) -> float:
        return (n * x) ** 2 - gamma * n * x

    lower = min(-gamma / 4.0, f(low))
    upper = f(high)
    # f is convex, so its minimum over [low, high] sits at the clipped vertex
    tight_lower = f(min(max(gamma / (2.0 * n), low), high))
    lbar = consensus_deviation(L, m, gamma).lbar
    tol = BOUND_RTOL * n * n
    entry_min, entry_max = float(lbar.min()), float(lbar.max())
    return {
        "passed": bool(entry_min >= tight_lower - tol and entry_max <= upper + tol),
        "lower_bound": lower,
        "tight_lower_bound": tight_lower,
        "upper_bound": upper,
        "entry_min": entry_min,
        "entry_max": entry_max,
    }


def check_hadamard_singular(A, B) -> Dict[str, Any]:
    """σ_max(A ∘ B) ≤ σ_max(A)·σ_max(B)."""
    A, B = as_matrix(A, "A"), as_matrix(B, "B")
    if A.shape != B.shape:
        raise DimensionError(f"shapes differ: {A.shape} vs {B.shape}")
    s_ab = float(np.linalg.norm(A * B, 2))
    product = float(np.linalg.norm(A, 2) * np.linalg.norm(B, 2))
    return {
        "passed": s_ab <= product + 1e-12 * (1.0 + product),
        "sigma_hadamard": s_ab,
        "sigma_product": product,
        "margin": product - s_ab,
    }


# ── Convergence helpers ──────────────────────────────────────────────

def consensus_gap(L: MatrixLike, m: int) -> float:
    """‖𝓛^m − 11ᵀ/N‖_F."""
    power = consensus_power(L, m)
    n = power.shape[0]
    return frobenius(power - np.full((n, n), 1.0 / n))


def second_largest_eigenvalue_modulus(L: MatrixLike) -> float:
    w = _weights(L)
    if w.shape[0] == 1:
        return 0.0
    moduli = np.sort(np.abs(np.linalg.eigvals(w)))[::-1]
    return float(moduli[1])


@dataclass(frozen=True)
class GeometricFit:
    ratio: float
    log_slope: float
    r_squared: float


def fit_geometric_decay(ms: Sequence[float], values: Sequence[float]) -> GeometricFit:
    """Least-squares line through (m, log value); ratio = exp(slope)."""
    ms = np.asarray(ms, dtype=float)
    values = np.asarray(values, dtype=float)
    if ms.shape != values.shape or ms.size < 2:
        raise ValueError("need at least two (m, value) pairs of equal length")
    if np.any(values <= 0):
        raise ValueError("geometric fit needs strictly positive values")
    logs = np.log(values)
    slope, intercept = np.polyfit(ms, logs, 1)
    fitted = slope * ms + intercept
    ss_res = float(np.sum((logs - fitted) ** 2))
    ss_tot = float(np.sum((logs - logs.mean()) ** 2))
    r_squared = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return GeometricFit(float(np.exp(slope)), float(slope), r_squared)


def surrogate_fusion_step(L: MatrixLike, threshold: float = SURROGATE_GAP) -> int:
    """Smallest L ≥ 1 with ‖𝓛^L − 11ᵀ/N‖_F < threshold; stands in for L → ∞."""
    w = _weights(L)
    n = w.shape[0]
    uniform = np.full((n, n), 1.0 / n)
    power = w.copy()
    for step in range(1, SURROGATE_MAX_STEPS + 1):
        if frobenius(power - uniform) < threshold:
            logger.debug("surrogate fusion step %d (threshold %.1e)", step, threshold)
            return step
        power = power @ w
    raise ConvergenceError(
        f"no convergence: consensus gap above {threshold:g} after {SURROGATE_MAX_STEPS} steps",
        "network", "surrogate_fusion_step",
    )
