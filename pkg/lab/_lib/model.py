"""System model, noise specification and per-sensor stacked operators.

``build_stacked`` turns one row of 𝓛^L into the block matrices that put
the consensus-fused correction in centralized form: H̃ stacks the H_j of the
active sensors, R̄ = diag(R_j), R̃ = diag(h_ij·R_j) with h_ij = 1/(N·l_ij).
"""

from dataclasses import dataclass
from typing import Sequence, Tuple

import numpy as np
from scipy.linalg import block_diag

from _lib.errors import DimensionError, LabError
from _lib.linalg import as_matrix, require_positive_definite, solve_spd, symmetrize

ACTIVE_THRESHOLD = 1e-14   # l_ij above this counts as a link (sign = 1)
ROW_SUM_ATOL = 1e-10


@dataclass(frozen=True, eq=False)
class SystemModel:
    """x_{k+1} = F x_k + w_k,  y_{i,k} = H_i x_k + v_{i,k}."""

    F: np.ndarray
    H: Tuple[np.ndarray, ...]

    def __post_init__(self):
        F = as_matrix(self.F, "F")
        if F.shape[0] != F.shape[1]:
            raise DimensionError(f"F must be square, got {F.shape}")
        H = tuple(as_matrix(h, f"H[{i}]") for i, h in enumerate(self.H))
        if not H:
            raise DimensionError("at least one sensor is required")
        for i, h in enumerate(H):
            if h.shape[1] != F.shape[0]:
                raise DimensionError(f"H[{i}] has {h.shape[1]} columns, state dimension is {F.shape[0]}")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "H", H)

    @property
    def n(self) -> int:
        return self.F.shape[0]

    @property
    def n_sensors(self) -> int:
        return len(self.H)

    @property
    def sensor_dims(self) -> Tuple[int, ...]:
        return tuple(h.shape[0] for h in self.H)


@dataclass(frozen=True, eq=False)
class NoiseSpec:
    """Actual (Q, R_i) and nominal (Qu, Ru_i) covariances; all SPD."""

    Q: np.ndarray
    Qu: np.ndarray
    R: Tuple[np.ndarray, ...]
    Ru: Tuple[np.ndarray, ...]

    def __post_init__(self):
        def pd(x, name):
            return require_positive_definite(x, name, "model", "NoiseSpec")

        Q, Qu = pd(self.Q, "Q"), pd(self.Qu, "Qu")
        if Q.shape != Qu.shape:
            raise DimensionError(f"Q {Q.shape} and Qu {Qu.shape} differ in shape")
        if len(self.R) != len(self.Ru):
            raise DimensionError(f"{len(self.R)} actual but {len(self.Ru)} nominal sensor covariances")
        R = tuple(pd(r, f"R[{i}]") for i, r in enumerate(self.R))
        Ru = tuple(pd(r, f"Ru[{i}]") for i, r in enumerate(self.Ru))
        for i, (r, ru) in enumerate(zip(R, Ru)):
            if r.shape != ru.shape:
                raise DimensionError(f"R[{i}] {r.shape} and Ru[{i}] {ru.shape} differ in shape")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "Qu", Qu)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "Ru", Ru)

    @classmethod
    def matched(cls, Q, R: Sequence) -> "NoiseSpec":
        return cls(Q, Q, tuple(R), tuple(R))

    @property
    def n_sensors(self) -> int:
        return len(self.R)

    @property
    def dQ(self) -> np.ndarray:
        return self.Qu - self.Q

    @property
    def dR(self) -> Tuple[np.ndarray, ...]:
        return tuple(ru - r for r, ru in zip(self.R, self.Ru))


def check_compatible(model: SystemModel, noise: NoiseSpec) -> None:
    if noise.Q.shape != (model.n, model.n):
        raise DimensionError(f"Q is {noise.Q.shape}, state dimension is {model.n}")
    if noise.n_sensors != model.n_sensors:
        raise DimensionError(f"{noise.n_sensors} sensor covariances for {model.n_sensors} sensors")
    for i, (r, m) in enumerate(zip(noise.R, model.sensor_dims)):
        if r.shape != (m, m):
            raise DimensionError(f"R[{i}] is {r.shape}, sensor {i} measures {m} values")


@dataclass(frozen=True, eq=False)
class StackedOperators:
    """Modified measurement and covariance matrices of one sensor for a fusion step."""

    row: np.ndarray
    active: Tuple[int, ...]
    h_weights: np.ndarray
    Htilde: np.ndarray
    Rtilde: np.ndarray
    Rbar: np.ndarray
    Rtilde_u: np.ndarray
    Rbar_u: np.ndarray
    dRbar: np.ndarray
    H_blocks: Tuple[np.ndarray, ...] = ()

    @property
    def n_sensors(self) -> int:
        return self.row.shape[0]

    def information(self, nominal: bool = False) -> np.ndarray:
        """H̃ᵀR̃⁻¹H̃, or H̃ᵀ(R̃u)⁻¹H̃ when ``nominal``."""
        R = self.Rtilde_u if nominal else self.Rtilde
        return symmetrize(self.Htilde.T @ solve_spd(R, self.Htilde, "Rtilde", "model", "information"))

    def true_information(self) -> np.ndarray:
        """H̃ᵀ(R̃u)⁻¹R̄(R̃u)⁻¹H̃."""
        W = solve_spd(self.Rtilde_u, self.Htilde, "Rtilde_u", "model", "true_information")
        return symmetrize(W.T @ self.Rbar @ W)


def build_stacked(model: SystemModel, noise: NoiseSpec, row) -> StackedOperators:
    """Stack the active sensors of one 𝓛^L row, ordered by sensor index."""
    check_compatible(model, noise)
    row = np.asarray(row, dtype=float).ravel()
    N = model.n_sensors
    if row.shape[0] != N:
        raise DimensionError(f"row has {row.shape[0]} entries for {N} sensors")
    if np.any(row < -ROW_SUM_ATOL) or abs(float(row.sum()) - 1.0) > ROW_SUM_ATOL:
        raise ValueError("fusion row must be nonnegative and sum to 1")

    active = tuple(j for j in range(N) if row[j] > ACTIVE_THRESHOLD)
    if not active:
        raise LabError("fusion row has no active sensor")
    h = np.zeros(N)
    for j in active:
        h[j] = 1.0 / (N * row[j])

    return StackedOperators(
        row=row,
        active=active,
        h_weights=h,
        Htilde=np.vstack([model.H[j] for j in active]),
        Rtilde=block_diag(*[h[j] * noise.R[j] for j in active]),
        Rbar=block_diag(*[noise.R[j] for j in active]),
        Rtilde_u=block_diag(*[h[j] * noise.Ru[j] for j in active]),
        Rbar_u=block_diag(*[noise.Ru[j] for j in active]),
        dRbar=block_diag(*[noise.Ru[j] - noise.R[j] for j in active]),
        H_blocks=tuple(model.H[j] for j in active),
    )


def information_sum(row, H: Sequence, R_list: Sequence) -> np.ndarray:
    """Σ_j N·l_ij·H_jᵀR_j⁻¹H_j over sensors with l_ij > 0."""
    row = np.asarray(row, dtype=float).ravel()
    N = row.shape[0]
    if len(H) != N or len(R_list) != N:
        raise DimensionError(f"row of length {N} with {len(H)} H and {len(R_list)} R matrices")
    n = as_matrix(H[0]).shape[1]
    total = np.zeros((n, n))
    for j in range(N):
        if row[j] <= ACTIVE_THRESHOLD:
            continue
        Hj = as_matrix(H[j], f"H[{j}]")
        total += N * row[j] * Hj.T @ solve_spd(R_list[j], Hj, f"R[{j}]", "model", "information_sum")
    return symmetrize(total)
