"""Matrix primitives shared by every analysis module.

Symmetric matrices are plain ``numpy`` arrays that pass through
``as_symmetric``/``symmetrize``. Orderings between covariances are decided by
``loewner_compare`` on the symmetrized difference. The three matrix-identity
checks return Frobenius residuals so they can be used as property tests.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from scipy import linalg as sla

from _lib.errors import (
    DimensionError,
    NotPositiveDefiniteError,
    NotSchurStableError,
    SingularMatrixError,
)

logger = logging.getLogger(__name__)

LOEWNER_RTOL = 1e-9
SYMMETRY_RTOL = 1e-8       # inputs further from symmetric than this are rejected
SINGULAR_COND = 1e12       # condition number treated as singular in the identity checks


# ── Basic helpers ────────────────────────────────────────────────────

def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Return ``x`` as a 2-D float array (scalars become 1×1)."""
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def _require_square(x: np.ndarray, name: str) -> None:
    if x.shape[0] != x.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {x.shape}")


def symmetrize(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return (x + x.T) / 2.0


def as_symmetric(x, name: str = "matrix") -> np.ndarray:
    """Validate near-symmetry and return the symmetrized matrix."""
    arr = as_matrix(x, name)
    _require_square(arr, name)
    scale = 1.0 + float(np.max(np.abs(arr))) if arr.size else 1.0
    if arr.size and float(np.max(np.abs(arr - arr.T))) > SYMMETRY_RTOL * scale:
        raise ValueError(f"{name} is not symmetric")
    return symmetrize(arr)


def frobenius(x) -> float:
    return float(np.linalg.norm(np.asarray(x, dtype=float), "fro"))


def spectral_radius(x) -> float:
    x = as_matrix(x)
    _require_square(x, "matrix")
    if x.size == 0:
        return 0.0
    return float(np.max(np.abs(np.linalg.eigvals(x))))


def relative_residual(a, b) -> float:
    """‖a − b‖_F / (1 + max(‖a‖_F, ‖b‖_F))."""
    return frobenius(np.asarray(a) - np.asarray(b)) / (1.0 + max(frobenius(a), frobenius(b)))


def is_positive_definite(x) -> bool:
    try:
        sla.cholesky(symmetrize(as_matrix(x)), lower=True)
    except (sla.LinAlgError, ValueError):
        return False
    return True


def require_positive_definite(x, name: str, module: str = "linalg",
                              operation: str = "require_positive_definite") -> np.ndarray:
    """Return the symmetrized matrix or raise ``NotPositiveDefiniteError``."""
    arr = as_symmetric(x, name)
    if not is_positive_definite(arr):
        raise NotPositiveDefiniteError(f"{name} is not positive definite", module, operation)
    return arr


def solve(a, b, name: str = "matrix", module: str = "linalg", operation: str = "solve") -> np.ndarray:
    """Solve ``a x = b``; singular ``a`` raises ``SingularMatrixError``."""
    try:
        return sla.solve(as_matrix(a, name), np.asarray(b, dtype=float))
    except sla.LinAlgError as e:
        raise SingularMatrixError(f"{name} is singular", module, operation) from e


def solve_spd(a, b, name: str = "matrix", module: str = "linalg",
              operation: str = "solve_spd") -> np.ndarray:
    """Solve ``a x = b`` for symmetric positive definite ``a`` via Cholesky."""
    try:
        factor = sla.cho_factor(symmetrize(as_matrix(a, name)), lower=True)
    except sla.LinAlgError as e:
        raise SingularMatrixError(f"{name} is not positive definite", module, operation) from e
    return sla.cho_solve(factor, np.asarray(b, dtype=float))


def spd_inverse(a, name: str = "matrix", module: str = "linalg",
                operation: str = "spd_inverse") -> np.ndarray:
    a = as_matrix(a, name)
    return symmetrize(solve_spd(a, np.eye(a.shape[0]), name, module, operation))


def right_solve(b, a, name: str = "matrix", module: str = "linalg",
                operation: str = "right_solve") -> np.ndarray:
    """Return ``b a^{-1}`` without forming the inverse."""
    return solve(np.asarray(a, dtype=float).T, np.asarray(b, dtype=float).T,
                 name, module, operation).T


def vec(x) -> np.ndarray:
    """Column-stacking vectorization, so vec(ABC) = (Cᵀ ⊗ A) vec(B)."""
    return np.asarray(x, dtype=float).reshape(-1, order="F")


def unvec(v, n_rows: int) -> np.ndarray:
    return np.asarray(v, dtype=float).reshape((n_rows, -1), order="F")


# ── Loewner order ────────────────────────────────────────────────────

class Ordering(str, Enum):
    GEQ = "GEQ"
    LEQ = "LEQ"
    EQ = "EQ"
    INDEFINITE = "INDEFINITE"


@dataclass(frozen=True)
class LoewnerVerdict:
    """Outcome of comparing ``a`` and ``b`` in the Loewner order."""

    ordering: Ordering
    min_eig_of_difference: float
    tolerance: float
    max_eig_of_difference: float

    @property
    def geq(self) -> bool:
        return self.ordering in (Ordering.GEQ, Ordering.EQ)

    @property
    def leq(self) -> bool:
        return self.ordering in (Ordering.LEQ, Ordering.EQ)

    @property
    def strictly_greater(self) -> bool:
        return self.min_eig_of_difference > self.tolerance

    @property
    def strictly_less(self) -> bool:
        return self.max_eig_of_difference < -self.tolerance

    def satisfies(self, relation: str) -> bool:
        """Check one of ``">="``, ``"<="``, ``"=="``, ``">"``, ``"<"``."""
        checks = {
            ">=": self.geq,
            "<=": self.leq,
            "==": self.ordering is Ordering.EQ,
            ">": self.strictly_greater,
            "<": self.strictly_less,
        }
        if relation not in checks:
            raise ValueError(f"unknown relation {relation!r}")
        return checks[relation]


def default_tolerance(a, b) -> float:
    return LOEWNER_RTOL * (1.0 + max(frobenius(a), frobenius(b)))


def loewner_compare(a, b, tol: Optional[float] = None) -> LoewnerVerdict:
    """Compare two symmetric matrices in the Loewner order.

    GEQ iff λ_min(a − b) ≥ −tol, LEQ iff λ_min(b − a) ≥ −tol, EQ iff both.
    """
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"cannot compare shapes {a.shape} and {b.shape}")
    _require_square(a, "a")
    if tol is None:
        tol = default_tolerance(a, b)
    if tol < 0:
        raise ValueError("tolerance must be non-negative")

    eigs = sla.eigvalsh(symmetrize(a - b))
    lo, hi = float(eigs[0]), float(eigs[-1])
    geq = lo >= -tol
    leq = hi <= tol
    if geq and leq:
        ordering = Ordering.EQ
    elif geq:
        ordering = Ordering.GEQ
    elif leq:
        ordering = Ordering.LEQ
    else:
        ordering = Ordering.INDEFINITE
    return LoewnerVerdict(ordering, lo, float(tol), hi)


# ── Matrix identities ────────────────────────────────────────────────

def _checked_inverse(x, name: str, operation: str) -> np.ndarray:
    x = as_matrix(x, name)
    _require_square(x, name)
    if not np.all(np.isfinite(x)) or np.linalg.cond(x) > SINGULAR_COND:
        raise SingularMatrixError(f"{name} is singular", "linalg", operation)
    return np.linalg.inv(x)


def check_matrix_inversion_lemma(A, B, C, D) -> float:
    """Residual of (A + BCD)⁻¹ = A⁻¹ − A⁻¹B(C⁻¹ + DA⁻¹B)⁻¹DA⁻¹."""
    op = "check_matrix_inversion_lemma"
    A, B, C, D = (as_matrix(m, n) for m, n in zip((A, B, C, D), "ABCD"))
    n, p = A.shape[0], C.shape[0]
    if B.shape != (n, p) or D.shape != (p, n):
        raise DimensionError(f"non-conformable shapes A{A.shape} B{B.shape} C{C.shape} D{D.shape}")
    Ai = _checked_inverse(A, "A", op)
    Ci = _checked_inverse(C, "C", op)
    lhs = _checked_inverse(A + B @ C @ D, "A + BCD", op)
    inner = _checked_inverse(Ci + D @ Ai @ B, "C^-1 + D A^-1 B", op)
    rhs = Ai - Ai @ B @ inner @ D @ Ai
    return frobenius(lhs - rhs)


def check_lemma_a_plus_b(A, B, a: float) -> float:
    """Residual of a·S·A·S − S = S((a−1)I − a·B·S) with S = (A + B)⁻¹."""
    op = "check_lemma_a_plus_b"
    A, B = as_matrix(A, "A"), as_matrix(B, "B")
    if A.shape != B.shape:
        raise DimensionError(f"shapes differ: {A.shape} vs {B.shape}")
    _checked_inverse(A, "A", op)
    _checked_inverse(B, "B", op)
    S = _checked_inverse(A + B, "A + B", op)
    eye = np.eye(A.shape[0])
    lhs = a * S @ A @ S - S
    rhs = S @ ((a - 1.0) * eye - a * B @ S)
    return frobenius(lhs - rhs)


def check_lemma_inverse_difference(A, B) -> float:
    """Residual of (A + B)⁻¹ − A⁻¹ = −A⁻¹B(A + B)⁻¹."""
    op = "check_lemma_inverse_difference"
    A, B = as_matrix(A, "A"), as_matrix(B, "B")
    if A.shape != B.shape:
        raise DimensionError(f"shapes differ: {A.shape} vs {B.shape}")
    _checked_inverse(B, "B", op)
    Ai = _checked_inverse(A, "A", op)
    S = _checked_inverse(A + B, "A + B", op)
    return frobenius((S - Ai) - (-Ai @ B @ S))


def joseph_form(K, H, Sigma, R) -> np.ndarray:
    """ψ(K) = (I − KH)Σ(I − KH)ᵀ + KRKᵀ."""
    K, H = as_matrix(K, "K"), as_matrix(H, "H")
    A = np.eye(H.shape[1]) - K @ H
    return symmetrize(A @ Sigma @ A.T + K @ R @ K.T)


def check_optimal_gain(Sigma, H, R, K_alt) -> LoewnerVerdict:
    """Compare ψ(K_alt) against ψ(K_min) where K_min = ΣHᵀ(HΣHᵀ + R)⁻¹."""
    op = "check_optimal_gain"
    Sigma = require_positive_definite(Sigma, "Sigma", "linalg", op)
    R = require_positive_definite(R, "R", "linalg", op)
    H = as_matrix(H, "H")
    K_alt = as_matrix(K_alt, "K_alt")
    if H.shape != (R.shape[0], Sigma.shape[0]) or K_alt.shape != (Sigma.shape[0], R.shape[0]):
        raise DimensionError(f"non-conformable H{H.shape} K_alt{K_alt.shape}")
    innovation = H @ Sigma @ H.T + R
    K_min = right_solve(Sigma @ H.T, innovation, "H Sigma H^T + R", "linalg", op)
    return loewner_compare(joseph_form(K_alt, H, Sigma, R), joseph_form(K_min, H, Sigma, R))


# ── Lyapunov equations ───────────────────────────────────────────────

def solve_discrete_lyapunov(Fbar, Gconst, transpose: bool = False) -> np.ndarray:
    """Fixed point of X = Fbar·X·Fbarᵀ + G (or X = Fbarᵀ·X·Fbar + G).

    Solved through (I − A⊗A) vec(X) = vec(G) with A = Fbar, or Fbarᵀ when
    ``transpose`` is set.
    """
    Fbar = as_matrix(Fbar, "Fbar")
    G = as_matrix(Gconst, "Gconst")
    _require_square(Fbar, "Fbar")
    if G.shape != Fbar.shape:
        raise DimensionError(f"Gconst shape {G.shape} does not match Fbar {Fbar.shape}")
    rho = spectral_radius(Fbar)
    if rho >= 1.0:
        raise NotSchurStableError(
            f"not Schur stable (spectral radius {rho:.6g})", "linalg", "solve_discrete_lyapunov"
        )
    n = Fbar.shape[0]
    A = Fbar.T if transpose else Fbar
    T = np.eye(n * n) - np.kron(A, A)
    X = unvec(solve(T, vec(G), "I - A (x) A", "linalg", "solve_discrete_lyapunov"), n)
    if np.allclose(G, G.T):
        X = symmetrize(X)
    return X


def lyapunov_residual(Fbar, X, Gconst, transpose: bool = False) -> float:
    """‖X − AXAᵀ − G‖_F / (1 + ‖X‖_F)."""
    Fbar = as_matrix(Fbar)
    A = Fbar.T if transpose else Fbar
    X = as_matrix(X)
    return frobenius(X - A @ X @ A.T - as_matrix(Gconst)) / (1.0 + frobenius(X))


def lyapunov_weight_identity_residual(Fbar) -> float:
    """Distance between (vec I)ᵀ(I − Fbar⊗Fbar)⁻¹ and (vec P)ᵀ with P = FbarᵀPFbar + I."""
    Fbar = as_matrix(Fbar, "Fbar")
    n = Fbar.shape[0]
    T = np.eye(n * n) - np.kron(Fbar, Fbar)
    row = solve(T.T, vec(np.eye(n)), "I - Fbar (x) Fbar", "linalg", "lyapunov_weight_identity_residual")
    P = solve_discrete_lyapunov(Fbar, np.eye(n), transpose=True)
    return float(np.linalg.norm(row - vec(P)))
