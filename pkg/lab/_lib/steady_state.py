"""Steady-state nominal DARE, true-covariance DLE and the mismatch trace bound.

Steady quantities are PRIOR (one-step-predicted) covariances: the DARE
solution Σ̄^f satisfies Σ̄^f = F·post(Σ̄^f)·Fᵀ + Qu and the DLE solution Σ̄^t
the matching Lyapunov equation under the actual Q and R̄. Posteriors are
derived from them for reporting.

Trace bound: with P = F̄ᵀPF̄ + I and S^f = Σ^f·FᵀPF·Σ^f (Σ^f the steady
posterior),

    Tr(Σ̄^t) − Tr(Σ̄^f) = Σ_j l̄_j⟨S^f, H_jᵀRu_j⁻¹H_j⟩
                         − ⟨R̃u⁻¹H̃S^fH̃ᵀR̃u⁻¹, ΔR̄⟩ − ⟨P, ΔQ⟩

where l̄_j = (N·l_j)² − N·l_j. Bounding each inner product by Frobenius
norms gives ρ^(L), and max{0, Tr(Σ̄^f) − ρ} ≤ Tr(Σ̄^t) ≤ Tr(Σ̄^f) + ρ.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from _lib.errors import ConvergenceError, NotSchurStableError
from _lib.linalg import (
    as_matrix,
    frobenius,
    relative_residual,
    require_positive_definite,
    solve,
    solve_discrete_lyapunov,
    solve_spd,
    spectral_radius,
    symmetrize,
    unvec,
    vec,
)
from _lib.model import NoiseSpec, StackedOperators, SystemModel, build_stacked
from _lib.network import ConsensusMatrix, consensus_power

logger = logging.getLogger(__name__)

DARE_MAX_ITER = 10 ** 6
DARE_TOL = 1e-12
DLE_MAX_ITER = 10 ** 6
DLE_TOL = 1e-13
CLOSED_FORM_RTOL = 1e-9
SIGNED_IDENTITY_RTOL = 1e-9
PBH_TOL = 1e-8


# ── Detectability ────────────────────────────────────────────────────

@dataclass(frozen=True)
class Detectability:
    detectable: bool
    stabilizable: Optional[bool]
    unobservable_modes: Tuple[complex, ...]
    uncontrollable_modes: Tuple[complex, ...]

    def describe(self) -> str:
        parts = ["(F, H̃) detectable" if self.detectable
                 else f"(F, H̃) not detectable, unobservable modes {list(self.unobservable_modes)}"]
        if self.stabilizable is not None:
            parts.append("(F, Qu^½) has no uncontrollable unit-circle mode" if self.stabilizable
                         else f"(F, Qu^½) uncontrollable on the unit circle at {list(self.uncontrollable_modes)}")
        return "; ".join(parts)


def check_detectability(F, Htilde, Qu=None) -> Detectability:
    """PBH tests: unstable modes of F must be seen by H̃; unit-circle modes reached by Qu."""
    F = as_matrix(F, "F")
    H = as_matrix(Htilde, "Htilde")
    n = F.shape[0]
    eye = np.eye(n)
    unobservable = []
    uncontrollable = []
    D = None
    if Qu is not None:
        D = np.linalg.cholesky(require_positive_definite(Qu, "Qu", "steady_state", "check_detectability"))
    for lam in np.linalg.eigvals(F):
        if abs(lam) >= 1.0 - PBH_TOL:
            stacked = np.vstack([F - lam * eye, H])
            if np.linalg.svd(stacked, compute_uv=False)[-1] <= PBH_TOL:
                unobservable.append(complex(lam))
        if D is not None and abs(abs(lam) - 1.0) <= PBH_TOL:
            side = np.hstack([F - lam * eye, D])
            if np.linalg.svd(side, compute_uv=False)[-1] <= PBH_TOL:
                uncontrollable.append(complex(lam))
    return Detectability(
        detectable=not unobservable,
        stabilizable=None if D is None else not uncontrollable,
        unobservable_modes=tuple(unobservable),
        uncontrollable_modes=tuple(uncontrollable),
    )


# ── DARE ─────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class DareSolution:
    prior: np.ndarray          # Σ̄^f
    post: np.ndarray           # Σ^f
    gain: np.ndarray           # K̃^f
    closed_loop: np.ndarray    # F̄ = F(I − K̃^f H̃)
    F: np.ndarray
    iterations: int
    residual: float
    spectral_radius: float


def _nominal_post(prior: np.ndarray, info: np.ndarray) -> np.ndarray:
    n = prior.shape[0]
    return symmetrize(solve(np.eye(n) + prior @ info, prior, "information matrix", "steady_state", "solve_dare"))


def solve_dare(F, Qu, stacked: StackedOperators, sigma0=None, max_iter: int = DARE_MAX_ITER,
               tol: float = DARE_TOL) -> DareSolution:
    """Iterate the nominal prior recursion to its fixed point."""
    op = "solve_dare"
    F = as_matrix(F, "F")
    Qu = require_positive_definite(Qu, "Qu", "steady_state", op)
    n = F.shape[0]
    info = stacked.information(nominal=True)
    prior = F @ require_positive_definite(np.eye(n) if sigma0 is None else sigma0, "sigma0",
                                          "steady_state", op) @ F.T + Qu

    for iteration in range(1, max_iter + 1):
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = symmetrize(F @ _nominal_post(prior, info) @ F.T + Qu)
        if not np.all(np.isfinite(nxt)):
            diagnostic = check_detectability(F, stacked.Htilde, Qu).describe()
            raise ConvergenceError(f"no convergence: iterates diverged at iteration {iteration} ({diagnostic})",
                                   "steady_state", op)
        converged = frobenius(nxt - prior) < tol * (1.0 + frobenius(prior))
        prior = nxt
        if converged:
            break
    else:
        diagnostic = check_detectability(F, stacked.Htilde, Qu).describe()
        raise ConvergenceError(f"no convergence after {max_iter} iterations ({diagnostic})",
                               "steady_state", op)

    post = _nominal_post(prior, info)
    H = stacked.Htilde
    gain = solve_spd(stacked.Rtilde_u, H @ post, "Rtilde_u", "steady_state", op).T
    closed_loop = F @ (np.eye(n) - gain @ H)
    rho = spectral_radius(closed_loop)
    if rho >= 1.0:
        raise NotSchurStableError(f"closed loop not Schur stable (spectral radius {rho:.6g})",
                                  "steady_state", op)
    residual = relative_residual(prior, F @ post @ F.T + Qu)
    logger.debug("DARE converged in %d iterations, residual %.3e", iteration, residual)
    return DareSolution(prior, post, gain, closed_loop, F, iteration, residual, rho)


# ── DLE ──────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class DleSolution:
    prior: np.ndarray              # Σ̄^t by fixed-point iteration
    post: np.ndarray
    closed_form_prior: np.ndarray  # Kronecker-vectorized solution
    iterations: int
    residual: float
    closed_form_residual: float


def solve_dle(F, Q, stacked: StackedOperators, dare: DareSolution, tol: float = DLE_TOL,
              max_iter: int = DLE_MAX_ITER) -> DleSolution:
    """Σ̄^t = F̄Σ̄^tF̄ᵀ + F·K̃R̄K̃ᵀ·Fᵀ + Q, by iteration and by the vectorized closed form."""
    op = "solve_dle"
    F = as_matrix(F, "F")
    Q = require_positive_definite(Q, "Q", "steady_state", op)
    Fbar = dare.closed_loop
    rho = spectral_radius(Fbar)
    if rho >= 1.0:
        raise NotSchurStableError(f"not Schur stable (spectral radius {rho:.6g})", "steady_state", op)
    n = F.shape[0]
    K = dare.gain
    G = symmetrize(F @ K @ stacked.Rbar @ K.T @ F.T + Q)

    X = G.copy()
    for iteration in range(1, max_iter + 1):
        nxt = symmetrize(Fbar @ X @ Fbar.T + G)
        converged = frobenius(nxt - X) < tol * (1.0 + frobenius(X))
        X = nxt
        if converged:
            break
    else:
        raise ConvergenceError(f"no convergence after {max_iter} iterations", "steady_state", op)

    # vec Σ̄^t = (I − F̄⊗F̄)⁻¹[(FΣ^f ⊗ FΣ^f)·vec Φ^t + vec Q]
    phi_t = stacked.true_information()
    FS = F @ dare.post
    rhs = np.kron(FS, FS) @ vec(phi_t) + vec(Q)
    T = np.eye(n * n) - np.kron(Fbar, Fbar)
    closed = symmetrize(unvec(solve(T, rhs, "I - Fbar (x) Fbar", "steady_state", op), n))

    closed_loop = np.eye(n) - K @ stacked.Htilde
    post = symmetrize(closed_loop @ X @ closed_loop.T + K @ stacked.Rbar @ K.T)
    solution = DleSolution(
        prior=X,
        post=post,
        closed_form_prior=closed,
        iterations=iteration,
        residual=relative_residual(X, Fbar @ X @ Fbar.T + G),
        closed_form_residual=relative_residual(X, closed),
    )
    if solution.closed_form_residual > CLOSED_FORM_RTOL:
        logger.warning("DLE iteration and closed form disagree: %.3e", solution.closed_form_residual)
    return solution


# ── Trace bound ──────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class TraceBound:
    lower: float
    upper: float
    actual_trace: float        # Tr(Σ̄^t)
    nominal_trace: float       # Tr(Σ̄^f)
    rho_L: float
    rho_terms: Dict[str, float]
    signed_terms: Dict[str, float]
    signed_residual: float
    P: np.ndarray
    Sf: np.ndarray

    @property
    def rho_b(self) -> float:
        return sum(self.signed_terms.values())

    @property
    def holds(self) -> bool:
        slack = 1e-9 * (1.0 + abs(self.actual_trace))
        return self.lower - slack <= self.actual_trace <= self.upper + slack


def trace_bound(noise: NoiseSpec, stacked: StackedOperators, dare: DareSolution,
                dle: DleSolution) -> TraceBound:
    """Signed trace identity and its Frobenius-norm bound ρ^(L)."""
    op = "trace_bound"
    N = stacked.n_sensors
    P = solve_discrete_lyapunov(dare.closed_loop, np.eye(dare.prior.shape[0]), transpose=True)
    Sf = symmetrize(dare.post @ dare.F.T @ P @ dare.F @ dare.post)

    consensus_signed = 0.0
    consensus_bound = 0.0
    for j, Hj in zip(stacked.active, stacked.H_blocks):
        a = N * stacked.row[j]
        lbar = a * a - a
        k_u = symmetrize(Hj.T @ solve_spd(noise.Ru[j], Hj, f"Ru[{j}]", "steady_state", op))
        consensus_signed += lbar * float(np.sum(Sf * k_u))
        consensus_bound += abs(lbar) * frobenius(Sf) * frobenius(k_u)

    W = solve_spd(stacked.Rtilde_u, stacked.Htilde, "Rtilde_u", "steady_state", op)
    G = symmetrize(W @ Sf @ W.T)
    measurement_signed = -float(np.sum(G * stacked.dRbar))
    process_signed = -float(np.sum(P * noise.dQ))

    signed = {"consensus": consensus_signed, "measurement": measurement_signed, "process": process_signed}
    terms = {
        "consensus": consensus_bound,
        "measurement": frobenius(G) * frobenius(stacked.dRbar),
        "process": frobenius(P) * frobenius(noise.dQ),
    }
    rho = sum(terms.values())
    tr_t = float(np.trace(dle.prior))
    tr_f = float(np.trace(dare.prior))
    diff = tr_t - tr_f
    signed_residual = abs(diff - sum(signed.values())) / (1.0 + abs(tr_t) + abs(tr_f))
    if signed_residual > SIGNED_IDENTITY_RTOL:
        logger.warning("signed trace identity residual %.3e", signed_residual)
    return TraceBound(
        lower=max(0.0, tr_f - rho),
        upper=tr_f + rho,
        actual_trace=tr_t,
        nominal_trace=tr_f,
        rho_L=rho,
        rho_terms=terms,
        signed_terms=signed,
        signed_residual=signed_residual,
        P=P,
        Sf=Sf,
    )


# ── Per-sensor bundle ────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class SteadyState:
    sensor: int
    fusion_steps: Optional[int]
    stacked: StackedOperators
    dare: DareSolution
    dle: DleSolution
    bound: TraceBound
    detectability: Detectability

    @property
    def Sigma_f_bar(self) -> np.ndarray:
        return self.dare.prior

    @property
    def Sigma_f(self) -> np.ndarray:
        return self.dare.post

    @property
    def Sigma_t_bar(self) -> np.ndarray:
        return self.dle.prior

    @property
    def Sigma_t(self) -> np.ndarray:
        return self.dle.post

    @property
    def residuals(self) -> Dict[str, float]:
        return {
            "dare": self.dare.residual,
            "dle": self.dle.residual,
            "dle_closed_form": self.dle.closed_form_residual,
            "signed_identity": self.bound.signed_residual,
        }


def steady_state(model: SystemModel, noise: NoiseSpec, row, sigma0=None, sensor: int = 0,
                 fusion_steps: Optional[int] = None, max_iter: int = DARE_MAX_ITER,
                 tol: float = DARE_TOL) -> SteadyState:
    stacked = build_stacked(model, noise, row)
    detect = check_detectability(model.F, stacked.Htilde, noise.Qu)
    if not detect.detectable:
        logger.warning("sensor %d at L=%s: %s", sensor + 1, fusion_steps, detect.describe())
    dare = solve_dare(model.F, noise.Qu, stacked, sigma0, max_iter, tol)
    dle = solve_dle(model.F, noise.Q, stacked, dare)
    bound = trace_bound(noise, stacked, dare, dle)
    return SteadyState(sensor, fusion_steps, stacked, dare, dle, bound, detect)


def steady_state_all(model: SystemModel, noise: NoiseSpec, consensus: ConsensusMatrix,
                     fusion_steps: int, sigma0=None) -> List[SteadyState]:
    rows = consensus_power(consensus, fusion_steps)
    return [steady_state(model, noise, rows[i], sigma0, sensor=i, fusion_steps=fusion_steps)
            for i in range(model.n_sensors)]


def steady_state_rows(states: List[SteadyState]) -> List[Dict[str, Any]]:
    """One row per (sensor, L); sensors are 1-based."""
    rows = []
    for s in states:
        b = s.bound
        rows.append({
            "sensor": s.sensor + 1,
            "L": s.fusion_steps,
            "trace_sigma_f_bar": b.nominal_trace,
            "trace_sigma_t_bar": b.actual_trace,
            "trace_sigma_f_post": float(np.trace(s.Sigma_f)),
            "trace_sigma_t_post": float(np.trace(s.Sigma_t)),
            "lower": b.lower,
            "upper": b.upper,
            "rho_L": b.rho_L,
            "rho_consensus": b.rho_terms["consensus"],
            "rho_measurement": b.rho_terms["measurement"],
            "rho_process": b.rho_terms["process"],
            "rho_b": b.rho_b,
            "bound_holds": b.holds,
            "iterations": s.dare.iterations,
            "spectral_radius": s.dare.spectral_radius,
        })
    return rows
