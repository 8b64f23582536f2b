"""Φ-matrices, index difference decompositions and Loewner relation checks.

All one-step results assume the three indices were equal at the previous
step (equal start). ``one_step`` bundles everything one sensor needs for a
single step; the decompositions and relation checks read from it.

Relation checks never assume their hypotheses: each theorem's preconditions
are evaluated with ``loewner_compare`` and the predicted chain is only
asserted when all of them pass.
"""

import logging
from dataclasses import dataclass
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from _lib.errors import AssumptionError, DimensionError
from _lib.filter import (
    IndexStep,
    NominalStep,
    nominal_index_step,
    standard_index_step,
    true_covariance_step,
)
from _lib.linalg import (
    LoewnerVerdict,
    as_matrix,
    frobenius,
    loewner_compare,
    relative_residual,
    require_positive_definite,
    solve_spd,
    spd_inverse,
    symmetrize,
)
from _lib.model import ACTIVE_THRESHOLD, NoiseSpec, StackedOperators, SystemModel, build_stacked
from _lib.network import (
    ConsensusMatrix,
    consensus_power,
    deviation_from_power,
    fit_geometric_decay,
)

logger = logging.getLogger(__name__)

EQUAL_START_RTOL = 1e-12
PRECONDITION_RTOL = 1e-12
VANISHING_FLOOR = 1e-14


# ── Φ-matrices ───────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class PhiSet:
    phi_f: np.ndarray        # Σ N·l·HᵀRu⁻¹H
    phi: np.ndarray          # Σ N·l·HᵀR⁻¹H
    phi_t: np.ndarray        # Σ (N·l)²·HᵀRu⁻¹R·Ru⁻¹H
    phi_ts: np.ndarray       # Σ ((N·l)² − N·l)·HᵀRu⁻¹R·Ru⁻¹H
    phi_bar_tf: np.ndarray   # Σ N·l·HᵀRu⁻¹ΔR·Ru⁻¹H
    phi_identity_residual: float


def _sandwich(H: np.ndarray, Ru: np.ndarray, middle: np.ndarray, operation: str) -> np.ndarray:
    """HᵀRu⁻¹·middle·Ru⁻¹H."""
    G = solve_spd(Ru, H, "Ru", "analysis", operation)
    return symmetrize(G.T @ middle @ G)


def _row(row, n_sensors: int) -> np.ndarray:
    row = np.asarray(row, dtype=float).ravel()
    if row.shape[0] != n_sensors:
        raise DimensionError(f"row has {row.shape[0]} entries for {n_sensors} sensors")
    return row


def compute_phi_set(model: SystemModel, noise: NoiseSpec, row) -> PhiSet:
    op = "compute_phi_set"
    N = model.n_sensors
    row = _row(row, N)
    n = model.n
    phi_f, phi, phi_t, phi_ts, phi_bar_tf = (np.zeros((n, n)) for _ in range(5))
    for j in range(N):
        if row[j] <= ACTIVE_THRESHOLD:
            continue
        a = N * row[j]
        H, R, Ru = model.H[j], noise.R[j], noise.Ru[j]
        kernel_u = _sandwich(H, Ru, Ru, op)
        kernel_t = _sandwich(H, Ru, R, op)
        phi_f += a * kernel_u
        phi += a * symmetrize(H.T @ solve_spd(R, H, "R", "analysis", op))
        phi_t += a * a * kernel_t
        phi_ts += (a * a - a) * kernel_t
        phi_bar_tf += a * _sandwich(H, Ru, Ru - R, op)

    scale = 1.0 + max(frobenius(phi_t), frobenius(phi_f))
    residual = frobenius(phi_ts - (phi_t - phi_f) - phi_bar_tf) / scale
    return PhiSet(phi_f, phi, phi_t, phi_ts, phi_bar_tf, residual)


def phi_t_minus_phi_f_expanded(model: SystemModel, noise: NoiseSpec, row) -> np.ndarray:
    """Σ N·l·HᵀRu⁻¹((N·l − 1)I − N·l·ΔR·Ru⁻¹)H."""
    op = "phi_t_minus_phi_f_expanded"
    N = model.n_sensors
    row = _row(row, N)
    total = np.zeros((model.n, model.n))
    for j in range(N):
        if row[j] <= ACTIVE_THRESHOLD:
            continue
        a = N * row[j]
        H, Ru, dR = model.H[j], noise.Ru[j], noise.dR[j]
        G = solve_spd(Ru, H, "Ru", "analysis", op)
        dR_over_Ru = solve_spd(Ru, dR, "Ru", "analysis", op).T
        inner = (a - 1.0) * np.eye(Ru.shape[0]) - a * dR_over_Ru
        total += a * G.T @ inner @ H
    return symmetrize(total)


def phi_f_minus_phi_expanded(model: SystemModel, noise: NoiseSpec, row) -> np.ndarray:
    """Σ N·l·Hᵀ(−R⁻¹ΔR·Ru⁻¹)H."""
    op = "phi_f_minus_phi_expanded"
    N = model.n_sensors
    row = _row(row, N)
    total = np.zeros((model.n, model.n))
    for j in range(N):
        if row[j] <= ACTIVE_THRESHOLD:
            continue
        a = N * row[j]
        H, R, Ru, dR = model.H[j], noise.R[j], noise.Ru[j], noise.dR[j]
        total -= a * solve_spd(R, H, "R", "analysis", op).T @ dR @ solve_spd(Ru, H, "Ru", "analysis", op)
    return symmetrize(total)


# ── One equal-start step ─────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class SensorStep:
    """Everything one sensor produces in one step of the three index recursions."""

    model: SystemModel
    noise: NoiseSpec
    sensor: int
    row: np.ndarray
    stacked: StackedOperators
    phi: PhiSet
    standard: IndexStep
    nominal: NominalStep
    true: IndexStep
    sigma_prev: np.ndarray
    sigma_f_prev: np.ndarray
    sigma_t_prev: np.ndarray
    fusion_steps: Optional[int] = None
    k: Optional[int] = None

    @property
    def sigma(self) -> np.ndarray:
        return self.standard.post

    @property
    def sigma_f(self) -> np.ndarray:
        return self.nominal.post

    @property
    def sigma_t(self) -> np.ndarray:
        return self.true.post

    @property
    def equal_start(self) -> bool:
        return (relative_residual(self.sigma_prev, self.sigma_f_prev) <= EQUAL_START_RTOL
                and relative_residual(self.sigma_prev, self.sigma_t_prev) <= EQUAL_START_RTOL)


def one_step(model: SystemModel, noise: NoiseSpec, row, sigma_prev, sigma_f_prev=None,
             sigma_t_prev=None, sensor: int = 0, fusion_steps: Optional[int] = None,
             k: Optional[int] = None) -> SensorStep:
    """Advance Σ, Σ^f and Σ^t of one sensor by one step (equal start by default)."""
    sigma_prev = require_positive_definite(sigma_prev, "sigma_prev", "analysis", "one_step")
    sigma_f_prev = sigma_prev if sigma_f_prev is None else as_matrix(sigma_f_prev)
    sigma_t_prev = sigma_prev if sigma_t_prev is None else as_matrix(sigma_t_prev)
    stacked = build_stacked(model, noise, row)
    nominal = nominal_index_step(sigma_f_prev, model.F, noise.Qu, stacked)
    return SensorStep(
        model=model,
        noise=noise,
        sensor=sensor,
        row=stacked.row,
        stacked=stacked,
        phi=compute_phi_set(model, noise, stacked.row),
        standard=standard_index_step(sigma_prev, model.F, noise.Q, stacked),
        nominal=nominal,
        true=true_covariance_step(sigma_t_prev, model.F, noise.Q, nominal, stacked),
        sigma_prev=sigma_prev,
        sigma_f_prev=sigma_f_prev,
        sigma_t_prev=sigma_t_prev,
        fusion_steps=fusion_steps,
        k=k,
    )


def one_step_all(model: SystemModel, noise: NoiseSpec, consensus: ConsensusMatrix,
                 fusion_steps: int, sigma_prev) -> List[SensorStep]:
    """Equal-start one-step bundle for every sensor at fusion step L."""
    if fusion_steps < 1:
        raise ValueError(f"fusion step L must be >= 1, got {fusion_steps}")
    rows = consensus_power(consensus, fusion_steps)
    return [
        one_step(model, noise, rows[i], sigma_prev, sensor=i, fusion_steps=fusion_steps)
        for i in range(model.n_sensors)
    ]


# ── Difference decompositions ────────────────────────────────────────

def _scaled(diff: np.ndarray, *refs: np.ndarray) -> float:
    return frobenius(diff) / (1.0 + max(frobenius(r) for r in refs))


def _require_equal_start(step: SensorStep, diagnostic: bool, operation: str) -> None:
    if not diagnostic and not step.equal_start:
        raise AssumptionError(
            f"{operation}: indices differ at the previous step; pass diagnostic=True to inspect anyway"
        )


@dataclass(frozen=True, eq=False)
class TsComponents:
    d_ts: np.ndarray
    sigma_t_tilde: np.ndarray
    r_ts: np.ndarray
    r_ts_raw: np.ndarray
    c_bar: np.ndarray
    m_u: np.ndarray
    tilde_verdict: LoewnerVerdict
    reconstruction_residual: float
    raw_residual: float


def decompose_ts(step: SensorStep, diagnostic: bool = False) -> TsComponents:
    """Σ^t − Σ = (Σ̃^t − Σ) + R^ts with R^ts = Σ^f_prior·C̄·Φ^ts·C̄ᵀ·Σ^f_prior."""
    _require_equal_start(step, diagnostic, "decompose_ts")
    s, nom = step.stacked, step.nominal
    n = step.model.n
    K, H = nom.gain, s.Htilde
    closed_loop = np.eye(n) - K @ H

    sigma_t_tilde = symmetrize(closed_loop @ step.true.prior @ closed_loop.T + K @ s.Rtilde @ K.T)
    c_bar = np.eye(n) - step.phi.phi_f @ nom.post
    r_ts = symmetrize(nom.prior @ c_bar @ step.phi.phi_ts @ c_bar.T @ nom.prior)
    r_ts_raw = symmetrize(K @ (s.Rbar - s.Rtilde) @ K.T)
    d_ts = step.sigma_t - step.sigma

    return TsComponents(
        d_ts=d_ts,
        sigma_t_tilde=sigma_t_tilde,
        r_ts=r_ts,
        r_ts_raw=r_ts_raw,
        c_bar=c_bar,
        m_u=symmetrize(s.Rtilde_u + H @ nom.prior @ H.T),
        tilde_verdict=loewner_compare(sigma_t_tilde, step.sigma),
        reconstruction_residual=_scaled(d_ts - (sigma_t_tilde - step.sigma + r_ts), step.sigma_t, step.sigma),
        raw_residual=_scaled(r_ts - r_ts_raw, step.sigma_t, r_ts),
    )


@dataclass(frozen=True, eq=False)
class TfComponents:
    d_tf: np.ndarray
    psi_tf: np.ndarray
    psi_tf_from_dq: np.ndarray
    reconstruction_residual: float
    expanded_residual: float
    dq_form_residual: Optional[float]


def decompose_tf(step: SensorStep, diagnostic: bool = False) -> TfComponents:
    """Σ^t − Σ^f = Σ^f(Φ^t − Φ^f)Σ^f + Ψ^tf with Ψ^tf = −(I − KH̃)ΔQ(I − KH̃)ᵀ.

    Ψ^tf is formed from the actual prior gap (I − KH̃)(Σ^t_prior − Σ^f_prior)(I − KH̃)ᵀ,
    which reduces to the ΔQ form under equal start. The gap between the two forms
    is kept as `dq_form_residual`, or None when the indices started apart.
    """
    _require_equal_start(step, diagnostic, "decompose_tf")
    nom, phi = step.nominal, step.phi
    n = step.model.n
    closed_loop = np.eye(n) - nom.gain @ step.stacked.Htilde
    psi_tf = symmetrize(closed_loop @ (step.true.prior - nom.prior) @ closed_loop.T)
    psi_tf_from_dq = symmetrize(-closed_loop @ step.noise.dQ @ closed_loop.T)
    d_tf = step.sigma_t - step.sigma_f
    reconstruction = nom.post @ (phi.phi_t - phi.phi_f) @ nom.post + psi_tf
    expanded = phi_t_minus_phi_f_expanded(step.model, step.noise, step.row)
    return TfComponents(
        d_tf=d_tf,
        psi_tf=psi_tf,
        psi_tf_from_dq=psi_tf_from_dq,
        reconstruction_residual=_scaled(d_tf - reconstruction, step.sigma_t, step.sigma_f),
        expanded_residual=_scaled((phi.phi_t - phi.phi_f) - expanded, phi.phi_t, phi.phi_f),
        dq_form_residual=(_scaled(psi_tf - psi_tf_from_dq, psi_tf, psi_tf_from_dq)
                          if step.equal_start else None),
    )


@dataclass(frozen=True, eq=False)
class FsComponents:
    d_fs_inv: np.ndarray
    psi_fs: np.ndarray
    reconstruction_residual: float
    expanded_residual: float


def decompose_fs(step: SensorStep) -> FsComponents:
    """(Σ^f)⁻¹ − Σ⁻¹ = Φ^f − Φ + Ψ^fs with Ψ^fs = (Σ^f_prior)⁻¹ − (Σ_prior)⁻¹."""
    op = "decompose_fs"
    phi = step.phi
    inv_f = spd_inverse(step.sigma_f, "nominal posterior", "analysis", op)
    inv_s = spd_inverse(step.sigma, "standard posterior", "analysis", op)
    psi_fs = (spd_inverse(step.nominal.prior, "nominal prior", "analysis", op)
              - spd_inverse(step.standard.prior, "standard prior", "analysis", op))
    d_fs_inv = inv_f - inv_s
    expanded = phi_f_minus_phi_expanded(step.model, step.noise, step.row)
    return FsComponents(
        d_fs_inv=d_fs_inv,
        psi_fs=psi_fs,
        reconstruction_residual=_scaled(d_fs_inv - (phi.phi_f - phi.phi + psi_fs), inv_f, inv_s),
        expanded_residual=_scaled((phi.phi_f - phi.phi) - expanded, phi.phi_f, phi.phi),
    )


@dataclass(frozen=True, eq=False)
class DifferenceReport:
    sensor: int
    ts: TsComponents
    tf: TfComponents
    fs: FsComponents

    @property
    def residuals(self) -> Dict[str, float]:
        out = {
            "ts_reconstruction": self.ts.reconstruction_residual,
            "ts_raw": self.ts.raw_residual,
            "tf_reconstruction": self.tf.reconstruction_residual,
            "tf_expanded": self.tf.expanded_residual,
            "fs_reconstruction": self.fs.reconstruction_residual,
            "fs_expanded": self.fs.expanded_residual,
        }
        if self.tf.dq_form_residual is not None:
            out["tf_dq_form"] = self.tf.dq_form_residual
        return out


def difference_report(step: SensorStep, diagnostic: bool = False) -> DifferenceReport:
    return DifferenceReport(
        sensor=step.sensor,
        ts=decompose_ts(step, diagnostic),
        tf=decompose_tf(step, diagnostic),
        fs=decompose_fs(step),
    )


# ── Relation theorems ────────────────────────────────────────────────

INDEX_NAMES = {"sigma": "Σ", "sigma_f": "Σ^f", "sigma_t": "Σ^t"}
PAIRS = (("sigma_f", "sigma"), ("sigma_t", "sigma"), ("sigma_t", "sigma_f"))
FLIPPED = {">=": "<=", "<=": ">=", "==": "==", ">": "<", "<": ">"}
NON_STRICT = {">": ">=", "<": "<=", ">=": ">=", "<=": "<=", "==": "=="}
SYMBOLS = {">=": "⪰", "<=": "⪯", "==": "=", ">": "≻", "<": "≺"}


class _Conditions:
    """Lazily evaluated precondition predicates of one sensor step."""

    def __init__(self, step: SensorStep):
        self.step = step
        phi = step.phi
        self._phis = {"phi": phi.phi, "phi_f": phi.phi_f, "phi_t": phi.phi_t}

    @staticmethod
    def _cmp(a, b) -> LoewnerVerdict:
        tol = PRECONDITION_RTOL * (1.0 + max(frobenius(a), frobenius(b)))
        return loewner_compare(a, b, tol)

    def phi_leq(self, a: str, b: str) -> bool:
        return self._cmp(self._phis[a], self._phis[b]).leq

    def phi_ts_psd(self) -> bool:
        phi_ts = self.step.phi.phi_ts
        return self._cmp(phi_ts, np.zeros_like(phi_ts)).geq

    def dq(self, relation: str) -> bool:
        noise = self.step.noise
        return self._cmp(noise.Qu, noise.Q).satisfies(relation)

    def dr_all(self, relation: str) -> bool:
        noise = self.step.noise
        return all(self._cmp(ru, r).satisfies(relation) for r, ru in zip(noise.R, noise.Ru))

    def dr_any(self, relation: str) -> bool:
        noise = self.step.noise
        return any(self._cmp(ru, r).satisfies(relation) for r, ru in zip(noise.R, noise.Ru))

    def single_sensor(self) -> bool:
        return self.step.model.n_sensors == 1


Precondition = Tuple[str, Callable[[_Conditions], bool]]
Chain = Tuple[Tuple[str, str, str], ...]


@dataclass(frozen=True)
class TheoremSpec:
    theorem_id: str
    preconditions: Tuple[Precondition, ...]
    chain: Chain
    limiting: bool = False


def _p(name: str, fn: Callable[[_Conditions], bool]) -> Precondition:
    return (name, fn)


_DQ_ZERO = _p("ΔQ = 0", lambda c: c.dq("=="))
_DQ_POS = _p("ΔQ ≻ 0", lambda c: c.dq(">"))
_DQ_NEG = _p("ΔQ ≺ 0", lambda c: c.dq("<"))
_DR_ZERO = _p("ΔR_j = 0 for all j", lambda c: c.dr_all("=="))
_PHI_TS = _p("Φ^ts ⪰ 0", lambda c: c.phi_ts_psd())
_PHI_LE_F = _p("Φ ⪯ Φ^f", lambda c: c.phi_leq("phi", "phi_f"))
_F_LE_PHI = _p("Φ^f ⪯ Φ", lambda c: c.phi_leq("phi_f", "phi"))
_F_LE_T = _p("Φ^f ⪯ Φ^t", lambda c: c.phi_leq("phi_f", "phi_t"))
_T_LE_F = _p("Φ^t ⪯ Φ^f", lambda c: c.phi_leq("phi_t", "phi_f"))

THEOREMS: Tuple[TheoremSpec, ...] = (
    TheoremSpec("T2-1", (_PHI_TS,), (("sigma_t", ">=", "sigma"),)),
    TheoremSpec("T3-1", (_DQ_ZERO, _PHI_LE_F, _F_LE_T, _PHI_TS),
                (("sigma_f", "<=", "sigma"), ("sigma", "<=", "sigma_t"))),
    TheoremSpec("T3-2", (_DQ_ZERO, _F_LE_PHI, _F_LE_T, _PHI_TS),
                (("sigma", "<=", "sigma_f"), ("sigma_f", "<=", "sigma_t"))),
    TheoremSpec("T3-3", (_DQ_ZERO, _T_LE_F, _F_LE_PHI, _PHI_TS),
                (("sigma", "<=", "sigma_t"), ("sigma_t", "<=", "sigma_f"))),
    TheoremSpec("T5-1", (_DR_ZERO, _DQ_POS), (("sigma", "<", "sigma_f"),)),
    TheoremSpec("T5-2", (_DR_ZERO, _DQ_NEG), (("sigma", ">", "sigma_f"),)),
    TheoremSpec("T6-1", (_PHI_LE_F, _F_LE_T, _PHI_TS, _DQ_NEG),
                (("sigma_f", "<=", "sigma"), ("sigma", "<=", "sigma_t"))),
    TheoremSpec("T6-2", (_T_LE_F, _F_LE_PHI, _PHI_TS, _DQ_POS),
                (("sigma", "<=", "sigma_t"), ("sigma_t", "<=", "sigma_f"))),
    TheoremSpec("P4", (_p("N = 1", lambda c: c.single_sensor()),), (("sigma_t", ">=", "sigma"),)),
    TheoremSpec("T4-1", (_DQ_ZERO, _p("ΔR_j ⪰ 0 for all j", lambda c: c.dr_all(">=")),
                         _p("ΔR_j ≻ 0 for some j", lambda c: c.dr_any(">"))),
                (("sigma", "<", "sigma_t"), ("sigma_t", "<", "sigma_f")), limiting=True),
    TheoremSpec("T4-2", (_DQ_ZERO, _p("ΔR_j ⪯ 0 for all j", lambda c: c.dr_all("<=")),
                         _p("ΔR_j ≺ 0 for some j", lambda c: c.dr_any("<"))),
                (("sigma_f", "<", "sigma"), ("sigma", "<", "sigma_t")), limiting=True),
    TheoremSpec("T4-3", (_DQ_ZERO, _DR_ZERO),
                (("sigma_f", "==", "sigma"), ("sigma_t", "==", "sigma_f")), limiting=True),
    TheoremSpec("T5-1L", (_DR_ZERO, _DQ_POS),
                (("sigma", "<", "sigma_t"), ("sigma_t", "<", "sigma_f")), limiting=True),
    TheoremSpec("T5-2L", (_DR_ZERO, _DQ_NEG),
                (("sigma_f", "<=", "sigma"), ("sigma", "<=", "sigma_t")), limiting=True),
)


def _chain_text(chain: Chain) -> str:
    parts = [INDEX_NAMES[chain[0][0]]]
    for lhs, rel, rhs in chain:
        parts.append(f"{SYMBOLS[rel]} {INDEX_NAMES[rhs]}")
    return " ".join(parts)


@dataclass(frozen=True, eq=False)
class RelationReport:
    theorem_id: str
    sensor: int
    fusion_steps: Optional[int]
    k: Optional[int]
    preconditions_checked: Tuple[Tuple[str, bool], ...]
    predicted_ordering: str
    verified_ordering: Tuple[LoewnerVerdict, LoewnerVerdict, LoewnerVerdict]
    status: str            # "holds", "violated" or "not asserted"
    strict_holds: Optional[bool]
    epsilon_L: float

    @property
    def preconditions_pass(self) -> bool:
        return all(ok for _, ok in self.preconditions_checked)


def _verdicts(sigma, sigma_f, sigma_t, tol: Optional[float]):
    return (
        loewner_compare(sigma_f, sigma, tol),
        loewner_compare(sigma_t, sigma, tol),
        loewner_compare(sigma_t, sigma_f, tol),
    )


def _chain_holds(chain: Chain, verdicts, strict: bool) -> bool:
    lookup = dict(zip(PAIRS, verdicts))
    for lhs, rel, rhs in chain:
        rel = rel if strict else NON_STRICT[rel]
        if (lhs, rhs) in lookup:
            ok = lookup[(lhs, rhs)].satisfies(rel)
        else:
            ok = lookup[(rhs, lhs)].satisfies(FLIPPED[rel])
        if not ok:
            return False
    return True


def classify_relation(step: SensorStep, tol: Optional[float] = None,
                      limiting: bool = False) -> List[RelationReport]:
    """Evaluate every one-step theorem (and the limiting ones when ``limiting``).

    ``limiting`` should only be set at a fusion step where 𝓛^L is
    numerically uniform (see ``surrogate_fusion_step``).
    """
    conditions = _Conditions(step)
    verdicts = _verdicts(step.sigma, step.sigma_f, step.sigma_t, tol)
    epsilon = min(0.0, verdicts[1].min_eig_of_difference)
    reports = []
    for spec in THEOREMS:
        if spec.limiting and not limiting:
            continue
        checked = tuple((name, bool(fn(conditions))) for name, fn in spec.preconditions)
        asserted = step.equal_start and all(ok for _, ok in checked)
        if asserted:
            status = "holds" if _chain_holds(spec.chain, verdicts, strict=False) else "violated"
            strict = _chain_holds(spec.chain, verdicts, strict=True)
        else:
            status, strict = "not asserted", None
        if status == "violated":
            logger.warning("theorem %s violated for sensor %d at L=%s", spec.theorem_id,
                           step.sensor + 1, step.fusion_steps)
        reports.append(RelationReport(
            theorem_id=spec.theorem_id,
            sensor=step.sensor,
            fusion_steps=step.fusion_steps,
            k=step.k,
            preconditions_checked=checked,
            predicted_ordering=_chain_text(spec.chain),
            verified_ordering=verdicts,
            status=status,
            strict_holds=strict,
            epsilon_L=epsilon,
        ))
    return reports


def counterexamples(reports: Sequence[RelationReport]) -> List[RelationReport]:
    return [r for r in reports if r.status == "violated"]


# ── Recursive relations ──────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class RecursiveStepReport:
    k: int
    sensor: int
    bundle: Optional[str]
    asserted: bool
    verified_ordering: Tuple[LoewnerVerdict, LoewnerVerdict, LoewnerVerdict]
    holds: Optional[bool]


RECURSIVE_BUNDLES = {
    "bundle1": ((_PHI_LE_F, _F_LE_T, _PHI_TS, _DQ_NEG),
                (("sigma_f", "<=", "sigma"), ("sigma", "<=", "sigma_t"))),
    "bundle2": ((_T_LE_F, _F_LE_PHI, _PHI_TS, _DQ_POS),
                (("sigma", "<=", "sigma_t"), ("sigma_t", "<=", "sigma_f"))),
}


def recursive_relation_check(model: SystemModel, noise: NoiseSpec, consensus: ConsensusMatrix,
                             fusion_steps: int, horizon: int, sigma0,
                             tol: Optional[float] = None) -> List[RecursiveStepReport]:
    """Propagate all indices for ``horizon`` steps and check the recursive chains.

    A sensor whose precondition bundle fails at some step is "not asserted"
    from that step on.
    """
    rows = consensus_power(consensus, fusion_steps)
    sigma0 = require_positive_definite(sigma0, "sigma0", "analysis", "recursive_relation_check")
    reports = []
    for i in range(model.n_sensors):
        sigma = sigma_f = sigma_t = sigma0
        still_valid = True
        for k in range(1, horizon + 1):
            step = one_step(model, noise, rows[i], sigma, sigma_f, sigma_t,
                            sensor=i, fusion_steps=fusion_steps, k=k)
            conditions = _Conditions(step)
            bundle = next(
                (name for name, (pre, _) in RECURSIVE_BUNDLES.items()
                 if all(fn(conditions) for _, fn in pre)),
                None,
            )
            still_valid = still_valid and bundle is not None
            verdicts = _verdicts(step.sigma, step.sigma_f, step.sigma_t, tol)
            holds = _chain_holds(RECURSIVE_BUNDLES[bundle][1], verdicts, strict=False) if still_valid else None
            reports.append(RecursiveStepReport(k, i, bundle, still_valid, verdicts, holds))
            sigma, sigma_f, sigma_t = step.sigma, step.sigma_f, step.sigma_t
    return reports


# ── Fusion-step behaviour ────────────────────────────────────────────

def _tail_ratio(ls: Sequence[int], values: Sequence[float], floor: float) -> float:
    """Geometric decay ratio over the second half of the sequence (0 once vanished)."""
    half = len(ls) // 2
    pairs = [(l, v) for l, v in zip(ls[half:], values[half:]) if v > floor]
    if len(pairs) < 3:
        return 0.0
    return fit_geometric_decay([p[0] for p in pairs], [p[1] for p in pairs]).ratio


def check_phi_vanishing(model: SystemModel, noise: NoiseSpec, consensus: ConsensusMatrix,
                        L_list: Sequence[int], sigma_prev) -> Dict[str, Any]:
    """‖Φ^ts‖_F and ‖R^ts‖_F decay geometrically in L.

    With ΔR = 0 the gap Σ^t − Σ^f approaches Ψ^tf (zero when ΔQ = 0 too), so
    ``d_tf`` tracks ‖Σ^t − Σ^f − Ψ^tf‖_F.
    """
    L_list = [int(L) for L in L_list]
    if any(b <= a for a, b in zip(L_list, L_list[1:])):
        raise ValueError("L_list must be strictly increasing")
    dr_zero = all(np.allclose(d, 0.0) for d in noise.dR)
    rows, sensors = [], []
    for i in range(model.n_sensors):
        series: Dict[str, List[float]] = {"phi_ts": [], "r_ts": [], "d_tf": [], "phi_t_minus_phi": []}
        for L in L_list:
            step = one_step(model, noise, consensus_power(consensus, L)[i], sigma_prev,
                            sensor=i, fusion_steps=L)
            ts = decompose_ts(step)
            values = {
                "phi_ts": frobenius(step.phi.phi_ts),
                "r_ts": frobenius(ts.r_ts),
                "d_tf": frobenius(step.sigma_t - step.sigma_f - decompose_tf(step).psi_tf),
                "phi_t_minus_phi": frobenius(step.phi.phi_t - step.phi.phi),
            }
            for key, value in values.items():
                series[key].append(value)
            rows.append({"sensor": i, "L": L, **values})
        scale = 1.0 + frobenius(one_step(model, noise, consensus_power(consensus, L_list[-1])[i],
                                         sigma_prev).phi.phi_t)
        floor = VANISHING_FLOOR * scale
        phi_ratio = _tail_ratio(L_list, series["phi_ts"], floor)
        r_ratio = _tail_ratio(L_list, series["r_ts"], floor)
        tf_ratio = _tail_ratio(L_list, series["d_tf"], floor) if dr_zero else None
        sensors.append({
            "sensor": i,
            "phi_ts_ratio": phi_ratio,
            "r_ts_ratio": r_ratio,
            "d_tf_ratio": tf_ratio,
            "passed": phi_ratio < 1.0 and r_ratio < 1.0 and (tf_ratio is None or tf_ratio < 1.0),
        })
    return {"passed": all(s["passed"] for s in sensors), "dr_zero": dr_zero, "sensors": sensors, "rows": rows}


def check_corollary_identical_sensors(model: SystemModel, noise: NoiseSpec, consensus: ConsensusMatrix,
                                      d: int, m: int, sigma_prev) -> Dict[str, Any]:
    """0 ⪯ Φ^ts(m) ⪯ Φ^ts(d) and Σ^t ⪰ Σ when every sensor has the same kernel."""
    op = "check_corollary_identical_sensors"
    if d < 1 or m < d:
        raise ValueError(f"need 1 <= d <= m, got d={d}, m={m}")
    kernels = [_sandwich(model.H[j], noise.Ru[j], noise.R[j], op) for j in range(model.n_sensors)]
    if any(relative_residual(kernels[0], kj) > EQUAL_START_RTOL for kj in kernels[1:]):
        raise AssumptionError("sensor kernels HᵀRu⁻¹R·Ru⁻¹H are not identical")

    lbar_m = deviation_from_power(consensus_power(consensus, m), 1)
    lbar_d = deviation_from_power(consensus_power(consensus, d), 1)
    power_m = consensus_power(consensus, m)
    rows = []
    for i in range(model.n_sensors):
        phi_ts_m = lbar_m[i].sum() * kernels[0]
        phi_ts_d = lbar_d[i].sum() * kernels[0]
        step = one_step(model, noise, power_m[i], sigma_prev, sensor=i, fusion_steps=m)
        rows.append({
            "sensor": i,
            "phi_ts_psd": loewner_compare(phi_ts_m, np.zeros_like(phi_ts_m)).geq,
            "phi_ts_monotone": loewner_compare(phi_ts_m, phi_ts_d).leq,
            "phi_ts_matches": relative_residual(phi_ts_m, step.phi.phi_ts) <= 1e-10,
            "sigma_t_geq_sigma": loewner_compare(step.sigma_t, step.sigma).geq,
        })
    passed = all(all(v for k, v in r.items() if k != "sensor") for r in rows)
    return {"passed": passed, "d": d, "m": m, "rows": rows}


def epsilon_tail(model: SystemModel, noise: NoiseSpec, consensus: ConsensusMatrix,
                 L_list: Sequence[int], sigma_prev) -> List[Dict[str, Any]]:
    """ε^(L) = min(0, λ_min(Σ^t − Σ)) for every sensor and L."""
    out = []
    for L in L_list:
        for step in one_step_all(model, noise, consensus, L, sigma_prev):
            verdict = loewner_compare(step.sigma_t, step.sigma)
            out.append({"sensor": step.sensor, "L": L, "epsilon": min(0.0, verdict.min_eig_of_difference)})
    return out


# ── Report rows ──────────────────────────────────────────────────────

def index_rows(step: SensorStep) -> List[Dict[str, Any]]:
    """Long-format rows (sensor, L, k, quantity, value) for one sensor step."""
    phi = step.phi
    verdicts = _verdicts(step.sigma, step.sigma_f, step.sigma_t, None)
    r_ts = decompose_ts(step, diagnostic=True).r_ts
    values: Dict[str, Any] = {
        "trace_sigma": np.trace(step.sigma),
        "trace_sigma_f": np.trace(step.sigma_f),
        "trace_sigma_t": np.trace(step.sigma_t),
        "trace_sigma_prior": np.trace(step.standard.prior),
        "trace_sigma_f_prior": np.trace(step.nominal.prior),
        "trace_sigma_t_prior": np.trace(step.true.prior),
        "trace_phi": np.trace(phi.phi),
        "trace_phi_f": np.trace(phi.phi_f),
        "trace_phi_t": np.trace(phi.phi_t),
        "trace_phi_ts": np.trace(phi.phi_ts),
        "trace_phi_bar_tf": np.trace(phi.phi_bar_tf),
        "trace_r_ts": np.trace(r_ts),
        "lambda_min_f_minus_s": verdicts[0].min_eig_of_difference,
        "lambda_min_t_minus_s": verdicts[1].min_eig_of_difference,
        "lambda_min_t_minus_f": verdicts[2].min_eig_of_difference,
        "epsilon": min(0.0, verdicts[1].min_eig_of_difference),
    }
    rows = [
        {"sensor": step.sensor + 1, "L": step.fusion_steps, "k": step.k, "quantity": name, "value": float(v)}
        for name, v in values.items()
    ]
    for (lhs, rhs), verdict in zip(PAIRS, verdicts):
        rows.append({"sensor": step.sensor + 1, "L": step.fusion_steps, "k": step.k,
                     "quantity": f"ordering_{lhs}_vs_{rhs}", "value": verdict.ordering.value})
    return rows


def relation_rows(reports: Sequence[RelationReport]) -> List[Dict[str, Any]]:
    return [
        {
            "sensor": r.sensor + 1,
            "L": r.fusion_steps,
            "k": r.k,
            "theorem": r.theorem_id,
            "preconditions": "; ".join(f"{name}={'pass' if ok else 'fail'}" for name, ok in r.preconditions_checked),
            "predicted": r.predicted_ordering,
            "status": r.status,
            "strict_holds": "" if r.strict_holds is None else r.strict_holds,
            "epsilon_L": r.epsilon_L,
        }
        for r in reports
    ]


def recursive_rows(reports: Sequence[RecursiveStepReport]) -> List[Dict[str, Any]]:
    return [
        {
            "sensor": r.sensor + 1,
            "k": r.k,
            "bundle": r.bundle or "",
            "status": "not asserted" if not r.asserted else ("holds" if r.holds else "violated"),
            "f_vs_s": r.verified_ordering[0].ordering.value,
            "t_vs_s": r.verified_ordering[1].ordering.value,
            "t_vs_f": r.verified_ordering[2].ordering.value,
        }
        for r in reports
    ]
