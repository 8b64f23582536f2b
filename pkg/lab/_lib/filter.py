"""Consensus-on-measurement distributed filter and the three covariance indices.

The running filter only knows the nominal covariances (Qu, Ru_i). Each time
step it predicts, runs L consensus sweeps over the local information pairs
(U_i, V_i) using only per-edge weighted sums, and corrects in information
form. Alongside it three index recursions are advanced per sensor:

* standard Σ: the filter that knew the actual covariances,
* nominal Σ^f: what the filter itself computes,
* true Σ^t: the actual error covariance of the nominal filter.

The index recursions use the stacked operators built from 𝓛^L; the state
estimate never touches 𝓛^L.

State arrays have shape (N, n) for a single realization or (N, B, n) for a
batch of B independent realizations sharing the same gains.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from _lib.errors import DimensionError
from _lib.linalg import (
    as_matrix,
    relative_residual,
    require_positive_definite,
    solve,
    solve_spd,
    symmetrize,
)
from _lib.model import NoiseSpec, StackedOperators, SystemModel, build_stacked, check_compatible
from _lib.network import ConsensusMatrix, consensus_power

logger = logging.getLogger(__name__)

FORM_RTOL = 1e-9


# ── Index recursions ─────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class IndexStep:
    """Prior/posterior pair of one covariance index.

    ``form_residual`` compares the posterior against an equivalent closed
    form (covariance form for Σ, sandwich form for Σ^t).
    """

    prior: np.ndarray
    post: np.ndarray
    form_residual: float


@dataclass(frozen=True, eq=False)
class NominalStep:
    prior: np.ndarray
    post: np.ndarray
    gain: np.ndarray
    joseph_residual: float
    gain_residual: float
    identity_residual: float


def _information_post(prior: np.ndarray, info: np.ndarray, operation: str) -> np.ndarray:
    """(prior⁻¹ + info)⁻¹ computed as (I + prior·info)⁻¹·prior."""
    n = prior.shape[0]
    return symmetrize(solve(np.eye(n) + prior @ info, prior, "information matrix", "filter", operation))


def _check_form(name: str, residual: float) -> None:
    if residual > FORM_RTOL:
        logger.warning("%s forms disagree: relative residual %.3e", name, residual)


def standard_index_step(Sigma_prev, F, Q, stacked: StackedOperators) -> IndexStep:
    """Σ with actual covariances: information form, checked against covariance form."""
    F = as_matrix(F, "F")
    prior = require_positive_definite(F @ Sigma_prev @ F.T + Q, "standard prior", "filter",
                                      "standard_index_step")
    post = _information_post(prior, stacked.information(), "standard_index_step")

    H = stacked.Htilde
    HP = H @ prior
    covariance_form = symmetrize(
        prior - HP.T @ solve_spd(stacked.Rtilde + HP @ H.T, HP, "innovation covariance", "filter",
                                 "standard_index_step")
    )
    residual = relative_residual(post, covariance_form)
    _check_form("standard index information/covariance", residual)
    return IndexStep(prior, post, residual)


def nominal_index_step(Sigma_f_prev, F, Qu, stacked: StackedOperators) -> NominalStep:
    """Σ^f with nominal covariances, its gain, and the Joseph-form cross-check."""
    op = "nominal_index_step"
    F = as_matrix(F, "F")
    prior = require_positive_definite(F @ Sigma_f_prev @ F.T + Qu, "nominal prior", "filter", op)
    post = _information_post(prior, stacked.information(nominal=True), op)

    H = stacked.Htilde
    n = prior.shape[0]
    gain = solve_spd(stacked.Rtilde_u, H @ post, "Rtilde_u", "filter", op).T
    HP = H @ prior
    gain_alt = solve_spd(stacked.Rtilde_u + HP @ H.T, HP, "nominal innovation covariance", "filter", op).T
    closed_loop = np.eye(n) - gain @ H
    joseph = symmetrize(closed_loop @ prior @ closed_loop.T + gain @ stacked.Rtilde_u @ gain.T)
    post_over_prior = solve(prior, post, "nominal prior", "filter", op).T

    step = NominalStep(
        prior=prior,
        post=post,
        gain=gain,
        joseph_residual=relative_residual(post, joseph),
        gain_residual=relative_residual(gain, gain_alt),
        identity_residual=relative_residual(closed_loop, post_over_prior),
    )
    _check_form("nominal index information/Joseph", step.joseph_residual)
    _check_form("nominal gain", step.gain_residual)
    return step


def true_covariance_step(Sigma_t_prev, F, Q, nominal: NominalStep, stacked: StackedOperators) -> IndexStep:
    """Σ^t: nominal gain applied under actual Q and R̄, checked against the sandwich form."""
    op = "true_covariance_step"
    F = as_matrix(F, "F")
    prior = symmetrize(F @ Sigma_t_prev @ F.T + Q)
    H = stacked.Htilde
    if nominal.gain.shape != (prior.shape[0], H.shape[0]):
        raise DimensionError(f"gain {nominal.gain.shape} does not match stacked operators {H.shape}")
    K = nominal.gain
    closed_loop = np.eye(prior.shape[0]) - K @ H
    post = symmetrize(closed_loop @ prior @ closed_loop.T + K @ stacked.Rbar @ K.T)

    B = solve(nominal.prior, nominal.post, "nominal prior", "filter", op).T
    sandwich = symmetrize(B @ prior @ B.T + nominal.post @ stacked.true_information() @ nominal.post)
    residual = relative_residual(post, sandwich)
    _check_form("true covariance Joseph/sandwich", residual)
    return IndexStep(prior, post, residual)


@dataclass(frozen=True, eq=False)
class IndexTriple:
    """Posterior (and, after the first step, prior) indices of every sensor."""

    sigma: Tuple[np.ndarray, ...]
    sigma_f: Tuple[np.ndarray, ...]
    sigma_t: Tuple[np.ndarray, ...]
    sigma_prior: Optional[Tuple[np.ndarray, ...]] = None
    sigma_f_prior: Optional[Tuple[np.ndarray, ...]] = None
    sigma_t_prior: Optional[Tuple[np.ndarray, ...]] = None
    gains: Tuple[np.ndarray, ...] = ()

    @classmethod
    def equal_start(cls, n_sensors: int, sigma0) -> "IndexTriple":
        sigma0 = require_positive_definite(sigma0, "sigma0", "filter", "IndexTriple")
        same = tuple(sigma0.copy() for _ in range(n_sensors))
        return cls(same, same, same)

    @property
    def n_sensors(self) -> int:
        return len(self.sigma)


@dataclass(frozen=True, eq=False)
class IndexHistory:
    """Index recursions of a single sensor over ``horizon`` steps."""

    standard: List[IndexStep]
    nominal: List[NominalStep]
    true: List[IndexStep]


def iterate_indices(model: SystemModel, noise: NoiseSpec, row, sigma0, horizon: int,
                    stacked: Optional[StackedOperators] = None) -> IndexHistory:
    """Run the three index recursions of one sensor from an equal start."""
    if stacked is None:
        stacked = build_stacked(model, noise, row)
    sigma = sigma_f = sigma_t = require_positive_definite(sigma0, "sigma0", "filter", "iterate_indices")
    history = IndexHistory([], [], [])
    for _ in range(horizon):
        std = standard_index_step(sigma, model.F, noise.Q, stacked)
        nom = nominal_index_step(sigma_f, model.F, noise.Qu, stacked)
        tru = true_covariance_step(sigma_t, model.F, noise.Q, nom, stacked)
        history.standard.append(std)
        history.nominal.append(nom)
        history.true.append(tru)
        sigma, sigma_f, sigma_t = std.post, nom.post, tru.post
    return history


# ── Distributed filter ───────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class FilterState:
    k: int
    xhat_prior: np.ndarray
    xhat_post: np.ndarray
    fusion_residual: float = 0.0

    @classmethod
    def initial(cls, n_sensors: int, x0, batch: Optional[int] = None) -> "FilterState":
        x0 = np.asarray(x0, dtype=float).ravel()
        shape = (n_sensors,) + (() if batch is None else (batch,)) + x0.shape
        x = np.broadcast_to(x0, shape).copy()
        return cls(0, x.copy(), x)


class DistributedFilter:
    """CMDF with ``fusion_steps`` consensus sweeps per time step."""

    def __init__(self, model: SystemModel, noise: NoiseSpec, consensus: ConsensusMatrix,
                 fusion_steps: int):
        check_compatible(model, noise)
        if consensus.n != model.n_sensors:
            raise DimensionError(f"consensus matrix is {consensus.n}×{consensus.n} for {model.n_sensors} sensors")
        if int(fusion_steps) != fusion_steps or fusion_steps < 1:
            raise ValueError(f"fusion step L must be an integer >= 1, got {fusion_steps}")
        self.model = model
        self.noise = noise
        self.consensus = consensus
        self.fusion_steps = int(fusion_steps)

        N = model.n_sensors
        self._links = [consensus.in_weights(i) for i in range(N)]
        # Ru_i⁻¹H_i, so local vectors are N·y_iᵀ(Ru_i⁻¹H_i)
        self._local = [
            solve_spd(noise.Ru[i], model.H[i], f"Ru[{i}]", "filter", "DistributedFilter")
            for i in range(N)
        ]
        self._u0 = np.stack([N * symmetrize(model.H[i].T @ self._local[i]) for i in range(N)])

        # 𝓛^L only feeds the index recursions
        rows = consensus_power(consensus, self.fusion_steps)
        self.stacked = tuple(build_stacked(model, noise, rows[i]) for i in range(N))

    def sweep(self, values: np.ndarray) -> np.ndarray:
        """One consensus sweep: sensor i takes Σ_j l_ij·value_j over its links."""
        out = np.zeros_like(values)
        for i, links in enumerate(self._links):
            for j, weight in links:
                out[i] += weight * values[j]
        return out

    def fuse(self, values: np.ndarray) -> np.ndarray:
        for _ in range(self.fusion_steps):
            values = self.sweep(values)
        return values

    def step(self, state: FilterState, triple: IndexTriple,
             measurements: Sequence) -> Tuple[FilterState, IndexTriple]:
        N = self.model.n_sensors
        if len(measurements) != N or any(y is None for y in measurements):
            raise ValueError(f"measurements are required for all {N} sensors")
        F, Q, Qu = self.model.F, self.noise.Q, self.noise.Qu

        x_prior = state.xhat_post @ F.T
        v0 = np.stack([
            N * (np.asarray(y, dtype=float) @ local) for y, local in zip(measurements, self._local)
        ])
        U = self.fuse(self._u0.copy())
        V = self.fuse(v0)

        x_post = np.empty_like(x_prior)
        steps: Dict[str, List[Any]] = {"std": [], "nom": [], "tru": []}
        fusion_residual = 0.0
        for i in range(N):
            std = standard_index_step(triple.sigma[i], F, Q, self.stacked[i])
            nom = nominal_index_step(triple.sigma_f[i], F, Qu, self.stacked[i])
            tru = true_covariance_step(triple.sigma_t[i], F, Q, nom, self.stacked[i])
            steps["std"].append(std)
            steps["nom"].append(nom)
            steps["tru"].append(tru)

            post = _information_post(nom.prior, symmetrize(U[i]), "cmdf_step")
            info = solve_spd(nom.prior, x_prior[i].T, "nominal prior", "filter", "cmdf_step").T + V[i]
            x_post[i] = info @ post.T
            fusion_residual = max(fusion_residual, relative_residual(post, nom.post))

        new_triple = IndexTriple(
            sigma=tuple(s.post for s in steps["std"]),
            sigma_f=tuple(s.post for s in steps["nom"]),
            sigma_t=tuple(s.post for s in steps["tru"]),
            sigma_prior=tuple(s.prior for s in steps["std"]),
            sigma_f_prior=tuple(s.prior for s in steps["nom"]),
            sigma_t_prior=tuple(s.prior for s in steps["tru"]),
            gains=tuple(s.gain for s in steps["nom"]),
        )
        logger.debug("cmdf step %d done, fusion residual %.2e", state.k + 1, fusion_residual)
        return FilterState(state.k + 1, x_prior, x_post, fusion_residual), new_triple


def cmdf_step(filt: DistributedFilter, state: FilterState, triple: IndexTriple,
              measurements: Sequence) -> Tuple[FilterState, IndexTriple]:
    return filt.step(state, triple, measurements)


def posterior_error_closed_form(nominal: NominalStep, stacked: StackedOperators, e_prior,
                                measurement_noise: Sequence) -> np.ndarray:
    """e_post = Σ^f_post(Σ^f_prior)⁻¹e_prior − Σ^f_post·H̃ᵀ(R̃u)⁻¹ν̃ with e = x − x̂.

    ``measurement_noise`` holds v_j for every sensor; ν̃ stacks the active ones.
    """
    e_prior = np.asarray(e_prior, dtype=float)
    nu = np.concatenate([np.asarray(measurement_noise[j], dtype=float) for j in stacked.active], axis=-1)
    propagated = solve(nominal.prior, e_prior.T, "nominal prior", "filter",
                       "posterior_error_closed_form").T @ nominal.post.T
    injected = solve_spd(stacked.Rtilde_u, nu.T, "Rtilde_u", "filter",
                         "posterior_error_closed_form").T @ stacked.Htilde @ nominal.post.T
    return propagated - injected


# ── Simulated truth ──────────────────────────────────────────────────

class TruthSampler:
    """Draws states and measurements with the actual covariances."""

    def __init__(self, model: SystemModel, noise: NoiseSpec):
        check_compatible(model, noise)
        self.model = model
        self._q_chol = np.linalg.cholesky(noise.Q)
        self._r_chol = [np.linalg.cholesky(r) for r in noise.R]

    def initial(self, rng: np.random.Generator, x0_mean, sigma0, batch: Optional[int] = None) -> np.ndarray:
        sigma0 = require_positive_definite(sigma0, "sigma0", "filter", "simulate_truth")
        shape = () if batch is None else (batch,)
        x0_mean = np.asarray(x0_mean, dtype=float).ravel()
        return x0_mean + rng.standard_normal(shape + (self.model.n,)) @ np.linalg.cholesky(sigma0).T

    def advance(self, rng: np.random.Generator, x: np.ndarray):
        """Return (x_next, process noise, measurements, measurement noises)."""
        batch = x.shape[:-1]
        w = rng.standard_normal(batch + (self.model.n,)) @ self._q_chol.T
        x_next = x @ self.model.F.T + w
        noises = [rng.standard_normal(batch + (c.shape[0],)) @ c.T for c in self._r_chol]
        ys = [x_next @ h.T + v for h, v in zip(self.model.H, noises)]
        return x_next, w, ys, noises


@dataclass(frozen=True, eq=False)
class TruthTrajectory:
    seed: Any
    states: np.ndarray
    process_noise: np.ndarray
    measurements: Tuple[Tuple[np.ndarray, ...], ...]
    measurement_noise: Tuple[Tuple[np.ndarray, ...], ...]

    @property
    def horizon(self) -> int:
        return len(self.measurements)


def simulate_truth(model: SystemModel, noise: NoiseSpec, horizon: int,
                   seed: Union[int, np.random.Generator], x0_mean=None, sigma0=None,
                   batch: Optional[int] = None) -> TruthTrajectory:
    """States x_0..x_horizon and measurements y_1..y_horizon; deterministic given seed."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    rng = np.random.default_rng(seed)
    x0_mean = np.zeros(model.n) if x0_mean is None else x0_mean
    sigma0 = np.eye(model.n) if sigma0 is None else sigma0

    sampler = TruthSampler(model, noise)
    x = sampler.initial(rng, x0_mean, sigma0, batch)
    states, process, ys_all, vs_all = [x], [], [], []
    for _ in range(horizon):
        x, w, ys, vs = sampler.advance(rng, x)
        states.append(x)
        process.append(w)
        ys_all.append(tuple(ys))
        vs_all.append(tuple(vs))
    return TruthTrajectory(
        seed=seed if isinstance(seed, int) else None,
        states=np.stack(states),
        process_noise=np.stack(process),
        measurements=tuple(ys_all),
        measurement_noise=tuple(vs_all),
    )


@dataclass(frozen=True, eq=False)
class TrajectoryRecord:
    """A simulated CMDF run: truth, per-step index triples and estimates."""

    rng_seed: Any
    truth: TruthTrajectory
    triples: Tuple[IndexTriple, ...]
    states: Tuple[FilterState, ...]

    def __post_init__(self):
        if not (len(self.triples) == len(self.states) == self.truth.horizon + 1):
            raise DimensionError("trajectory record lengths are inconsistent")


def run_filter(filt: DistributedFilter, truth: TruthTrajectory, x0_mean=None, sigma0=None) -> TrajectoryRecord:
    """Run the filter over a simulated trajectory from an equal start."""
    model = filt.model
    x0_mean = np.zeros(model.n) if x0_mean is None else x0_mean
    sigma0 = np.eye(model.n) if sigma0 is None else sigma0
    batch = truth.states.shape[1] if truth.states.ndim == 3 else None

    state = FilterState.initial(model.n_sensors, x0_mean, batch)
    triple = IndexTriple.equal_start(model.n_sensors, sigma0)
    states, triples = [state], [triple]
    for ys in truth.measurements:
        state, triple = filt.step(state, triple, ys)
        states.append(state)
        triples.append(triple)
    return TrajectoryRecord(truth.seed, truth, tuple(triples), tuple(states))


def trajectory_rows(record: TrajectoryRecord) -> List[Dict[str, Any]]:
    """One row per (k, sensor): index traces, estimate and truth of a single realization."""
    if record.truth.states.ndim != 2:
        raise DimensionError("trajectory rows are written for single realizations only")
    rows = []
    for k, (triple, state) in enumerate(zip(record.triples, record.states)):
        truth = record.truth.states[k]
        for i in range(triple.n_sensors):
            row: Dict[str, Any] = {
                "k": k,
                "sensor": i + 1,
                "trace_sigma": float(np.trace(triple.sigma[i])),
                "trace_sigma_f": float(np.trace(triple.sigma_f[i])),
                "trace_sigma_t": float(np.trace(triple.sigma_t[i])),
            }
            for c, value in enumerate(state.xhat_post[i]):
                row[f"estimate_{c}"] = float(value)
            for c, value in enumerate(truth):
                row[f"truth_{c}"] = float(value)
            rows.append(row)
    return rows
