"""Monte Carlo check that Σ^t is the actual error covariance of the nominal filter.

Runs are drawn in vectorized batches: every batch advances B independent
truth/filter realizations together through ``DistributedFilter`` (state
shape (N, B, n)). Each batch has its own Philox generator spawned from
``SeedSequence(seed)``, so results are identical for any thread count and
partial sums are reduced in batch order.
"""

import logging
from dataclasses import dataclass
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from scipy.stats import norm

from _lib.errors import DivergenceError
from _lib.filter import DistributedFilter, FilterState, IndexTriple, TruthSampler
from _lib.linalg import frobenius, loewner_compare, require_positive_definite
from _lib.model import NoiseSpec, SystemModel
from _lib.network import ConsensusMatrix, fit_geometric_decay

logger = logging.getLogger(__name__)

TOLERANCE_FLOOR = 0.05
SAMPLING_MULTIPLIER = 3.0
MEAN_MULTIPLIER = 4.0
SLOPE_TARGET = -0.5
SLOPE_TOLERANCE = 0.15


class McConfig(BaseModel):
    """Monte Carlo settings; ``n_runs`` realizations of ``horizon`` steps each."""

    n_runs: int = Field(..., ge=100)
    horizon: int = Field(1, ge=1)
    seed: int = Field(0, ge=0)
    ci_level: float = Field(0.95, gt=0.0, lt=1.0)
    batch_size: int = Field(10_000, ge=1)
    threads: int = Field(1, ge=1)

    model_config = ConfigDict(extra="forbid")


@dataclass(frozen=True, eq=False)
class McProblem:
    """Everything a Monte Carlo run needs besides its config."""

    model: SystemModel
    noise: NoiseSpec
    consensus: ConsensusMatrix
    fusion_steps: int
    x0_mean: np.ndarray
    sigma0: np.ndarray


@dataclass(frozen=True, eq=False)
class McCell:
    sensor: int
    k: int
    empirical: np.ndarray
    analytic: np.ndarray
    rel_error: float
    expected_error: float
    tolerance: float
    mean: np.ndarray
    mean_halfwidth: np.ndarray   # ci_level half-width of the error mean
    mean_bound: np.ndarray       # 4·σ̂/√n
    psd: bool

    @property
    def passed(self) -> bool:
        return self.rel_error <= self.tolerance

    @property
    def unbiased(self) -> bool:
        return bool(np.all(np.abs(self.mean) <= self.mean_bound))


@dataclass(frozen=True, eq=False)
class McReport:
    config: McConfig
    fusion_steps: int
    cells: Tuple[McCell, ...]

    @property
    def passed(self) -> bool:
        return all(c.passed and c.unbiased and c.psd for c in self.cells)

    @property
    def max_rel_error(self) -> float:
        return max(c.rel_error for c in self.cells)

    def cell(self, sensor: int, k: int) -> McCell:
        for c in self.cells:
            if c.sensor == sensor and c.k == k:
                return c
        raise KeyError((sensor, k))


def _batch_sizes(n_runs: int, batch_size: int) -> List[int]:
    full, rest = divmod(n_runs, batch_size)
    return [batch_size] * full + ([rest] if rest else [])


def _analytic(filt: DistributedFilter, sigma0: np.ndarray, horizon: int) -> List[IndexTriple]:
    """Index triples for k = 1..horizon; the estimate path is irrelevant here."""
    N = filt.model.n_sensors
    triple = IndexTriple.equal_start(N, sigma0)
    state = FilterState.initial(N, np.zeros(filt.model.n))
    zeros = [np.zeros(m) for m in filt.model.sensor_dims]
    out = []
    for _ in range(horizon):
        state, triple = filt.step(state, triple, zeros)
        out.append(triple)
    return out


def _run_batch(problem: McProblem, filt: DistributedFilter, horizon: int, seed_seq: np.random.SeedSequence,
               size: int, offset: int) -> Tuple[np.ndarray, np.ndarray]:
    """Sums of e and e·eᵀ per (k, sensor) over one batch."""
    rng = np.random.Generator(np.random.Philox(seed_seq))
    model = problem.model
    N, n = model.n_sensors, model.n
    sampler = TruthSampler(model, problem.noise)
    x = sampler.initial(rng, problem.x0_mean, problem.sigma0, batch=size)
    state = FilterState.initial(N, problem.x0_mean, batch=size)
    triple = IndexTriple.equal_start(N, problem.sigma0)

    first = np.zeros((horizon, N, n))
    second = np.zeros((horizon, N, n, n))
    for k in range(horizon):
        x, _, ys, _ = sampler.advance(rng, x)
        state, triple = filt.step(state, triple, ys)
        errors = state.xhat_post - x[np.newaxis]          # (N, B, n)
        finite = np.all(np.isfinite(errors), axis=(0, 2))
        if not np.all(finite):
            run = offset + int(np.argmin(finite))
            raise DivergenceError(f"non-finite estimate at k={k + 1}", run, "montecarlo", "run_monte_carlo")
        first[k] = errors.sum(axis=1)
        second[k] = np.einsum("ibp,ibq->ipq", errors, errors)
    return first, second


def _expected_error(analytic: np.ndarray, n_runs: int) -> float:
    """RMS relative Frobenius error of a Gaussian second-moment estimate."""
    fro2 = frobenius(analytic) ** 2
    return float(np.sqrt((fro2 + np.trace(analytic) ** 2) / n_runs / fro2))


def run_monte_carlo(problem: McProblem, cfg: McConfig) -> McReport:
    """Empirical E[e·eᵀ] of the posterior errors against Σ^t for every sensor and step."""
    sigma0 = require_positive_definite(problem.sigma0, "sigma0", "montecarlo", "run_monte_carlo")
    filt = DistributedFilter(problem.model, problem.noise, problem.consensus, problem.fusion_steps)
    sizes = _batch_sizes(cfg.n_runs, cfg.batch_size)
    children = np.random.SeedSequence(cfg.seed).spawn(len(sizes))
    offsets = np.concatenate([[0], np.cumsum(sizes)[:-1]]).astype(int)
    logger.info("monte carlo: %d runs in %d batches, %d thread(s)", cfg.n_runs, len(sizes), cfg.threads)

    partials = Parallel(n_jobs=cfg.threads, prefer="threads")(
        delayed(_run_batch)(problem, filt, cfg.horizon, child, size, int(offset))
        for child, size, offset in zip(children, sizes, offsets)
    )
    first = np.zeros_like(partials[0][0])
    second = np.zeros_like(partials[0][1])
    for f, s in partials:
        first += f
        second += s

    analytic = _analytic(filt, sigma0, cfg.horizon)
    n = cfg.n_runs
    z = float(norm.ppf(0.5 + cfg.ci_level / 2.0))
    cells = []
    for k in range(cfg.horizon):
        for i in range(problem.model.n_sensors):
            mean = first[k, i] / n
            empirical = 0.5 * (second[k, i] + second[k, i].T) / n
            sigma_t = analytic[k].sigma_t[i]
            std = np.sqrt(np.maximum(np.diag(empirical) - mean ** 2, 0.0))
            expected = _expected_error(sigma_t, n)
            cells.append(McCell(
                sensor=i,
                k=k + 1,
                empirical=empirical,
                analytic=sigma_t,
                rel_error=frobenius(empirical - sigma_t) / frobenius(sigma_t),
                expected_error=expected,
                tolerance=max(SAMPLING_MULTIPLIER * expected, TOLERANCE_FLOOR),
                mean=mean,
                mean_halfwidth=z * std / np.sqrt(n),
                mean_bound=MEAN_MULTIPLIER * std / np.sqrt(n),
                psd=loewner_compare(empirical, np.zeros_like(empirical)).geq,
            ))
    report = McReport(cfg, problem.fusion_steps, tuple(cells))
    logger.info("monte carlo: max relative error %.4f", report.max_rel_error)
    return report


@dataclass(frozen=True)
class SlopeReport:
    run_counts: Tuple[int, ...]
    mean_errors: Tuple[float, ...]
    slope: float
    r_squared: float

    @property
    def passed(self) -> bool:
        return abs(self.slope - SLOPE_TARGET) <= SLOPE_TOLERANCE


def sampling_rate_slope(problem: McProblem, run_counts: Sequence[int] = (1_000, 10_000, 100_000),
                        replicates: int = 20, seed: int = 0, horizon: int = 1,
                        threads: int = 1) -> SlopeReport:
    """Log-log slope of the mean relative error against the number of runs."""
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    errors = []
    for count in run_counts:
        values = []
        for rep in range(replicates):
            child = int(np.random.SeedSequence([seed, int(count), rep]).generate_state(1)[0])
            cfg = McConfig(n_runs=int(count), horizon=horizon, seed=child, threads=threads)
            report = run_monte_carlo(problem, cfg)
            values.extend(c.rel_error for c in report.cells if c.k == horizon)
        errors.append(float(np.mean(values)))
    fit = fit_geometric_decay(np.log(run_counts), errors)
    return SlopeReport(tuple(int(c) for c in run_counts), tuple(errors), fit.log_slope, fit.r_squared)


def mc_rows(report: McReport) -> List[Dict[str, Any]]:
    """One row per (sensor, k); sensors are 1-based."""
    return [
        {
            "sensor": c.sensor + 1,
            "L": report.fusion_steps,
            "k": c.k,
            "trace_empirical": float(np.trace(c.empirical)),
            "trace_analytic": float(np.trace(c.analytic)),
            "rel_error": c.rel_error,
            "tolerance": c.tolerance,
            "passed": c.passed,
            "mean_norm": float(np.linalg.norm(c.mean)),
            "unbiased": c.unbiased,
        }
        for c in report.cells
    ]
