"""Rank candidate 3-sensor topologies against the published worked example.

Only the example's numbers survive as text, not its network drawing. Every
connected labeled graph on three sensors (three paths and the triangle) is
tried under both Metropolis neighbor-count conventions; each candidate runs
the one-step computation and is scored by its largest absolute deviation
from the six published values.
"""

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from _lib.analysis import one_step_all
from _lib.errors import ConsensusMatrixError, DisconnectedTopologyError
from _lib.model import NoiseSpec, SystemModel
from _lib.network import Topology, metropolis_weights

logger = logging.getLogger(__name__)

EXAMPLE_MODEL = SystemModel(np.array([[1.0]]), (np.array([[1.0]]),) * 3)
EXAMPLE_NOISE = NoiseSpec(
    Q=np.array([[1.0]]),
    Qu=np.array([[2.0]]),
    R=(np.array([[1.0]]), np.array([[1.0]]), np.array([[0.1]])),
    Ru=(np.array([[1.0]]), np.array([[1.0]]), np.array([[0.11]])),
)
EXAMPLE_SIGMA_PREV = np.array([[4.0]])

# Published to four decimals
PUBLISHED_SIGMA_T = (0.1406, 0.0821, 0.0873)
PUBLISHED_SIGMA = (0.1613, 0.0820, 0.0549)
MATCH_TOLERANCE = 5e-5

CONVENTIONS = {"degree+1": True, "degree": False}


@dataclass(frozen=True)
class Candidate:
    edges: Tuple[Tuple[int, int], ...]      # 1-based labels
    convention: str
    sigma: Optional[Tuple[float, ...]] = None
    sigma_t: Optional[Tuple[float, ...]] = None
    max_deviation: float = float("inf")
    reason: str = ""

    @property
    def accepted(self) -> bool:
        return not self.reason

    @property
    def matches(self) -> bool:
        return self.accepted and self.max_deviation < MATCH_TOLERANCE


@dataclass(frozen=True)
class TopologyRanking:
    candidates: Tuple[Candidate, ...]   # accepted first, by deviation

    @property
    def best(self) -> Candidate:
        return self.candidates[0]

    @property
    def rejected(self) -> List[Candidate]:
        return [c for c in self.candidates if not c.accepted]


def candidate_topologies(n_sensors: int = 3) -> List[Topology]:
    """All connected labeled graphs on ``n_sensors`` sensors."""
    pairs = list(combinations(range(n_sensors), 2))
    out = []
    for size in range(n_sensors - 1, len(pairs) + 1):
        for edges in combinations(pairs, size):
            try:
                out.append(Topology(n_sensors, frozenset(edges)))
            except DisconnectedTopologyError:
                continue
    return out


def _evaluate(topology: Topology, convention: str, fusion_steps: int) -> Candidate:
    edges = tuple(topology.labels())
    try:
        consensus = metropolis_weights(topology, CONVENTIONS[convention])
    except ConsensusMatrixError as e:
        return Candidate(edges, convention, reason=str(e))
    steps = one_step_all(EXAMPLE_MODEL, EXAMPLE_NOISE, consensus, fusion_steps, EXAMPLE_SIGMA_PREV)
    sigma = tuple(float(s.sigma[0, 0]) for s in steps)
    sigma_t = tuple(float(s.sigma_t[0, 0]) for s in steps)
    deviation = max(
        max(abs(a - b) for a, b in zip(sigma, PUBLISHED_SIGMA)),
        max(abs(a - b) for a, b in zip(sigma_t, PUBLISHED_SIGMA_T)),
    )
    return Candidate(edges, convention, sigma, sigma_t, deviation)


def infer_example_topology(fusion_steps: int = 2) -> TopologyRanking:
    candidates = [
        _evaluate(topology, convention, fusion_steps)
        for topology in candidate_topologies(3)
        for convention in CONVENTIONS
    ]
    candidates.sort(key=lambda c: (not c.accepted, c.max_deviation, c.edges, c.convention))
    ranking = TopologyRanking(tuple(candidates))
    if not ranking.best.matches:
        logger.warning("no candidate topology within %.0e; best deviation %.3e",
                       MATCH_TOLERANCE, ranking.best.max_deviation)
    return ranking


def candidate_rows(ranking: TopologyRanking) -> List[Dict[str, Any]]:
    rows = []
    for rank, c in enumerate(ranking.candidates, start=1):
        row: Dict[str, Any] = {
            "rank": rank,
            "edges": " ".join(f"{a}-{b}" for a, b in c.edges),
            "convention": c.convention,
            "max_deviation": c.max_deviation if c.accepted else None,
            "status": "ok" if c.accepted else f"rejected: {c.reason}",
        }
        for i in range(3):
            row[f"sigma_{i + 1}"] = None if c.sigma is None else c.sigma[i]
            row[f"sigma_t_{i + 1}"] = None if c.sigma_t is None else c.sigma_t[i]
        rows.append(row)
    return rows
