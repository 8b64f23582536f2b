"""Scenario files: JSON schema, validation and construction of domain objects.

Matrices are nested row arrays; a bare number stands for a 1×1 matrix.
Sensor labels in ``topology.edges`` are 1-based. Every validation failure
is raised as ``ScenarioError`` carrying the file path and, where it can be
located, the line of the offending key.
"""

import hashlib
import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from _lib.errors import LabError, ScenarioError
from _lib.linalg import as_symmetric, require_positive_definite
from _lib.model import NoiseSpec, SystemModel, check_compatible
from _lib.montecarlo import McConfig, McProblem
from _lib.network import ConsensusMatrix, Topology, metropolis_weights

Matrix = Union[float, List[List[float]]]

AnalysisName = Literal[
    "one_step_sweep",
    "time_sweep",
    "relations",
    "recursive",
    "phi_vanishing",
    "steady_state",
    "monte_carlo",
    "trajectory",
]


# ── Schema ───────────────────────────────────────────────────────────

class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TopologyConfig(_Strict):
    n_sensors: int = Field(..., ge=1)
    edges: List[Tuple[int, int]] = Field(default_factory=list)
    include_self: bool = True
    weights: Optional[List[List[float]]] = None


class ModelConfig(_Strict):
    F: Matrix
    H: List[Matrix] = Field(..., min_length=1)


class NoiseConfig(_Strict):
    Q: Matrix
    Qu: Matrix
    R: List[Matrix] = Field(..., min_length=1)
    Ru: List[Matrix] = Field(..., min_length=1)


class InitConfig(_Strict):
    x0: Optional[List[float]] = None
    sigma0: Matrix


class SweepConfig(_Strict):
    L_list: List[int] = Field(..., min_length=1)
    horizon: int = Field(1, ge=1)
    fusion_steps: Optional[int] = Field(None, ge=1)
    include_surrogate: bool = True
    analyses: List[AnalysisName] = Field(..., min_length=1)

    @field_validator("L_list")
    @classmethod
    def _positive_fusion_steps(cls, value: List[int]) -> List[int]:
        if any(L < 1 for L in value):
            raise ValueError("L_list must contain fusion steps >= 1 (0 is not allowed)")
        return sorted(set(value))


class ReferenceConfig(_Strict):
    """Published per-sensor traces to compare a one-step sweep against."""

    fusion_steps: int = Field(..., ge=1)
    sigma: Optional[List[float]] = None
    sigma_t: Optional[List[float]] = None
    sigma_f: Optional[List[float]] = None
    tolerance: float = Field(5e-5, gt=0.0)


class Scenario(_Strict):
    name: str
    description: str = ""
    seed: int = Field(0, ge=0)
    topology: TopologyConfig
    model: ModelConfig
    noise: NoiseConfig
    init: InitConfig
    sweep: SweepConfig
    monte_carlo: Optional[McConfig] = None
    reference: Optional[ReferenceConfig] = None
    output_dir: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self) -> "Scenario":
        N = self.topology.n_sensors
        for key, items in (("model.H", self.model.H), ("noise.R", self.noise.R), ("noise.Ru", self.noise.Ru)):
            if len(items) != N:
                raise ValueError(f"{key} has {len(items)} entries for {N} sensors")
        if "monte_carlo" in self.sweep.analyses and self.monte_carlo is None:
            raise ValueError("analysis 'monte_carlo' needs a 'monte_carlo' section")
        if self.reference is not None:
            for key in ("sigma", "sigma_t", "sigma_f"):
                values = getattr(self.reference, key)
                if values is not None and len(values) != N:
                    raise ValueError(f"reference.{key} has {len(values)} entries for {N} sensors")
        return self


# ── Domain objects ───────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class ScenarioSetup:
    """A validated scenario turned into model, noise and network objects."""

    scenario: Scenario
    path: Optional[str]
    sha256: str
    model: SystemModel
    noise: NoiseSpec
    topology: Topology
    consensus: ConsensusMatrix
    x0: np.ndarray
    sigma0: np.ndarray

    @property
    def name(self) -> str:
        return self.scenario.name

    @property
    def L_list(self) -> List[int]:
        return list(self.scenario.sweep.L_list)

    @property
    def horizon(self) -> int:
        return self.scenario.sweep.horizon

    @property
    def fusion_steps(self) -> int:
        """Fusion step used by the analyses that run along k."""
        return self.scenario.sweep.fusion_steps or self.L_list[-1]

    @property
    def analyses(self) -> List[str]:
        return list(self.scenario.sweep.analyses)

    def mc_problem(self, fusion_steps: Optional[int] = None) -> McProblem:
        return McProblem(self.model, self.noise, self.consensus, fusion_steps or self.fusion_steps,
                         self.x0, self.sigma0)


def _matrix(value: Matrix, name: str) -> np.ndarray:
    if isinstance(value, (int, float)):
        return np.array([[float(value)]])
    rows = np.asarray(value, dtype=float)
    if rows.ndim != 2 or rows.size == 0:
        raise ValueError(f"{name} must be a number or a non-empty list of equal-length rows")
    return rows


def _locate(text: Optional[str], loc: Sequence) -> Optional[int]:
    """1-based line of the deepest key of ``loc`` found in order in ``text``."""
    if not text:
        return None
    pos, found = 0, None
    for part in loc:
        if not isinstance(part, str):
            continue
        match = re.compile(r'"%s"\s*:' % re.escape(part)).search(text, pos)
        if match is None:
            break
        pos = found = match.start()
    return None if found is None else text.count("\n", 0, found) + 1


class _Builder:
    def __init__(self, path: Optional[str], text: Optional[str]):
        self.path = path
        self.text = text

    def fail(self, message: str, loc: Sequence) -> ScenarioError:
        where = ".".join(str(p) for p in loc)
        return ScenarioError(f"{where}: {message}" if where else message, self.path, _locate(self.text, loc))

    def build(self, scenario: Scenario, sha256: str) -> ScenarioSetup:
        s = scenario
        try:
            F = _matrix(s.model.F, "F")
            H = tuple(_matrix(h, f"H[{i}]") for i, h in enumerate(s.model.H))
            model = SystemModel(F, H)
        except (LabError, ValueError) as e:
            raise self.fail(str(e), ("model",)) from e

        try:
            noise = NoiseSpec(
                Q=as_symmetric(_matrix(s.noise.Q, "Q"), "Q"),
                Qu=as_symmetric(_matrix(s.noise.Qu, "Qu"), "Qu"),
                R=tuple(as_symmetric(_matrix(r, f"R[{i}]"), f"R[{i}]") for i, r in enumerate(s.noise.R)),
                Ru=tuple(as_symmetric(_matrix(r, f"Ru[{i}]"), f"Ru[{i}]") for i, r in enumerate(s.noise.Ru)),
            )
            check_compatible(model, noise)
        except (LabError, ValueError) as e:
            raise self.fail(str(e), ("noise",)) from e

        try:
            topology = Topology.from_labels(s.topology.n_sensors, s.topology.edges)
            if s.topology.weights is not None:
                consensus = ConsensusMatrix(np.asarray(s.topology.weights, dtype=float))
                adjacency = topology.adjacency() + np.eye(topology.n_sensors)
                if np.any((consensus.weights > 0) & (adjacency == 0)):
                    raise ValueError("weights put mass on a pair that is not an edge")
            else:
                consensus = metropolis_weights(topology, s.topology.include_self)
            if consensus.n != model.n_sensors:
                raise ValueError(f"consensus matrix is {consensus.n}×{consensus.n} for {model.n_sensors} sensors")
        except (LabError, ValueError) as e:
            raise self.fail(str(e), ("topology",)) from e

        try:
            sigma0 = require_positive_definite(as_symmetric(_matrix(s.init.sigma0, "sigma0"), "sigma0"),
                                               "sigma0", "scenario", "load_scenario")
            if sigma0.shape != (model.n, model.n):
                raise ValueError(f"sigma0 is {sigma0.shape}, state dimension is {model.n}")
            x0 = np.zeros(model.n) if s.init.x0 is None else np.asarray(s.init.x0, dtype=float)
            if x0.shape != (model.n,):
                raise ValueError(f"x0 has {x0.size} entries, state dimension is {model.n}")
        except (LabError, ValueError) as e:
            raise self.fail(str(e), ("init",)) from e

        return ScenarioSetup(s, self.path, sha256, model, noise, topology, consensus, x0, sigma0)


def parse_scenario(text: str, path: Optional[str] = None, sha256: Optional[str] = None) -> ScenarioSetup:
    """Validate scenario JSON text and build its domain objects."""
    builder = _Builder(path, text)
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as e:
        raise ScenarioError(f"invalid JSON: {e.msg}", path, e.lineno) from e
    try:
        scenario = Scenario.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        raise builder.fail(first["msg"], first["loc"]) from e
    if sha256 is None:
        sha256 = hashlib.sha256(text.encode("utf-8")).hexdigest()
    return builder.build(scenario, sha256)


def load_scenario(path: Union[str, Path]) -> ScenarioSetup:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ScenarioError(f"cannot read scenario: {e.strerror}", str(path)) from e
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as e:
        raise ScenarioError("scenario is not UTF-8 text", str(path)) from e
    return parse_scenario(text, str(path), hashlib.sha256(data).hexdigest())
