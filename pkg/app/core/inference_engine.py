"""Operator engine: one problem, its enriched space, a factorized system and an optional network."""
import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np

from app.core.assembly import assemble_loads, assemble_matrix
from app.core.basis import EnrichedSpace, uniform_space
from app.core.evaluation import DEFAULT_RESOLUTION
from app.core.operator_net import OperatorNetwork, input_dimension, load_checkpoint, network_inputs, predict
from app.core.sampling import input_grid
from app.core.solvers import FactorizedSystem, GridFunction, ReferenceCache, cached_reference
from app.schemas import ForcingParams, InputKind, ProblemClass, ProblemSpec

logger = logging.getLogger(__name__)


class OperatorEngine:
    """Serves oracle solves, plain solves, references and network predictions for one problem."""

    def __init__(
        self,
        problem: ProblemSpec,
        mesh_n: int,
        checkpoint_path: Optional[str] = None,
        input_kind: InputKind = InputKind.FORCING,
        resolution: Optional[int] = None,
        reference_n: Optional[int] = None,
        shishkin_sigma: float = 2.0,
        reference_cache_dir: Optional[str] = None,
        condition_warning: float = 1e14,
    ):
        """
        Initialize the engine.

        Args:
            problem: Problem served by the engine
            mesh_n: Uniform element count (per axis in 2D)
            checkpoint_path: Network checkpoint to load, if any
            input_kind: Network input encoding
            resolution: Network input resolution per axis
            reference_n: Shishkin reference resolution
            shishkin_sigma: Shishkin mesh constant
            reference_cache_dir: Directory caching reference solutions
            condition_warning: Condition number above which solves log a warning
        """
        self.problem = problem
        self.mesh_n = mesh_n
        self.input_kind = input_kind
        self.resolution = resolution or DEFAULT_RESOLUTION[problem.dimension]
        self.reference_n = reference_n
        self.shishkin_sigma = shishkin_sigma
        self.condition_warning = condition_warning
        self.cache = ReferenceCache(reference_cache_dir) if reference_cache_dir else None
        self.network: Optional[OperatorNetwork] = None
        self._spaces: Dict[bool, EnrichedSpace] = {}
        self._systems: Dict[bool, FactorizedSystem] = {}

        logger.info(f"Initializing operator engine: {problem.name} eps={problem.epsilon:g} n={mesh_n}")
        try:
            self.space = self.get_space(enrich=True)
            self.system(enrich=True)
            if checkpoint_path:
                self.load_network(checkpoint_path)
            logger.info(f"Engine ready with {self.space.total_dim} unknowns")
        except Exception as e:
            logger.error(f"Failed to initialize operator engine: {e}")
            raise

    def get_space(self, enrich: bool = True) -> EnrichedSpace:
        if enrich not in self._spaces:
            self._spaces[enrich] = uniform_space(self.problem, self.mesh_n, enrich=enrich)
        return self._spaces[enrich]

    def system(self, enrich: bool = True) -> FactorizedSystem:
        """LU factors of A, computed once per space."""
        if enrich not in self._systems:
            space = self.get_space(enrich)
            self._systems[enrich] = FactorizedSystem(
                assemble_matrix(self.problem, space), condition_warning=self.condition_warning
            )
        return self._systems[enrich]

    def load_network(self, path: str) -> None:
        if not os.path.exists(path):
            raise FileNotFoundError(f"Checkpoint not found: {path}")
        net = load_checkpoint(path)
        expected_in = input_dimension(self.space, self.resolution, self.input_kind)
        if net.config.output_dim != self.space.total_dim or net.config.input_dim != expected_in:
            raise ValueError(
                f"Checkpoint maps {net.config.input_dim} -> {net.config.output_dim}, "
                f"engine needs {expected_in} -> {self.space.total_dim}"
            )
        self.network = net
        logger.info(f"Loaded network from {path} ({net.parameter_count()} parameters)")

    def output_points(self, resolution: Optional[int] = None) -> np.ndarray:
        resolution = resolution or DEFAULT_RESOLUTION[self.problem.dimension]
        return input_grid(self.problem.domain, resolution, self.problem.dimension)

    def solve(self, forcings: Sequence[ForcingParams], enrich: bool = True) -> np.ndarray:
        """Galerkin coefficients, shape (M, total_dim)."""
        space = self.get_space(enrich)
        return self.system(enrich).solve(assemble_loads(self.problem, space, forcings))

    def predict(self, forcings: Sequence[ForcingParams]) -> np.ndarray:
        """One-shot network coefficients, shape (M, total_dim)."""
        if self.network is None:
            raise RuntimeError("No network checkpoint loaded")
        loads = None
        if self.input_kind == InputKind.LOAD:
            loads = assemble_loads(self.problem, self.space, forcings)
        inputs = network_inputs(self.problem, forcings, self.resolution, self.input_kind, loads)
        return predict(self.network, inputs)

    def reference(self, f: ForcingParams, n_ref: Optional[int] = None) -> GridFunction:
        return cached_reference(self.problem, f, n_ref or self.reference_n, self.shishkin_sigma, self.cache)

    def evaluate(self, coeffs: np.ndarray, points: np.ndarray, enrich: bool = True) -> np.ndarray:
        return self.get_space(enrich).evaluate(coeffs, points)

    def describe(self) -> Dict[str, object]:
        return {
            "problem": self.problem.name,
            "epsilon": self.problem.epsilon,
            "mesh_n": self.mesh_n,
            "total_dim": self.space.total_dim,
            "correctors": self.space.corrector_count,
            "condition": float(self.system(True).condition),
            "network": self.network is not None,
        }

    def prepare_forcings(self, forcings: Sequence[ForcingParams]) -> List[ForcingParams]:
        """Check dimensions; interior-layer forcings always carry the factor x."""
        interior = self.problem.problem_class == ProblemClass.INTERIOR_1D
        prepared = []
        for f in forcings:
            if f.dimension != self.problem.dimension:
                raise ValueError(f"{f.dimension}D forcing for a {self.problem.dimension}D problem")
            if interior and not f.compat_factor:
                f = f.model_copy(update={"compat_factor": True})
            prepared.append(f)
        return prepared

    def is_ready(self) -> bool:
        """Whether a network is loaded for predictions."""
        return self.network is not None
