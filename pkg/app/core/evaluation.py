"""
Error metrics and experiment runners.

Every runner draws its test forcings from the "test" stream of the sampling
seed, so test sets never overlap training batches drawn from the same seed.
"""
import csv
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from app.core.assembly import assemble_loads, assemble_matrix
from app.core.basis import EnrichedSpace, corrector_kinds, uniform_space
from app.core.geometry import build_shishkin_mesh_1d
from app.core.operator_net import (
    OperatorNetwork,
    network_inputs,
    input_dimension,
    predict,
    residual_loss,
    train,
    to_tensor,
)
from app.core.quadrature import composite_rule, graded_breakpoints
from app.core.sampling import sample_forcings
from app.core.solvers import (
    FactorizedSystem,
    GridFunction,
    ReferenceCache,
    Solution,
    cached_reference,
    shishkin_spec,
)
from app.schemas import (
    ErrorReport,
    ForcingParams,
    GridKind,
    InputKind,
    NetworkConfig,
    ProblemSpec,
    SamplingSpec,
    SolverMode,
    TrainConfig,
)

logger = logging.getLogger(__name__)

DEFAULT_RESOLUTION = {1: 201, 2: 51}
LAYER_GRID_N = {1: 400, 2: 50}
REPORT_COLUMNS = [
    "problem", "epsilon", "mode", "mesh_n", "M", "grid",
    "rel_l2_mean", "rel_l2_std", "n_test", "seconds",
]


def relative_l2(pred: np.ndarray, ref: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    """sqrt(sum w (pred - ref)^2) / sqrt(sum w ref^2)."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValueError(f"Shape mismatch: prediction {pred.shape}, reference {ref.shape}")
    w = np.ones_like(ref) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != ref.shape:
        raise ValueError(f"Weights have shape {w.shape}, values {ref.shape}")
    norm = float(np.sum(w * ref ** 2))
    if norm <= 0.0:
        raise ValueError("Reference has zero norm")
    return float(np.sqrt(np.sum(w * (pred - ref) ** 2) / norm))


def trapezoid_weights(nodes: np.ndarray) -> np.ndarray:
    """Trapezoidal weights for possibly non-uniform increasing nodes."""
    nodes = np.asarray(nodes, dtype=np.float64)
    h = np.diff(nodes)
    w = np.zeros_like(nodes)
    w[:-1] += 0.5 * h
    w[1:] += 0.5 * h
    return w


@dataclass(frozen=True)
class EvaluationGrid:
    """Points with trapezoidal weights; 2D points are x-major over axes[0] x axes[1]."""
    kind: GridKind
    axes: Tuple[np.ndarray, ...]
    points: np.ndarray
    weights: np.ndarray


def _tensor_grid(kind: GridKind, axes: Sequence[np.ndarray]) -> EvaluationGrid:
    if len(axes) == 1:
        return EvaluationGrid(kind, (axes[0],), axes[0], trapezoid_weights(axes[0]))
    xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
    points = np.stack([xx.ravel(), yy.ravel()], axis=1)
    weights = np.outer(trapezoid_weights(axes[0]), trapezoid_weights(axes[1])).ravel()
    return EvaluationGrid(kind, tuple(axes), points, weights)


def uniform_grid(problem: ProblemSpec, resolution: Optional[int] = None) -> EvaluationGrid:
    resolution = resolution or DEFAULT_RESOLUTION[problem.dimension]
    axis = np.linspace(problem.domain[0], problem.domain[1], resolution)
    return _tensor_grid(GridKind.UNIFORM, [axis] * problem.dimension)


def layer_grid(problem: ProblemSpec, n: Optional[int] = None, sigma: float = 2.0) -> EvaluationGrid:
    """Shishkin-graded points: 401 in 1D, 51 x 51 in 2D by default."""
    n = n or LAYER_GRID_N[problem.dimension]
    a, b = problem.domain
    spec = shishkin_spec(problem, n, sigma)
    if problem.dimension == 1:
        return _tensor_grid(GridKind.LAYER, [build_shishkin_mesh_1d(a, b, spec, problem.epsilon).nodes])
    axes = []
    kind = corrector_kinds(problem)
    for side in (kind.x.side, kind.y.side):
        axis_spec = spec.model_copy(update={"layer_sides": [side]})
        axes.append(build_shishkin_mesh_1d(a, b, axis_spec, problem.epsilon).nodes)
    return _tensor_grid(GridKind.LAYER, axes)


def evaluation_grid(problem: ProblemSpec, kind: GridKind, resolution: Optional[int] = None) -> EvaluationGrid:
    if kind == GridKind.UNIFORM:
        return uniform_grid(problem, resolution)
    return layer_grid(problem)


# --- H1 error ----------------------------------------------------------------

Derivative = Union[Solution, GridFunction]


def _derivative(u: Derivative, x: np.ndarray) -> np.ndarray:
    if isinstance(u, Solution):
        return u.gradient(x)[..., 0]
    return u.derivative(x)


def _breakpoints(u: Derivative) -> np.ndarray:
    if isinstance(u, Solution):
        return u.space.axes[0].nodes
    return u.axes[0]


def h1_error(u: Derivative, ref: Derivative, order: int = 10) -> float:
    """
    |u - ref|_{H^1} in 1D.

    Gauss points on the merged element breakpoints of both functions, graded
    towards every corrector layer, so kinks and layers are integrated exactly
    up to the rule's order.
    """
    spaces = [v.space for v in (u, ref) if isinstance(v, Solution)]
    if any(s.dimension != 1 for s in spaces) or (isinstance(ref, GridFunction) and ref.dimension != 1):
        raise ValueError("h1_error supports 1D functions only")
    domain = (float(_breakpoints(u)[0]), float(_breakpoints(u)[-1]))
    layer_points: List[float] = []
    width = domain[1] - domain[0]
    for s in spaces:
        points, w = s.axes[0].layer(fallback_width=width)
        layer_points += points
        width = min(width, w)
    extra = np.union1d(_breakpoints(u), _breakpoints(ref))
    nodes, weights = composite_rule(graded_breakpoints(domain, layer_points, width, extra), order)
    diff = _derivative(u, nodes) - _derivative(ref, nodes)
    return float(np.sqrt(np.sum(weights * diff ** 2)))


# --- coefficient providers ----------------------------------------------------

class CoefficientModel:
    """Coefficients of one solver mode for batches of forcings."""

    def __init__(
        self,
        problem: ProblemSpec,
        mode: SolverMode,
        mesh_n: int,
        network: Optional[OperatorNetwork] = None,
        resolution: Optional[int] = None,
        input_kind: InputKind = InputKind.FORCING,
    ):
        if mode == SolverMode.TRAINED and network is None:
            raise ValueError("trained mode needs a network")
        self.problem = problem
        self.mode = mode
        self.mesh_n = mesh_n
        self.space = uniform_space(problem, mesh_n, enrich=mode != SolverMode.PLAIN)
        self.network = network
        self.resolution = resolution or DEFAULT_RESOLUTION[problem.dimension]
        self.input_kind = input_kind
        self._system: Optional[FactorizedSystem] = None
        if network is not None:
            expected = input_dimension(self.space, self.resolution, input_kind)
            if network.config.input_dim != expected or network.config.output_dim != self.space.total_dim:
                raise ValueError(
                    f"Network maps {network.config.input_dim} -> {network.config.output_dim}, "
                    f"space needs {expected} -> {self.space.total_dim}"
                )

    @property
    def system(self) -> FactorizedSystem:
        if self._system is None:
            self._system = FactorizedSystem(assemble_matrix(self.problem, self.space))
        return self._system

    def coefficients(self, forcings: Sequence[ForcingParams]) -> np.ndarray:
        F = assemble_loads(self.problem, self.space, forcings)
        if self.mode != SolverMode.TRAINED:
            return self.system.solve(F)
        inputs = network_inputs(self.problem, forcings, self.resolution, self.input_kind, F)
        return predict(self.network, inputs)


# --- experiments --------------------------------------------------------------

@dataclass
class ExperimentSpec:
    """One problem at one epsilon, evaluated for every requested mode and grid."""
    problem: ProblemSpec
    mesh_n: int = 100
    modes: List[SolverMode] = field(default_factory=lambda: [SolverMode.ORACLE])
    grids: List[GridKind] = field(default_factory=lambda: [GridKind.UNIFORM, GridKind.LAYER])
    n_test: int = 100
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    resolution: Optional[int] = None
    n_ref: Optional[int] = None
    sigma: float = 2.0
    network: Optional[OperatorNetwork] = None
    input_kind: InputKind = InputKind.FORCING
    samples: int = 0
    cache: Optional[ReferenceCache] = None
    with_timing: bool = False


def held_out_forcings(spec: ExperimentSpec) -> List[ForcingParams]:
    return sample_forcings(spec.sampling, spec.problem.problem_class, "test", count=spec.n_test)


def run_experiment(spec: ExperimentSpec) -> List[ErrorReport]:
    """Relative L2 error against Shishkin references, one report per (mode, grid)."""
    problem = spec.problem
    forcings = held_out_forcings(spec)
    logger.info(
        f"Experiment {problem.name} eps={problem.epsilon:g}: {len(forcings)} test forcings, "
        f"modes {[m.value for m in spec.modes]}"
    )
    references = [cached_reference(problem, f, spec.n_ref, spec.sigma, spec.cache) for f in forcings]
    grids = [evaluation_grid(problem, kind, spec.resolution) for kind in spec.grids]
    ref_values = [np.stack([ref(g.points) for ref in references]) for g in grids]

    reports = []
    for mode in spec.modes:
        started = time.perf_counter()
        model = CoefficientModel(
            problem, mode, spec.mesh_n, spec.network if mode == SolverMode.TRAINED else None,
            spec.resolution, spec.input_kind,
        )
        coeffs = model.coefficients(forcings)
        seconds = time.perf_counter() - started
        for grid, refs in zip(grids, ref_values):
            preds = model.space.evaluate(coeffs, grid.points)
            errors = np.array([relative_l2(p, r, grid.weights) for p, r in zip(preds, refs)])
            reports.append(
                ErrorReport(
                    problem=problem.name or problem.problem_class.value,
                    epsilon=problem.epsilon,
                    mode=mode,
                    mesh_n=spec.mesh_n,
                    samples=spec.samples if mode == SolverMode.TRAINED else 0,
                    grid=grid.kind,
                    rel_l2_mean=float(errors.mean()),
                    rel_l2_std=float(errors.std()),
                    n_test=len(forcings),
                    seconds=seconds if spec.with_timing else 0.0,
                )
            )
            logger.info(
                f"  {mode.value:8s} {grid.kind.value:8s} rel L2 {errors.mean():.3e} +- {errors.std():.1e}"
            )
    return reports


def sweep(
    problem_name: str,
    epsilons: Sequence[float],
    base: ExperimentSpec,
) -> List[ErrorReport]:
    """run_experiment for every epsilon; the network, when given, is reused as is."""
    reports: List[ErrorReport] = []
    for eps in epsilons:
        spec = replace(base, problem=ProblemSpec.preset(problem_name, eps))
        reports.extend(run_experiment(spec))
    return reports


def write_reports_csv(path: str, reports: Sequence[ErrorReport]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(REPORT_COLUMNS)
        for r in reports:
            writer.writerow([
                r.problem, repr(r.epsilon), r.mode.value, r.mesh_n, r.samples, r.grid.value,
                repr(r.rel_l2_mean), repr(r.rel_l2_std), r.n_test, repr(r.seconds),
            ])


def plot_data(
    spec: ExperimentSpec, f: ForcingParams, mode: SolverMode
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Points, prediction of ``mode`` and reference for one forcing on the uniform grid."""
    model = CoefficientModel(
        spec.problem, mode, spec.mesh_n, spec.network if mode == SolverMode.TRAINED else None,
        spec.resolution, spec.input_kind,
    )
    grid = uniform_grid(spec.problem, spec.resolution)
    pred = model.space.evaluate(model.coefficients([f])[0], grid.points)
    ref = cached_reference(spec.problem, f, spec.n_ref, spec.sigma, spec.cache)(grid.points)
    return grid.points, pred, ref


def write_plot_csv(path: str, points: np.ndarray, pred: np.ndarray, ref: np.ndarray) -> None:
    """Columns x[, y], u_pred, u_ref."""
    points = np.asarray(points, dtype=np.float64)
    coords = [points] if points.ndim == 1 else [points[:, 0], points[:, 1]]
    names = ["x", "y"][: len(coords)] + ["u_pred", "u_ref"]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(names)
        for row in zip(*coords, pred, ref):
            writer.writerow([repr(float(v)) for v in row])


# --- capacity ladder ------------------------------------------------------------

@dataclass(frozen=True)
class LadderRung:
    width: int
    samples: int
    oracle_error: float
    reference_error: Optional[float]
    final_loss: float


def convergence_study(
    problem: ProblemSpec,
    ladder: Sequence[Tuple[int, int]] = ((8, 16), (32, 64), (128, 256)),
    mesh_n: int = 100,
    train_config: Optional[TrainConfig] = None,
    sampling: Optional[SamplingSpec] = None,
    n_test: int = 20,
    resolution: Optional[int] = None,
    with_reference: bool = False,
) -> List[LadderRung]:
    """
    Train one network per (width, M) rung and measure its distance to the oracle.

    Width 0 means a single linear layer. Held-out forcings come from the test
    stream; training batches are frozen draws so every rung is reproducible.
    """
    sizes = [w * m for w, m in ladder]
    if sizes != sorted(sizes):
        raise ValueError(f"Ladder must be sorted by capacity, got {list(ladder)}")
    train_config = train_config or TrainConfig(mode="fixed")
    sampling = sampling or SamplingSpec()
    resolution = resolution or DEFAULT_RESOLUTION[problem.dimension]
    space = uniform_space(problem, mesh_n)
    A = assemble_matrix(problem, space)
    system = FactorizedSystem(A)
    grid = uniform_grid(problem, resolution)

    test = sample_forcings(sampling, problem.problem_class, "test", count=n_test)
    F_test = assemble_loads(problem, space, test)
    oracle = space.evaluate(system.solve(F_test), grid.points)
    references = None
    if with_reference:
        references = np.stack([cached_reference(problem, f)(grid.points) for f in test])

    rungs = []
    for width, samples in ladder:
        config = train_config.model_copy(update={"samples": samples})
        net_config = NetworkConfig(
            input_dim=input_dimension(space, resolution, config.input_kind),
            output_dim=space.total_dim,
            widths=[width, width] if width > 0 else [],
        )
        logger.info(f"Ladder rung width={width} M={samples}")
        net, history = train(problem, space, net_config, config, sampling, resolution, A)
        inputs = network_inputs(problem, test, resolution, config.input_kind, F_test)
        preds = space.evaluate(predict(net, inputs), grid.points)
        oracle_error = float(np.mean([relative_l2(p, o, grid.weights) for p, o in zip(preds, oracle)]))
        reference_error = None
        if references is not None:
            reference_error = float(np.mean([relative_l2(p, r, grid.weights) for p, r in zip(preds, references)]))
        rungs.append(LadderRung(width, samples, oracle_error, reference_error, history.records[-1].loss))
    return rungs


def write_ladder_csv(path: str, rungs: Sequence[LadderRung]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["width", "M", "rel_l2_to_oracle", "rel_l2_to_reference", "final_loss"])
        for r in rungs:
            ref = "" if r.reference_error is None else repr(r.reference_error)
            writer.writerow([r.width, r.samples, repr(r.oracle_error), ref, repr(r.final_loss)])


# --- under-resolved mesh study ----------------------------------------------------

@dataclass(frozen=True)
class MeshRung:
    n: int
    h: float
    h1_error: float


def h_study(
    problem: ProblemSpec,
    ns: Sequence[int] = (32, 64, 128),
    n_fine: int = 4096,
    forcings: Optional[Sequence[ForcingParams]] = None,
    sampling: Optional[SamplingSpec] = None,
    n_test: int = 5,
) -> List[MeshRung]:
    """
    Mean H1 error of the enriched oracle per mesh size.

    Errors are measured against the enriched oracle on ``n_fine`` elements.
    """
    if problem.dimension != 1:
        raise ValueError("h_study supports 1D problems only")
    forcings = list(forcings) if forcings is not None else sample_forcings(
        sampling or SamplingSpec(), problem.problem_class, "test", count=n_test
    )
    fine = uniform_space(problem, n_fine)
    fine_coeffs = FactorizedSystem(assemble_matrix(problem, fine)).solve(assemble_loads(problem, fine, forcings))
    references = [Solution(c, fine) for c in fine_coeffs]
    rungs = []
    for n in ns:
        space = uniform_space(problem, n)
        coeffs = FactorizedSystem(assemble_matrix(problem, space)).solve(assemble_loads(problem, space, forcings))
        errors = [h1_error(Solution(c, space), ref) for c, ref in zip(coeffs, references)]
        h = (problem.domain[1] - problem.domain[0]) / n
        rungs.append(MeshRung(n, h, float(np.mean(errors))))
        logger.info(f"h = {h:.4g}: H1 error {rungs[-1].h1_error:.3e}")
    return rungs


def halving_ratios(rungs: Sequence[MeshRung]) -> List[float]:
    return [a.h1_error / b.h1_error for a, b in zip(rungs[:-1], rungs[1:])]


# --- Monte-Carlo consistency ----------------------------------------------------

@dataclass(frozen=True)
class MonteCarloCheck:
    small_mean: float
    small_stderr: float
    large: float

    @property
    def consistent(self) -> bool:
        return abs(self.small_mean - self.large) <= 4.0 * self.small_stderr


def monte_carlo_check(
    problem: ProblemSpec,
    space: EnrichedSpace,
    net: OperatorNetwork,
    A: np.ndarray,
    sampling: Optional[SamplingSpec] = None,
    resolution: Optional[int] = None,
    input_kind: InputKind = InputKind.FORCING,
    small: int = 8,
    repeats: int = 100,
    large: int = 4096,
) -> MonteCarloCheck:
    """Compare ``repeats`` loss estimates on ``small`` samples with one estimate on ``large``."""
    sampling = sampling or SamplingSpec()
    resolution = resolution or DEFAULT_RESOLUTION[problem.dimension]
    A_t = to_tensor(A)

    def estimate(count: int, start: int) -> float:
        forcings = sample_forcings(sampling, problem.problem_class, "montecarlo", count=count, start=start)
        F = assemble_loads(problem, space, forcings)
        inputs = network_inputs(problem, forcings, resolution, input_kind, F)
        return float(residual_loss(net, A_t, to_tensor(inputs), to_tensor(F)).detach())

    estimates = np.array([estimate(small, i * small) for i in range(repeats)])
    reference = estimate(large, repeats * small)
    return MonteCarloCheck(
        float(estimates.mean()),
        float(estimates.std(ddof=1) / np.sqrt(repeats)),
        reference,
    )


def summarize(reports: Sequence[ErrorReport]) -> Dict[str, float]:
    return {f"{r.mode.value}/{r.grid.value}": r.rel_l2_mean for r in reports}


def write_mesh_study_csv(path: str, rungs: Sequence[MeshRung]) -> None:
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["n", "h", "h1_error"])
        for r in rungs:
            writer.writerow([r.n, repr(r.h), repr(r.h1_error)])
