"""Direct solves of the Galerkin system, Shishkin references and solution evaluation."""
import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.interpolate import RegularGridInterpolator
from scipy.linalg import lapack
from scipy.sparse.linalg import spsolve

from app.core.assembly import assemble_loads, assemble_matrix, assemble_sparse_matrix
from app.core.basis import EnrichedSpace, build_enriched_space, corrector_kinds
from app.core.exceptions import BasisError, NonFiniteError, SingularMatrixError
from app.core.geometry import build_shishkin_mesh_1d, build_tensor_mesh_2d
from app.schemas import ForcingParams, LayerSide, ProblemClass, ProblemSpec, ShishkinSpec

logger = logging.getLogger(__name__)

RESIDUAL_TOL = 1e-10
CONDITION_WARNING = 1e14
MIN_REFERENCE_N = {1: 256, 2: 128}
DEFAULT_REFERENCE_N = {1: 8192, 2: 256}


class FactorizedSystem:
    """
    LU factorization of A with partial pivoting, reused across load vectors.

    Every solve is checked against ||A x - F||_inf <= tol * (1 + ||F||_inf) and
    refined once when it misses.
    """

    def __init__(self, A: np.ndarray, condition_warning: float = CONDITION_WARNING):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"Expected a square matrix, got shape {A.shape}")
        if not np.all(np.isfinite(A)):
            raise NonFiniteError("Matrix has non-finite entries")
        self.A = A
        self.lu, self.piv = linalg.lu_factor(A, check_finite=False)
        pivots = np.abs(np.diag(self.lu))
        scale = np.abs(A).max() if A.size else 0.0
        small = np.flatnonzero(pivots <= np.finfo(np.float64).eps * A.shape[0] * scale)
        if small.size or scale == 0.0:
            raise SingularMatrixError(int(small[0]) if small.size else 0)
        anorm = np.linalg.norm(A, 1)
        rcond, _ = lapack.dgecon(self.lu, anorm, norm="1")
        self.condition = 1.0 / rcond if rcond > 0 else np.inf
        if self.condition > condition_warning:
            logger.warning(f"Matrix is ill-conditioned: estimated condition number {self.condition:.3e}")

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def solve(self, F: np.ndarray, tol: float = RESIDUAL_TOL) -> np.ndarray:
        """Solve A x = F for one load vector (n,) or a batch (M, n)."""
        F = np.asarray(F, dtype=np.float64)
        if F.shape[-1] != self.size:
            raise ValueError(f"Load vector has length {F.shape[-1]}, matrix has size {self.size}")
        rhs = F.T
        x = linalg.lu_solve((self.lu, self.piv), rhs, check_finite=False)
        bound = tol * (1.0 + np.abs(rhs).max(axis=0))
        residual = rhs - self.A @ x
        if np.any(np.abs(residual).max(axis=0) > bound):
            x = x + linalg.lu_solve((self.lu, self.piv), residual, check_finite=False)
            residual = rhs - self.A @ x
            worst = float(np.abs(residual).max())
            if np.any(np.abs(residual).max(axis=0) > bound):
                logger.warning(f"Residual {worst:.3e} above tolerance after refinement")
        if not np.all(np.isfinite(x)):
            raise NonFiniteError("Solution has non-finite entries")
        return x.T


def solve_direct(A: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Coefficients alpha with A alpha = F."""
    return FactorizedSystem(A).solve(F)


@dataclass(frozen=True)
class Solution:
    """Coefficients of a Galerkin function; correctors come first, then nodal values."""
    coefficients: np.ndarray
    space: EnrichedSpace

    def __post_init__(self):
        coeffs = np.asarray(self.coefficients, dtype=np.float64)
        if coeffs.shape != (self.space.total_dim,):
            raise ValueError(f"Expected {self.space.total_dim} coefficients, got shape {coeffs.shape}")
        if not np.all(np.isfinite(coeffs)):
            raise NonFiniteError("Solution coefficients are not finite")
        object.__setattr__(self, "coefficients", coeffs)

    def __call__(self, points: np.ndarray) -> np.ndarray:
        return self.space.evaluate(self.coefficients, points)

    def gradient(self, points: np.ndarray) -> np.ndarray:
        return self.space.evaluate_gradient(self.coefficients, points)


def evaluate_solution(sol: Solution, points: np.ndarray) -> np.ndarray:
    return sol(points)


def fem_oracle(
    problem: ProblemSpec,
    space: EnrichedSpace,
    f: ForcingParams,
    system: Optional[FactorizedSystem] = None,
) -> Solution:
    """Galerkin solution in ``space``; pass ``system`` to reuse a factorization of A."""
    system = system or FactorizedSystem(assemble_matrix(problem, space))
    F = assemble_loads(problem, space, [f])[0]
    return Solution(system.solve(F), space)


def fem_oracle_batch(
    problem: ProblemSpec,
    space: EnrichedSpace,
    forcings: Sequence[ForcingParams],
    system: Optional[FactorizedSystem] = None,
) -> np.ndarray:
    """Oracle coefficients for many forcings, shape (M, total_dim)."""
    system = system or FactorizedSystem(assemble_matrix(problem, space))
    return system.solve(assemble_loads(problem, space, forcings))


# --- reference solutions -----------------------------------------------------

@dataclass(frozen=True)
class GridFunction:
    """Nodal values on a 1D mesh or a tensor grid; values[i, j] sits at (x_i, y_j)."""
    axes: Tuple[np.ndarray, ...]
    values: np.ndarray

    def __post_init__(self):
        shape = tuple(a.size for a in self.axes)
        if self.values.shape != shape:
            raise ValueError(f"values have shape {self.values.shape}, grid is {shape}")

    @property
    def dimension(self) -> int:
        return len(self.axes)

    def _check(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        pts = pts.reshape(-1) if self.dimension == 1 else pts.reshape(-1, 2)
        coords = [pts] if self.dimension == 1 else [pts[:, 0], pts[:, 1]]
        for c, axis in zip(coords, self.axes):
            if np.any(c < axis[0]) or np.any(c > axis[-1]):
                raise BasisError(f"Point outside the grid [{axis[0]}, {axis[-1]}]")
        return pts

    def __call__(self, points: np.ndarray) -> np.ndarray:
        """Piecewise linear (1D) or bilinear (2D) interpolation."""
        pts = self._check(points)
        if self.dimension == 1:
            return np.interp(pts, self.axes[0], self.values)
        return RegularGridInterpolator(self.axes, self.values, method="linear")(pts)

    def derivative(self, x: np.ndarray) -> np.ndarray:
        """Slope of the interpolant; nodes take the slope of their left element (1D only)."""
        if self.dimension != 1:
            raise ValueError("derivative is only defined for 1D grid functions")
        x = self._check(x)
        nodes = self.axes[0]
        e = np.clip(np.searchsorted(nodes, x, side="left") - 1, 0, nodes.size - 2)
        return (self.values[e + 1] - self.values[e]) / (nodes[e + 1] - nodes[e])

    def save(self, path: str) -> None:
        arrays = {f"axis_{i}": a for i, a in enumerate(self.axes)}
        np.savez(path, values=self.values, **arrays)

    @classmethod
    def load(cls, path: str) -> "GridFunction":
        with np.load(path) as data:
            axes = tuple(data[f"axis_{i}"] for i in range(data["values"].ndim))
            return cls(axes, data["values"])


def shishkin_spec(problem: ProblemSpec, n: int, sigma: float = 2.0) -> ShishkinSpec:
    """Layer placement of ``problem`` on each axis of its Shishkin mesh."""
    kind = corrector_kinds(problem)
    if problem.problem_class == ProblemClass.INTERIOR_1D:
        return ShishkinSpec(
            n=n, sigma=sigma, beta=abs(problem.convection_poly()[1]),
            layer_sides=[LayerSide.INTERIOR], interior_center=kind.center,
        )
    side = kind.x.side if problem.problem_class == ProblemClass.SQUARE_2D else kind.side
    return ShishkinSpec(n=n, sigma=sigma, beta=1.0, layer_sides=[side])


def shishkin_reference(
    problem: ProblemSpec,
    f: ForcingParams,
    n_ref: Optional[int] = None,
    sigma: float = 2.0,
) -> GridFunction:
    """
    Plain P1/Q1 Galerkin solution on a Shishkin mesh, returned as nodal values.

    Defaults to 8192 elements in 1D and 256 per axis in 2D.
    """
    dim = problem.dimension
    n_ref = DEFAULT_REFERENCE_N[dim] if n_ref is None else n_ref
    if n_ref < MIN_REFERENCE_N[dim]:
        raise ValueError(f"n_ref must be at least {MIN_REFERENCE_N[dim]} in {dim}D, got {n_ref}")
    a, b = problem.domain
    if dim == 1:
        mesh = build_shishkin_mesh_1d(a, b, shishkin_spec(problem, n_ref, sigma), problem.epsilon)
    else:
        kind = corrector_kinds(problem)
        x_nodes, y_nodes = (
            build_shishkin_mesh_1d(a, b, ShishkinSpec(n=n_ref, sigma=sigma, layer_sides=[side]), problem.epsilon)
            for side in (kind.x.side, kind.y.side)
        )
        mesh = build_tensor_mesh_2d(n_ref, n_ref, x_nodes.nodes, y_nodes.nodes, domain=(a, b))
    space = build_enriched_space(problem, mesh, enrich=False)
    logger.info(f"Reference solve: {space.total_dim} unknowns on a Shishkin mesh (eps={problem.epsilon:g})")
    A = assemble_sparse_matrix(problem, space)
    F = assemble_loads(problem, space, [f])[0]
    interior = np.atleast_1d(spsolve(A.tocsc(), F))
    if not np.all(np.isfinite(interior)):
        raise NonFiniteError("Reference solution is not finite")
    if dim == 1:
        values = np.concatenate([[0.0], interior, [0.0]])
        return GridFunction((mesh.nodes,), values)
    nx, ny = mesh.shape
    values = np.zeros((nx + 1, ny + 1))
    values[1:-1, 1:-1] = interior.reshape(nx - 1, ny - 1)
    return GridFunction((mesh.x_nodes, mesh.y_nodes), values)


class ReferenceCache:
    """On-disk cache of reference solutions keyed by problem, eps, n_ref and forcing."""

    def __init__(self, directory: str):
        self.directory = directory
        os.makedirs(directory, exist_ok=True)

    @staticmethod
    def key(problem: ProblemSpec, f: ForcingParams, n_ref: int, sigma: float) -> str:
        payload = json.dumps(
            {
                "problem": problem.model_dump(mode="json"),
                "n_ref": n_ref,
                "sigma": sigma,
                "forcing": f.model_dump(mode="json"),
            },
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def path(self, key: str) -> str:
        return os.path.join(self.directory, f"{key}.npz")

    def get(self, key: str) -> Optional[GridFunction]:
        path = self.path(key)
        if not os.path.exists(path):
            return None
        return GridFunction.load(path)

    def put(self, key: str, ref: GridFunction) -> None:
        ref.save(self.path(key))


def cached_reference(
    problem: ProblemSpec,
    f: ForcingParams,
    n_ref: Optional[int] = None,
    sigma: float = 2.0,
    cache: Optional[ReferenceCache] = None,
) -> GridFunction:
    n_ref = DEFAULT_REFERENCE_N[problem.dimension] if n_ref is None else n_ref
    if cache is None:
        return shishkin_reference(problem, f, n_ref, sigma)
    key = ReferenceCache.key(problem, f, n_ref, sigma)
    ref = cache.get(key)
    if ref is None:
        ref = shishkin_reference(problem, f, n_ref, sigma)
        cache.put(key, ref)
    else:
        logger.debug(f"Reference cache hit {key[:12]}")
    return ref


def write_solution_csv(
    path: str, values: np.ndarray, points: np.ndarray, extra: Optional[dict] = None
) -> None:
    """Columns x[, y], u and any ``extra`` named columns of the same length."""
    points = np.asarray(points, dtype=np.float64)
    coords = [points] if points.ndim == 1 else [points[:, 0], points[:, 1]]
    names = ["x", "y"][: len(coords)] + ["u"] + list((extra or {}).keys())
    columns = coords + [np.asarray(values)] + [np.asarray(v) for v in (extra or {}).values()]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(names)
        for row in zip(*columns):
            writer.writerow([repr(float(v)) for v in row])

