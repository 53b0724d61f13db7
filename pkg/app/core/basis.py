"""
Nodal P1/Q1 basis functions and layer correctors.

A corrector is an asymptotic layer profile (exponential for boundary layers,
erf for a turning-point layer) minus the linear interpolant of its endpoint
values, so every function in an enriched space satisfies the homogeneous
Dirichlet condition exactly. In 2D the space is the tensor product of two
axis families [corrector, hat_1, ..., hat_{n-1}].
"""
import csv
import logging
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import special

from app.core.exceptions import BasisError
from app.core.geometry import Mesh1D, Mesh2D, build_tensor_mesh_2d, build_uniform_mesh_1d
from app.schemas import LayerSide, ProblemClass, ProblemSpec

logger = logging.getLogger(__name__)

_TWO_OVER_SQRT_PI = 2.0 / math.sqrt(math.pi)


# --- corrector kinds --------------------------------------------------------

@dataclass(frozen=True)
class BoundaryExp:
    """Boundary layer profile exp(-rate * distance to ``side``)."""
    side: LayerSide
    rate: float

    def __post_init__(self):
        if self.side not in (LayerSide.LEFT, LayerSide.RIGHT):
            raise BasisError(f"BoundaryExp needs a left or right side, got {self.side}")
        if not self.rate > 0:
            raise BasisError(f"rate must be positive, got {self.rate}")


@dataclass(frozen=True)
class InteriorErf:
    """Turning-point profile erf(scale * (x - center))."""
    center: float
    scale: float

    def __post_init__(self):
        if not self.scale > 0:
            raise BasisError(f"scale must be positive, got {self.scale}")


@dataclass(frozen=True)
class TensorExp2D:
    """Pair of axis profiles; ``corner`` selects their product over the raw factors."""
    x: BoundaryExp
    y: BoundaryExp
    corner: bool = True


CorrectorKind = Union[BoundaryExp, InteriorErf, TensorExp2D]


# --- axis functions ---------------------------------------------------------

class AxisFunction(ABC):
    """Scalar function of one coordinate with an analytic derivative."""

    @abstractmethod
    def __call__(self, x: np.ndarray) -> np.ndarray:
        ...

    @abstractmethod
    def derivative(self, x: np.ndarray) -> np.ndarray:
        ...


class BlendedCorrector(AxisFunction):
    """
    Corrector c(x) = raw(x) - L(x) on [a, b], L the linear interpolant of raw at a and b.

    The raw profile is written in the local coordinate t = sigma * (x - anchor) >= 0:
    exp(-rate * t) with the anchor at the layer boundary, or erf(scale * t) with the
    anchor at the turning point. ``l0 + l1 * x`` is the blend as a polynomial in x.
    """

    def __init__(self, kind: Union[BoundaryExp, InteriorErf], domain: Tuple[float, float]):
        a, b = float(domain[0]), float(domain[1])
        if not a < b:
            raise BasisError(f"Invalid domain {domain}")
        self.kind = kind
        self.domain = (a, b)
        if isinstance(kind, BoundaryExp):
            self.profile = "exp"
            self.rate = float(kind.rate)
            self.anchor, self.sigma = (a, 1.0) if kind.side == LayerSide.LEFT else (b, -1.0)
        elif isinstance(kind, InteriorErf):
            self.profile = "erf"
            self.rate = float(kind.scale)
            self.anchor, self.sigma = float(kind.center), 1.0
        else:
            raise BasisError(f"Unsupported 1D corrector kind {kind!r}")
        self.raw_a = float(self.raw(np.array(a)))
        self.raw_b = float(self.raw(np.array(b)))
        self.l1 = (self.raw_b - self.raw_a) / (b - a)
        self.l0 = self.raw_a - self.l1 * a

    def local(self, x: np.ndarray) -> np.ndarray:
        t = self.sigma * (np.asarray(x, dtype=np.float64) - self.anchor)
        if self.profile == "exp":
            # rounding can push t a hair below zero at the anchor
            t = np.maximum(t, 0.0)
        return t

    def raw(self, x: np.ndarray) -> np.ndarray:
        t = self.local(x)
        if self.profile == "exp":
            return np.exp(-self.rate * t)
        return special.erf(self.rate * t)

    def raw_derivative(self, x: np.ndarray) -> np.ndarray:
        t = self.local(x)
        if self.profile == "exp":
            return -self.rate * self.sigma * np.exp(-self.rate * t)
        return _TWO_OVER_SQRT_PI * self.rate * np.exp(-(self.rate * t) ** 2)

    def blend(self, x: np.ndarray) -> np.ndarray:
        a, b = self.domain
        x = np.asarray(x, dtype=np.float64)
        return self.raw_a * ((b - x) / (b - a)) + self.raw_b * ((x - a) / (b - a))

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.raw(x) - self.blend(x)

    def derivative(self, x: np.ndarray) -> np.ndarray:
        return self.raw_derivative(x) - self.l1

    @property
    def layer_width(self) -> float:
        return 1.0 / self.rate

    def __repr__(self) -> str:
        return f"BlendedCorrector({self.kind!r}, domain={self.domain})"


class Hat1D(AxisFunction):
    """P1 hat of node ``j`` on ``nodes``; derivative taken from the left element at nodes."""

    def __init__(self, nodes: np.ndarray, j: int):
        if not 0 < j < len(nodes) - 1:
            raise BasisError(f"Hat index {j} is not an interior node")
        self.nodes = np.asarray(nodes, dtype=np.float64)
        self.j = j

    def _parts(self, x: np.ndarray):
        x = np.asarray(x, dtype=np.float64)
        e = _locate(self.nodes, x)
        xl, xr = self.nodes[e], self.nodes[e + 1]
        h = xr - xl
        rising = e == self.j - 1
        falling = e == self.j
        return x, xl, xr, h, rising, falling

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x, xl, xr, h, rising, falling = self._parts(x)
        return np.where(rising, (x - xl) / h, np.where(falling, (xr - x) / h, 0.0))

    def derivative(self, x: np.ndarray) -> np.ndarray:
        _, _, _, h, rising, falling = self._parts(x)
        return np.where(rising, 1.0 / h, np.where(falling, -1.0 / h, 0.0))


def _locate(nodes: np.ndarray, x: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(nodes, x, side="left") - 1
    return np.clip(idx, 0, nodes.size - 2)


class TensorCorrector:
    """2D function fx(x) * fy(y) built from two axis functions."""

    def __init__(self, x_factor: AxisFunction, y_factor: AxisFunction):
        self.x_factor = x_factor
        self.y_factor = y_factor

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        return self.x_factor(x) * self.y_factor(y)

    def gradient(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        fx, fy = self.x_factor(x), self.y_factor(y)
        return self.x_factor.derivative(x) * fy, fx * self.y_factor.derivative(y)

    def __repr__(self) -> str:
        return f"TensorCorrector({self.x_factor!r}, {self.y_factor!r})"


Corrector = Union[BlendedCorrector, TensorCorrector]


def make_corrector(kind: CorrectorKind, eps: float, domain: Tuple[float, float]):
    """
    Blend a corrector profile so it vanishes on the boundary of ``domain``.

    For :class:`TensorExp2D` the same interval is used on both axes; with
    ``corner=True`` the result is the product e_x(x) * e_y(y), otherwise the pair
    (e_x, e_y) of blended axis factors.
    """
    if eps <= 0:
        raise BasisError(f"eps must be positive, got {eps}")
    if isinstance(kind, TensorExp2D):
        ex = BlendedCorrector(kind.x, domain)
        ey = BlendedCorrector(kind.y, domain)
        if kind.corner:
            return TensorCorrector(ex, ey)
        return ex, ey
    return BlendedCorrector(kind, domain)


def corrector_eval(corrector: Corrector, p) -> Tuple[np.ndarray, np.ndarray]:
    """Value and gradient of ``corrector`` at ``p`` (scalar/array in 1D, (x, y) in 2D)."""
    if isinstance(corrector, TensorCorrector):
        x, y = (np.asarray(c, dtype=np.float64) for c in p)
        gx, gy = corrector.gradient(x, y)
        return corrector(x, y), np.stack([gx, gy], axis=-1)
    x = np.asarray(p, dtype=np.float64)
    return corrector(x), corrector.derivative(x)[..., None]


# --- spaces -----------------------------------------------------------------

@dataclass(frozen=True)
class AxisSpace:
    """
    One axis family: optional corrector at family index 0, then hats of interior nodes.

    Family index of node j is j (with corrector) or j - 1 (without); boundary nodes have -1.
    """
    nodes: np.ndarray
    corrector: Optional[BlendedCorrector] = None

    @property
    def offset(self) -> int:
        return 1 if self.corrector is not None else 0

    @property
    def size(self) -> int:
        return self.nodes.size - 2 + self.offset

    def node_family(self) -> np.ndarray:
        fam = np.arange(self.nodes.size) - 1 + self.offset
        fam[0] = fam[-1] = -1
        return fam

    def function(self, index: int) -> AxisFunction:
        if not 0 <= index < self.size:
            raise BasisError(f"Family index {index} out of range [0, {self.size})")
        if self.corrector is not None and index == 0:
            return self.corrector
        return Hat1D(self.nodes, index + 1 - self.offset)

    def layer(self, fallback_width: float) -> Tuple[List[float], float]:
        """Layer points and width used to grade quadrature partitions on this axis."""
        if self.corrector is None:
            return [], fallback_width
        return [self.corrector.anchor], self.corrector.layer_width

    def values(self, x: np.ndarray, derivative: bool = False) -> np.ndarray:
        """Dense (size, len(x)) matrix of family values or derivatives at ``x``."""
        x = np.asarray(x, dtype=np.float64).ravel()
        out = np.zeros((self.size, x.size))
        if self.corrector is not None:
            out[0] = self.corrector.derivative(x) if derivative else self.corrector(x)
        e = _locate(self.nodes, x)
        xl, xr = self.nodes[e], self.nodes[e + 1]
        h = xr - xl
        cols = np.arange(x.size)
        fam = self.node_family()
        left_val = -1.0 / h if derivative else (xr - x) / h
        right_val = 1.0 / h if derivative else (x - xl) / h
        for node, val in ((e, left_val), (e + 1, right_val)):
            rows = fam[node]
            keep = rows >= 0
            out[rows[keep], cols[keep]] = val[keep]
        return out


@dataclass(frozen=True)
class EnrichedSpace:
    """
    Galerkin trial/test space V = span{correctors..., nodal functions...}.

    Basis index k runs over correctors first, then nodal functions in interior
    node order (x-major in 2D). In 2D ``order[k]`` is the position of basis
    function k in the Kronecker ordering ax * axes[1].size + ay of the axis families.
    """
    problem: ProblemSpec
    mesh: Union[Mesh1D, Mesh2D]
    axes: Tuple[AxisSpace, ...]
    correctors: Tuple[Corrector, ...]
    order: np.ndarray = field(repr=False)

    @property
    def dimension(self) -> int:
        return len(self.axes)

    @property
    def corrector_count(self) -> int:
        return len(self.correctors)

    @property
    def nodal_count(self) -> int:
        return int(np.prod([ax.nodes.size - 2 for ax in self.axes]))

    @property
    def total_dim(self) -> int:
        return self.nodal_count + self.corrector_count

    @property
    def enriched(self) -> bool:
        return self.corrector_count > 0

    @property
    def bounds(self) -> List[Tuple[float, float]]:
        return [(float(ax.nodes[0]), float(ax.nodes[-1])) for ax in self.axes]

    def check_points(self, points: np.ndarray) -> np.ndarray:
        """Validate points of shape (P,) in 1D or (P, 2) in 2D."""
        pts = np.asarray(points, dtype=np.float64)
        if self.dimension == 1:
            pts = pts.reshape(-1)
            coords = [pts]
        else:
            pts = pts.reshape(-1, 2)
            coords = [pts[:, 0], pts[:, 1]]
        for c, (lo, hi) in zip(coords, self.bounds):
            if np.any(c < lo) or np.any(c > hi) or not np.all(np.isfinite(c)):
                raise BasisError(f"Point outside the closed domain [{lo}, {hi}]")
        return pts

    def basis_function(self, k: int) -> Union[AxisFunction, TensorCorrector]:
        """Basis function ``k`` as a callable (1D) or a tensor product (2D)."""
        if not 0 <= k < self.total_dim:
            raise BasisError(f"Basis index {k} out of range [0, {self.total_dim})")
        if self.dimension == 1:
            return self.axes[0].function(int(self.order[k]))
        ax, ay = divmod(int(self.order[k]), self.axes[1].size)
        return TensorCorrector(self.axes[0].function(ax), self.axes[1].function(ay))

    def coefficient_grid(self, coeffs: np.ndarray) -> np.ndarray:
        """Scatter basis coefficients into the (axes[0].size, axes[1].size) Kronecker grid."""
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape[-1] != self.total_dim:
            raise BasisError(f"Expected {self.total_dim} coefficients, got {coeffs.shape[-1]}")
        grid = np.zeros(coeffs.shape[:-1] + (self.axes[0].size * self.axes[1].size,))
        grid[..., self.order] = coeffs
        return grid.reshape(coeffs.shape[:-1] + (self.axes[0].size, self.axes[1].size))

    def basis_values(self, points: np.ndarray, derivative: Optional[int] = None) -> np.ndarray:
        """
        Values of every basis function at ``points``, shape (total_dim, P).

        ``derivative`` selects the partial derivative along that axis.
        """
        pts = self.check_points(points)
        if self.dimension == 1:
            fam = self.axes[0].values(pts, derivative=derivative == 0)
            return fam
        vx = self.axes[0].values(pts[:, 0], derivative=derivative == 0)
        vy = self.axes[1].values(pts[:, 1], derivative=derivative == 1)
        full = (vx[:, None, :] * vy[None, :, :]).reshape(-1, pts.shape[0])
        return full[self.order]

    def evaluate(self, coeffs: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Linear combination sum_k coeffs[k] phi_k(points); ``coeffs`` may be batched."""
        pts = self.check_points(points)
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape[-1] != self.total_dim:
            raise BasisError(f"Expected {self.total_dim} coefficients, got {coeffs.shape[-1]}")
        if self.dimension == 1:
            return coeffs @ self.axes[0].values(pts)
        vx = self.axes[0].values(pts[:, 0])
        vy = self.axes[1].values(pts[:, 1])
        grid = self.coefficient_grid(coeffs)
        return np.einsum("ap,...ab,bp->...p", vx, grid, vy)

    def evaluate_grid(self, coeffs: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """2D evaluation on the tensor grid x by y, shape (..., len(x), len(y))."""
        if self.dimension != 2:
            raise BasisError("evaluate_grid needs a 2D space")
        vx = self.axes[0].values(self.check_axis(x, 0))
        vy = self.axes[1].values(self.check_axis(y, 1))
        return np.einsum("ap,...ab,bq->...pq", vx, self.coefficient_grid(coeffs), vy)

    def evaluate_gradient(self, coeffs: np.ndarray, points: np.ndarray) -> np.ndarray:
        """Gradient of the linear combination, shape (..., P, dimension)."""
        grads = [coeffs @ self.basis_values(points, derivative=axis) for axis in range(self.dimension)]
        return np.stack(grads, axis=-1)

    def check_axis(self, values: np.ndarray, axis: int) -> np.ndarray:
        lo, hi = self.bounds[axis]
        values = np.asarray(values, dtype=np.float64).ravel()
        if np.any(values < lo) or np.any(values > hi):
            raise BasisError(f"Coordinate outside [{lo}, {hi}] on axis {axis}")
        return values


def nodal_eval(space: EnrichedSpace, k: int, p) -> Tuple[float, np.ndarray]:
    """
    Value and gradient of nodal function ``k`` at ``p``.

    ``k`` counts interior nodes from 0 (x-major in 2D); gradients at element
    interfaces come from the element to the left (and below).
    """
    if not 0 <= k < space.nodal_count:
        raise BasisError(f"Nodal index {k} out of range [0, {space.nodal_count})")
    pts = space.check_points(np.atleast_1d(np.asarray(p, dtype=np.float64)))
    if space.dimension == 1:
        hat = Hat1D(space.axes[0].nodes, k + 1)
        x = pts[:1]
        return float(hat(x)[0]), np.array([float(hat.derivative(x)[0])])
    ny = space.axes[1].nodes.size - 2
    i, j = divmod(k, ny)
    hx = Hat1D(space.axes[0].nodes, i + 1)
    hy = Hat1D(space.axes[1].nodes, j + 1)
    x, y = pts[:1, 0], pts[:1, 1]
    vx, vy = float(hx(x)[0]), float(hy(y)[0])
    dx, dy = float(hx.derivative(x)[0]), float(hy.derivative(y)[0])
    return vx * vy, np.array([dx * vy, vx * dy])


def corrector_kinds(problem: ProblemSpec) -> CorrectorKind:
    """Layer profile matched to the convection field of ``problem``."""
    eps = problem.epsilon
    a, b = problem.domain
    if problem.problem_class == ProblemClass.BOUNDARY_1D:
        # the layer sits at the outflow end, where b points
        b_left, b_right = problem.convection_at(a), problem.convection_at(b)
        if b_left < 0 and b_right < 0:
            return BoundaryExp(LayerSide.LEFT, abs(b_left) / eps)
        if b_left > 0 and b_right > 0:
            return BoundaryExp(LayerSide.RIGHT, abs(b_right) / eps)
        raise BasisError("Boundary layer problems need a convection of fixed sign")
    if problem.problem_class == ProblemClass.INTERIOR_1D:
        b0, b1 = problem.convection_poly()
        if b1 == 0:
            raise BasisError("Turning point needs a non-constant convection")
        center = -b0 / b1
        return InteriorErf(center, math.sqrt(abs(b1) / (2.0 * eps)))
    if problem.problem_class == ProblemClass.SQUARE_2D:
        sides = []
        for axis in range(2):
            bc = problem.convection_at(0.0, axis)
            side = LayerSide.LEFT if bc < 0 else LayerSide.RIGHT
            sides.append(BoundaryExp(side, abs(bc) / eps))
        return TensorExp2D(sides[0], sides[1], corner=False)
    raise BasisError(f"Unknown problem class {problem.problem_class}")


def build_enriched_space(
    problem: ProblemSpec, mesh: Union[Mesh1D, Mesh2D], enrich: bool = True
) -> EnrichedSpace:
    """
    Attach the layer correctors of ``problem`` to the nodal space of ``mesh``.

    1D problems gain one corrector. The 2D problem gains e_x(x) psi_j(y) for every
    interior y-node j, psi_i(x) e_y(y) for every interior x-node i and the corner
    e_x(x) e_y(y). With ``enrich=False`` the plain P1/Q1 space is returned.
    """
    if problem.dimension == 1:
        if not isinstance(mesh, Mesh1D):
            raise BasisError("1D problems need a Mesh1D")
        if mesh.bounds != tuple(problem.domain):
            raise BasisError(f"Mesh spans {mesh.bounds}, problem domain is {problem.domain}")
        corrector = make_corrector(corrector_kinds(problem), problem.epsilon, problem.domain) if enrich else None
        axis = AxisSpace(mesh.nodes, corrector)
        correctors = (corrector,) if corrector is not None else ()
        space = EnrichedSpace(problem, mesh, (axis,), correctors, np.arange(axis.size))
    else:
        if not isinstance(mesh, Mesh2D):
            raise BasisError("2D problems need a Mesh2D")
        for nodes in (mesh.x_nodes, mesh.y_nodes):
            if (nodes[0], nodes[-1]) != tuple(problem.domain):
                raise BasisError(f"Mesh axis spans {(nodes[0], nodes[-1])}, problem domain is {problem.domain}")
        if enrich:
            ex, ey = make_corrector(corrector_kinds(problem), problem.epsilon, problem.domain)
        else:
            ex = ey = None
        ax, ay = AxisSpace(mesh.x_nodes, ex), AxisSpace(mesh.y_nodes, ey)
        nfy = ay.size
        off_x, off_y = ax.offset, ay.offset
        nodal = [
            (i - 1 + off_x) * nfy + (j - 1 + off_y)
            for i in range(1, mesh.x_nodes.size - 1)
            for j in range(1, mesh.y_nodes.size - 1)
        ]
        correctors: List[TensorCorrector] = []
        head: List[int] = []
        if enrich:
            for j in range(1, mesh.y_nodes.size - 1):
                correctors.append(TensorCorrector(ex, Hat1D(mesh.y_nodes, j)))
                head.append(0 * nfy + j)
            for i in range(1, mesh.x_nodes.size - 1):
                correctors.append(TensorCorrector(Hat1D(mesh.x_nodes, i), ey))
                head.append(i * nfy + 0)
            correctors.append(TensorCorrector(ex, ey))
            head.append(0)
        order = np.array(head + nodal, dtype=np.int64)
        space = EnrichedSpace(problem, mesh, (ax, ay), tuple(correctors), order)
    logger.debug(
        f"Space for {problem.name or problem.problem_class.value}: "
        f"{space.nodal_count} nodal + {space.corrector_count} correctors"
    )
    return space


def uniform_space(problem: ProblemSpec, n: int, enrich: bool = True) -> EnrichedSpace:
    """Space on the uniform mesh with ``n`` elements (per axis in 2D)."""
    a, b = problem.domain
    if problem.dimension == 1:
        mesh = build_uniform_mesh_1d(a, b, n)
    else:
        mesh = build_tensor_mesh_2d(n, n, domain=(a, b))
    return build_enriched_space(problem, mesh, enrich=enrich)


def dump_basis_csv(
    space: EnrichedSpace,
    path: str,
    resolution: int,
    indices: Optional[Sequence[int]] = None,
) -> None:
    """Write basis values on a uniform grid: columns x[, y], phi_k for k in ``indices``."""
    if resolution < 2:
        raise BasisError(f"resolution must be >= 2, got {resolution}")
    axes = [np.linspace(lo, hi, resolution) for lo, hi in space.bounds]
    if space.dimension == 1:
        points = axes[0]
        coords = [points]
    else:
        xx, yy = np.meshgrid(axes[0], axes[1], indexing="ij")
        points = np.stack([xx.ravel(), yy.ravel()], axis=1)
        coords = [points[:, 0], points[:, 1]]
    ks = list(range(space.total_dim)) if indices is None else list(indices)
    values = space.basis_values(points)[ks]
    names = ["x", "y"][: space.dimension] + [f"phi_{k}" for k in ks]
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(names)
        for p in range(values.shape[1]):
            writer.writerow([repr(float(c[p])) for c in coords] + [repr(float(v)) for v in values[:, p]])
