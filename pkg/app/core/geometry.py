"""Uniform, Shishkin and tensor-product meshes."""
import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import MeshError
from app.schemas import LayerSide, ShishkinSpec

logger = logging.getLogger(__name__)


def _check_increasing(nodes: np.ndarray, name: str = "nodes") -> None:
    if nodes.ndim != 1 or nodes.size < 2:
        raise MeshError(f"{name} must be a 1D array with at least two entries")
    if not np.all(np.isfinite(nodes)):
        raise MeshError(f"{name} contain non-finite values")
    if np.any(np.diff(nodes) <= 0):
        raise MeshError(f"{name} must be strictly increasing")


@dataclass(frozen=True)
class Mesh1D:
    """Interval mesh a = x_0 < x_1 < ... < x_n = b."""
    nodes: np.ndarray

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=np.float64)
        _check_increasing(nodes)
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)

    @property
    def element_count(self) -> int:
        return self.nodes.size - 1

    @property
    def boundary_indices(self) -> Tuple[int, int]:
        return 0, self.nodes.size - 1

    @property
    def bounds(self) -> Tuple[float, float]:
        return float(self.nodes[0]), float(self.nodes[-1])

    @property
    def widths(self) -> np.ndarray:
        return np.diff(self.nodes)

    @property
    def h(self) -> float:
        return float(self.widths.max())

    @property
    def interior_nodes(self) -> np.ndarray:
        return self.nodes[1:-1]

    def locate(self, x: np.ndarray) -> np.ndarray:
        """Element index of each point; a shared node belongs to its left element."""
        idx = np.searchsorted(self.nodes, x, side="left") - 1
        return np.clip(idx, 0, self.element_count - 1)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["x"])
            for x in self.nodes:
                writer.writerow([repr(float(x))])


@dataclass(frozen=True)
class Mesh2D:
    """Tensor-product mesh of axis-aligned Q1 cells with homogeneous Dirichlet boundary."""
    x_nodes: np.ndarray
    y_nodes: np.ndarray
    interior_node_index: Dict[Tuple[int, int], int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("x_nodes", "y_nodes"):
            nodes = np.asarray(getattr(self, name), dtype=np.float64)
            _check_increasing(nodes, name)
            nodes.setflags(write=False)
            object.__setattr__(self, name, nodes)
        nx, ny = self.x_nodes.size - 1, self.y_nodes.size - 1
        index = {
            (i, j): (i - 1) * (ny - 1) + (j - 1)
            for i in range(1, nx)
            for j in range(1, ny)
        }
        object.__setattr__(self, "interior_node_index", index)

    @property
    def x_mesh(self) -> Mesh1D:
        return Mesh1D(self.x_nodes)

    @property
    def y_mesh(self) -> Mesh1D:
        return Mesh1D(self.y_nodes)

    @property
    def shape(self) -> Tuple[int, int]:
        """Element counts (nx, ny)."""
        return self.x_nodes.size - 1, self.y_nodes.size - 1

    @property
    def interior_count(self) -> int:
        nx, ny = self.shape
        return (nx - 1) * (ny - 1)

    @property
    def cells(self) -> np.ndarray:
        """Cells as rows [x_i, x_{i+1}, y_j, y_{j+1}], x-major."""
        x0, y0 = np.meshgrid(self.x_nodes[:-1], self.y_nodes[:-1], indexing="ij")
        x1, y1 = np.meshgrid(self.x_nodes[1:], self.y_nodes[1:], indexing="ij")
        return np.stack([x0.ravel(), x1.ravel(), y0.ravel(), y1.ravel()], axis=1)

    def to_csv(self, path: str) -> None:
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["axis", "coordinate"])
            for axis, nodes in (("x", self.x_nodes), ("y", self.y_nodes)):
                for value in nodes:
                    writer.writerow([axis, repr(float(value))])


def build_uniform_mesh_1d(a: float, b: float, n: int) -> Mesh1D:
    """Uniform mesh of ``n`` elements on [a, b]."""
    if not a < b:
        raise MeshError(f"Invalid interval [{a}, {b}]")
    if n < 2:
        raise MeshError(f"Need at least 2 elements, got {n}")
    nodes = np.linspace(a, b, n + 1)
    nodes[0], nodes[-1] = a, b
    return Mesh1D(nodes)


def _pieces(breaks: Sequence[float], counts: Sequence[int]) -> np.ndarray:
    parts = []
    for k, count in enumerate(counts):
        piece = np.linspace(breaks[k], breaks[k + 1], count + 1)
        parts.append(piece if k == 0 else piece[1:])
    return np.concatenate(parts)


def shishkin_transition(
    length: float, spec: ShishkinSpec, eps: float
) -> Tuple[float, float]:
    """Transition width and its clamp for ``spec``; returns (tau, cap)."""
    log_n = math.log(spec.n)
    if LayerSide.INTERIOR in spec.layer_sides:
        cap = length / 4.0
        tau = spec.sigma * math.sqrt(eps / spec.beta) * log_n
    elif len(spec.layer_sides) == 2:
        cap = length / 4.0
        tau = spec.sigma * eps / spec.beta * log_n
    else:
        cap = length / 2.0
        tau = spec.sigma * eps / spec.beta * log_n
    return min(cap, tau), cap


def build_shishkin_mesh_1d(a: float, b: float, spec: ShishkinSpec, eps: float) -> Mesh1D:
    """
    Piecewise-uniform layer-adapted mesh.

    One boundary layer: n/2 elements on the layer band of width tau and n/2 on the rest.
    Two boundary layers or an interior layer: n/4 per band side and n/2 elsewhere.
    With tau clamped (eps too large) the mesh degenerates to a uniform one.
    """
    if eps <= 0:
        raise MeshError(f"eps must be positive, got {eps}")
    if not a < b:
        raise MeshError(f"Invalid interval [{a}, {b}]")
    length = b - a
    tau, cap = shishkin_transition(length, spec, eps)
    if tau >= cap:
        logger.warning(
            f"Shishkin transition clamped to {cap:.3g} (eps={eps:.3g}); mesh is uniform"
        )
    n = spec.n
    sides = spec.layer_sides

    if LayerSide.INTERIOR in sides:
        c = spec.interior_center
        if c - tau <= a or c + tau >= b:
            raise MeshError(f"Interior layer band [{c - tau}, {c + tau}] leaves the domain")
        nodes = _pieces([a, c - tau, c + tau, b], [n // 4, n // 2, n // 4])
    elif len(sides) == 2:
        nodes = _pieces([a, a + tau, b - tau, b], [n // 4, n // 2, n // 4])
    elif sides[0] == LayerSide.RIGHT:
        nodes = _pieces([a, b - tau, b], [n // 2, n // 2])
    else:
        nodes = _pieces([a, a + tau, b], [n // 2, n // 2])
    nodes[0], nodes[-1] = a, b
    return Mesh1D(nodes)


def build_tensor_mesh_2d(
    nx: int,
    ny: int,
    x_nodes: Optional[np.ndarray] = None,
    y_nodes: Optional[np.ndarray] = None,
    domain: Tuple[float, float] = (0.0, 1.0),
) -> Mesh2D:
    """Tensor mesh with ``nx`` x ``ny`` cells; coordinates default to uniform."""
    if nx < 2 or ny < 2:
        raise MeshError(f"Need at least 2 cells per axis, got ({nx}, {ny})")
    lo, hi = domain
    axes = []
    for count, nodes, name in ((nx, x_nodes, "x_nodes"), (ny, y_nodes, "y_nodes")):
        if nodes is None:
            nodes = build_uniform_mesh_1d(lo, hi, count).nodes
        else:
            nodes = np.asarray(nodes, dtype=np.float64)
            _check_increasing(nodes, name)
            if nodes.size != count + 1:
                raise MeshError(f"{name} has {nodes.size} entries, expected {count + 1}")
            if nodes[0] != lo or nodes[-1] != hi:
                raise MeshError(f"{name} must span [{lo}, {hi}]")
        axes.append(nodes)
    return Mesh2D(axes[0], axes[1])
