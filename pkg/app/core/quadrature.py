"""Gauss-Legendre rules and layer-graded adaptive quadrature."""
import logging
import math
from functools import lru_cache
from typing import Callable, Iterable, Optional, Sequence, Tuple

import numpy as np

from app.core.exceptions import NonFiniteError, QuadratureError

logger = logging.getLogger(__name__)

Interval = Tuple[float, float]


@lru_cache(maxsize=None)
def gauss_legendre(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the ``order``-point rule on [-1, 1]."""
    x, w = np.polynomial.legendre.leggauss(order)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def composite_rule(
    breakpoints: np.ndarray, order: int = 10, flat: bool = True
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Composite Gauss-Legendre rule on consecutive breakpoints.

    Args:
        breakpoints: Increasing subinterval ends
        order: Points per subinterval
        flat: Return 1D arrays instead of (subintervals, order)

    Returns:
        Nodes and weights
    """
    x, w = gauss_legendre(order)
    bp = np.asarray(breakpoints, dtype=np.float64)
    half = 0.5 * (bp[1:] - bp[:-1])
    mid = 0.5 * (bp[1:] + bp[:-1])
    nodes = mid[:, None] + half[:, None] * x[None, :]
    weights = half[:, None] * w[None, :]
    if flat:
        return nodes.ravel(), weights.ravel()
    return nodes, weights


def graded_breakpoints(
    interval: Interval,
    layer_points: Iterable[float],
    width: float,
    extra: Optional[Sequence[float]] = None,
) -> np.ndarray:
    """Breakpoints p +- width * {0, 1, 2, 4, 8, ...} clipped to ``interval``."""
    a, b = interval
    length = b - a
    points = [np.array([a, b], dtype=np.float64)]
    if width > 0:
        levels = max(int(math.ceil(math.log2(max(length / width, 1.0)))) + 1, 1)
        offsets = width * np.concatenate([[0.0], 2.0 ** np.arange(levels)])
        for p in layer_points:
            points.append(p + offsets)
            points.append(p - offsets)
    if extra is not None:
        points.append(np.asarray(extra, dtype=np.float64))
    merged = np.concatenate(points)
    merged = merged[(merged >= a) & (merged <= b)]
    return np.unique(merged)


def _bisect(breakpoints: np.ndarray) -> np.ndarray:
    mids = 0.5 * (breakpoints[1:] + breakpoints[:-1])
    out = np.empty(breakpoints.size + mids.size)
    out[0::2] = breakpoints
    out[1::2] = mids
    return out


def _apply(fn: Callable[[np.ndarray], np.ndarray], nodes: np.ndarray, weights: np.ndarray):
    values = np.asarray(fn(nodes))
    if not np.all(np.isfinite(values)):
        raise NonFiniteError("Non-finite integrand value")
    return values @ weights


def _converged(new, old, tol: float) -> bool:
    return bool(np.all(np.abs(new - old) <= tol * np.maximum(1.0, np.abs(new))))


def layer_quadrature(
    fn: Callable[[np.ndarray], np.ndarray],
    interval: Interval,
    eps: float,
    tol: float = 1e-12,
    layer_points: Optional[Iterable[float]] = None,
    breakpoints: Optional[Sequence[float]] = None,
    order: int = 10,
    max_refinements: int = 12,
):
    """
    Integrate ``fn`` over ``interval`` resolving layers of width ``eps``.

    The partition is graded towards every layer point (both interval ends by default),
    merged with ``breakpoints`` (e.g. mesh nodes where the integrand has kinks), and
    bisected until two successive estimates agree to ``tol`` (relative to max(1, |I|)).
    ``fn`` may be vector-valued: it maps points of shape (n,) to values of shape (..., n).

    Raises:
        QuadratureError: no convergence after ``max_refinements`` bisections
    """
    if tol <= 0:
        raise ValueError(f"tol must be positive, got {tol}")
    if layer_points is None:
        layer_points = interval
    bp = graded_breakpoints(interval, layer_points, eps, breakpoints)
    estimate = _apply(fn, *composite_rule(bp, order))
    for _ in range(max_refinements):
        bp = _bisect(bp)
        refined = _apply(fn, *composite_rule(bp, order))
        if _converged(refined, estimate, tol):
            return refined
        estimate = refined
    raise QuadratureError(
        f"layer_quadrature did not converge to {tol:g} after {max_refinements} refinements"
    )


def layer_quadrature_2d(
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
    box: Tuple[Interval, Interval],
    eps: float,
    tol: float = 1e-12,
    layer_points: Tuple[Iterable[float], Iterable[float]] = ((), ()),
    breakpoints: Tuple[Optional[Sequence[float]], Optional[Sequence[float]]] = (None, None),
    order: int = 10,
    max_refinements: int = 6,
):
    """Tensor-product analogue of :func:`layer_quadrature`; ``fn(x, y)`` takes flat points."""
    bps = [
        graded_breakpoints(box[axis], layer_points[axis], eps, breakpoints[axis])
        for axis in range(2)
    ]

    def estimate(bx: np.ndarray, by: np.ndarray):
        x, wx = composite_rule(bx, order)
        y, wy = composite_rule(by, order)
        xx, yy = np.meshgrid(x, y, indexing="ij")
        return _apply(lambda _: fn(xx.ravel(), yy.ravel()), xx.ravel(), np.outer(wx, wy).ravel())

    current = estimate(*bps)
    for _ in range(max_refinements):
        bps = [_bisect(bp) for bp in bps]
        refined = estimate(*bps)
        if _converged(refined, current, tol):
            return refined
        current = refined
    raise QuadratureError(
        f"layer_quadrature_2d did not converge to {tol:g} after {max_refinements} refinements"
    )
