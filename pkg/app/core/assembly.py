"""
Galerkin assembly of A_ik = B[phi_k, phi_i] and F_i = l(phi_i).

Integrals are computed element by element in closed form. On each element the
coordinate s in [0, h] runs away from the corrector anchor, so every factor is
a polynomial in s times one of the kernels

    R: exp(-rate * (t_lo + s))            boundary-layer profile
    E: erf(scale * (t_lo + s))            turning-point profile
    G: 2 scale / sqrt(pi) * exp(-(scale * (t_lo + s))**2)   its derivative

and products are integrated from incomplete-gamma moments (R) or exact
antiderivatives (E, G). Products without a closed form fall back to
layer-graded quadrature. 2D matrices are Kronecker sums of axis matrices.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import io as spio
from scipy import sparse, special

from app.core.basis import AxisSpace, EnrichedSpace
from app.core.exceptions import NonFiniteError, QuadratureError
from app.core.quadrature import composite_rule, layer_quadrature, layer_quadrature_2d
from app.core.sampling import forcing_eval
from app.schemas import ForcingParams, ProblemSpec

logger = logging.getLogger(__name__)

_SQRT_PI = math.sqrt(math.pi)
_SQRT_2 = math.sqrt(2.0)

Kernel = Tuple[str, ...]
LocalFunction = Dict[Kernel, np.ndarray]


# --- element-local polynomial/kernel algebra --------------------------------

def _poly(count: int, *coeffs) -> np.ndarray:
    """(E, len(coeffs)) coefficient array, broadcasting scalars over elements."""
    return np.stack([np.broadcast_to(np.asarray(c, dtype=np.float64), (count,)) for c in coeffs], axis=1)


def _polymul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    out = np.zeros((p.shape[0], p.shape[1] + q.shape[1] - 1))
    for i in range(p.shape[1]):
        out[:, i:i + q.shape[1]] += p[:, i:i + 1] * q
    return out


def _padd(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    if p.shape[1] < q.shape[1]:
        p, q = q, p
    out = p.copy()
    out[:, :q.shape[1]] += q
    return out


def _product(f: LocalFunction, g: LocalFunction) -> LocalFunction:
    out: LocalFunction = {}
    for k1, c1 in f.items():
        for k2, c2 in g.items():
            key = tuple(sorted(k1 + k2))
            term = _polymul(c1, c2)
            out[key] = _padd(out[key], term) if key in out else term
    return out


@dataclass(frozen=True)
class _Frame:
    """Element geometry in the local coordinate of one axis."""
    h: np.ndarray
    x_lo: np.ndarray
    x_hi: np.ndarray
    x_base: np.ndarray
    t_lo: np.ndarray
    sigma: float
    rate: float

    @property
    def count(self) -> int:
        return self.h.size


def _frame(axis: AxisSpace) -> _Frame:
    nodes = axis.nodes
    x_lo, x_hi = nodes[:-1], nodes[1:]
    corrector = axis.corrector
    if corrector is None:
        anchor, sigma, rate = float(nodes[0]), 1.0, 0.0
    else:
        anchor, sigma, rate = corrector.anchor, corrector.sigma, corrector.rate
    x_base = x_lo if sigma > 0 else x_hi
    t_lo = sigma * (x_base - anchor)
    if corrector is not None and corrector.profile == "exp":
        t_lo = np.maximum(t_lo, 0.0)
    return _Frame(x_hi - x_lo, x_lo, x_hi, x_base, t_lo, sigma, rate)


def _exp_moments(mu: float, frame: _Frame, degree: int) -> np.ndarray:
    # int_0^h s^p exp(-mu (t_lo + s)) ds = exp(-mu t_lo) p! / mu^(p+1) * P(p+1, mu h)
    p = np.arange(degree)
    scale = np.exp(-mu * frame.t_lo)[:, None]
    return scale * special.factorial(p) / mu ** (p + 1) * special.gammainc(p + 1, mu * frame.h[:, None])


def _erf_shifted(z: np.ndarray, shift: np.ndarray) -> np.ndarray:
    """erf(z) - shift, computed through erfc where both ends share a sign."""
    return np.where(shift > 0, -special.erfc(z), np.where(shift < 0, special.erfc(-z), special.erf(z)))


def _erf_power_integrals(key: Kernel, a: float, t1: np.ndarray, t2: np.ndarray, degree: int) -> np.ndarray:
    """int_{t1}^{t2} t^q K(t) dt for q < degree; raises NotImplementedError beyond the table."""
    shift = np.where(t1 >= 0, 1.0, np.where(t2 <= 0, -1.0, 0.0))

    def e(t):
        return np.exp(-(a * t) ** 2)

    def erf_s(t):
        return _erf_shifted(a * t, shift)

    def erf2_s(t):
        return _erf_shifted(_SQRT_2 * a * t, shift)

    def E(t):
        return special.erf(a * t)

    c = a * _SQRT_PI
    tables = {
        ("G",): [
            lambda: erf_s(t2) - erf_s(t1),
            lambda: -(e(t2) - e(t1)) / c,
            lambda: -(t2 * e(t2) - t1 * e(t1)) / c + (erf_s(t2) - erf_s(t1)) / (2 * a * a),
            lambda: -((a * a * t2 * t2 + 1) * e(t2) - (a * a * t1 * t1 + 1) * e(t1)) / (a * a * c),
        ],
        ("E",): [
            lambda: (t2 * E(t2) + e(t2) / c) - (t1 * E(t1) + e(t1) / c),
            lambda: (
                (t2 * t2 * E(t2) / 2 + t2 * e(t2) / (2 * c) - E(t2) / (4 * a * a))
                - (t1 * t1 * E(t1) / 2 + t1 * e(t1) / (2 * c) - E(t1) / (4 * a * a))
            ),
            lambda: (
                (t2 ** 3 * E(t2) / 3 + (a * a * t2 * t2 + 1) * e(t2) / (3 * a * a * c))
                - (t1 ** 3 * E(t1) / 3 + (a * a * t1 * t1 + 1) * e(t1) / (3 * a * a * c))
            ),
        ],
        ("G", "G"): [
            lambda: a * math.sqrt(2.0 / math.pi) * (erf2_s(t2) - erf2_s(t1)),
            lambda: -(np.exp(-2 * (a * t2) ** 2) - np.exp(-2 * (a * t1) ** 2)) / math.pi,
        ],
        ("E", "G"): [
            lambda: (erf_s(t2) - erf_s(t1)) * (E(t2) + E(t1)) / 2,
            lambda: (
                -(E(t2) * e(t2) - E(t1) * e(t1)) / c
                + (erf2_s(t2) - erf2_s(t1)) / (a * math.sqrt(2.0 * math.pi))
            ),
        ],
    }
    if key not in tables or degree > len(tables[key]):
        raise NotImplementedError(f"No closed form for kernel {key} up to degree {degree - 1}")
    return np.stack([tables[key][q]() for q in range(degree)], axis=1)


def _erf_moments(key: Kernel, frame: _Frame, degree: int) -> np.ndarray:
    t1, t2 = frame.t_lo, frame.t_lo + frame.h
    powers = _erf_power_integrals(key, frame.rate, t1, t2, degree)
    # s^p = sum_q C(p, q) t^q (-t_lo)^(p - q)
    out = np.zeros_like(powers)
    for p in range(degree):
        for q in range(p + 1):
            out[:, p] += math.comb(p, q) * (-t1) ** (p - q) * powers[:, q]
    return out


def _moments(key: Kernel, frame: _Frame, degree: int) -> np.ndarray:
    if key == ():
        p = np.arange(degree)
        return frame.h[:, None] ** (p + 1) / (p + 1)
    if set(key) == {"R"}:
        return _exp_moments(len(key) * frame.rate, frame, degree)
    if "R" in key:
        raise NotImplementedError(f"Mixed kernel {key}")
    return _erf_moments(key, frame, degree)


def _integrate(f: LocalFunction, frame: _Frame) -> np.ndarray:
    total = np.zeros(frame.count)
    for key, coeffs in f.items():
        total += np.sum(coeffs * _moments(key, frame, coeffs.shape[1]), axis=1)
    return total


def _local_functions(axis: AxisSpace, frame: _Frame):
    """(value, derivative, family index per element) for every local function."""
    E, h, s = frame.count, frame.h, frame.sigma
    fam = axis.node_family()
    left = (
        {(): _poly(E, (frame.x_hi - frame.x_base) / h, -s / h)},
        {(): _poly(E, -1.0 / h)},
        fam[:-1],
    )
    right = (
        {(): _poly(E, (frame.x_base - frame.x_lo) / h, s / h)},
        {(): _poly(E, 1.0 / h)},
        fam[1:],
    )
    functions = [left, right]
    corrector = axis.corrector
    if corrector is not None:
        blend = _poly(E, -(corrector.l0 + corrector.l1 * frame.x_base), -corrector.l1 * s)
        slope = _poly(E, -corrector.l1)
        if corrector.profile == "exp":
            value = {("R",): _poly(E, 1.0), (): blend}
            derivative = {("R",): _poly(E, -corrector.rate * s), (): slope}
        else:
            value = {("E",): _poly(E, 1.0), (): blend}
            derivative = {("G",): _poly(E, 1.0), (): slope}
        functions.append((value, derivative, np.zeros(E, dtype=np.int64)))
    return functions


@dataclass(frozen=True)
class AxisMatrices:
    """M[i, k] = int f_k f_i, K[i, k] = int f_k' f_i', C[i, k] = int b f_k' f_i."""
    mass: np.ndarray
    stiffness: np.ndarray
    convection: np.ndarray


def axis_matrices(
    axis: AxisSpace,
    convection: Tuple[float, float] = (1.0, 0.0),
    tol: float = 1e-12,
    max_refinements: int = 12,
    as_sparse: bool = False,
) -> AxisMatrices:
    """Mass, stiffness and convection matrices of one axis family, b = b0 + b1 x; CSR with ``as_sparse``."""
    frame = _frame(axis)
    b0, b1 = convection
    b = {(): _poly(frame.count, b0 + b1 * frame.x_base, b1 * frame.sigma)}
    local = _local_functions(axis, frame)
    n = axis.size
    entries = {"mass": ([], [], []), "stiffness": ([], [], []), "convection": ([], [], [])}
    fallback: List[Tuple[str, float]] = []

    for li, (vi, di, rows) in enumerate(local):
        for lk, (vk, dk, cols) in enumerate(local):
            keep = (rows >= 0) & (cols >= 0)
            integrands = {
                "mass": lambda: _product(vk, vi),
                "stiffness": lambda: _product(dk, di),
                "convection": lambda: _product(_product(b, dk), vi),
            }
            for name, build in integrands.items():
                try:
                    values = _integrate(build(), frame)
                except NotImplementedError:
                    # only corrector-corrector products lack a closed form
                    if li < 2 or lk < 2:
                        raise
                    values = _axis_entry_quadrature(axis, name, 0, 0, convection, tol, max_refinements)
                    fallback.append((name, values))
                    continue
                r, c, v = entries[name]
                r.append(rows[keep])
                c.append(cols[keep])
                v.append(values[keep])

    for name, value in fallback:
        r, c, v = entries[name]
        r.append(np.array([0]))
        c.append(np.array([0]))
        v.append(np.array([value]))
    out = {}
    for name, (r, c, v) in entries.items():
        mat = sparse.coo_matrix(
            (np.concatenate(v), (np.concatenate(r), np.concatenate(c))), shape=(n, n)
        )
        out[name] = mat.tocsr() if as_sparse else mat.toarray()
    return AxisMatrices(out["mass"], out["stiffness"], out["convection"])


def _axis_entry_quadrature(
    axis: AxisSpace,
    name: str,
    i: int,
    k: int,
    convection: Tuple[float, float],
    tol: float,
    max_refinements: int,
) -> float:
    fi, fk = axis.function(i), axis.function(k)
    b0, b1 = convection
    integrands = {
        "mass": lambda x: fk(x) * fi(x),
        "stiffness": lambda x: fk.derivative(x) * fi.derivative(x),
        "convection": lambda x: (b0 + b1 * x) * fk.derivative(x) * fi(x),
    }
    points, width = axis.layer(fallback_width=float(axis.nodes[-1] - axis.nodes[0]))
    try:
        return float(layer_quadrature(
            integrands[name],
            (float(axis.nodes[0]), float(axis.nodes[-1])),
            width,
            tol=tol,
            layer_points=points,
            breakpoints=axis.nodes,
            max_refinements=max_refinements,
        ))
    except QuadratureError as e:
        raise QuadratureError(f"{name} entry quadrature failed: {e}", indices=(i, k)) from e


# --- global matrix -----------------------------------------------------------

def _check_space(problem: ProblemSpec, space: EnrichedSpace) -> None:
    if space.problem != problem:
        raise ValueError(
            f"Space was built for {space.problem.name or space.problem.problem_class.value} "
            f"(eps={space.problem.epsilon}), not for eps={problem.epsilon}"
        )


def _assemble(
    problem: ProblemSpec, space: EnrichedSpace, with_convection: bool, tol: float, as_sparse: bool
):
    _check_space(problem, space)
    eps = problem.epsilon
    if space.dimension == 1:
        conv = problem.convection_poly(0) if with_convection else (0.0, 0.0)
        m = axis_matrices(space.axes[0], conv, tol, as_sparse=as_sparse)
        A = eps * m.stiffness + m.convection
        return A.tocsr() if as_sparse else A
    for axis in range(2):
        if problem.convection_poly(axis)[1] != 0.0:
            raise ValueError("Tensor assembly needs a constant convection field")
    bx, by = (problem.convection_at(0.0, axis) if with_convection else 0.0 for axis in range(2))
    mx = axis_matrices(space.axes[0], (1.0, 0.0), tol, as_sparse=True)
    my = axis_matrices(space.axes[1], (1.0, 0.0), tol, as_sparse=True)
    kron = (
        eps * (sparse.kron(mx.stiffness, my.mass) + sparse.kron(mx.mass, my.stiffness))
        + bx * sparse.kron(mx.convection, my.mass)
        + by * sparse.kron(mx.mass, my.convection)
    ).tocsr()
    A = kron[space.order][:, space.order]
    return A.tocsr() if as_sparse else A.toarray()


def assemble_matrix(
    problem: ProblemSpec,
    space: EnrichedSpace,
    with_convection: bool = True,
    tol: float = 1e-12,
) -> np.ndarray:
    """
    Dense Galerkin matrix A[i, k] = eps int grad phi_k . grad phi_i + int (b . grad phi_k) phi_i.

    Args:
        problem: Problem the space was built for
        space: Trial/test space
        with_convection: Drop the convection term when False (pure diffusion)
        tol: Tolerance of any quadrature fallback

    Returns:
        (total_dim, total_dim) array, rows are test functions
    """
    A = _assemble(problem, space, with_convection, tol, as_sparse=False)
    if not np.all(np.isfinite(A)):
        raise NonFiniteError("Assembled matrix has non-finite entries")
    logger.debug(f"Assembled {A.shape[0]}x{A.shape[1]} matrix (eps={problem.epsilon:g})")
    return A


def assemble_sparse_matrix(
    problem: ProblemSpec, space: EnrichedSpace, tol: float = 1e-12
) -> sparse.csr_matrix:
    """CSR variant of :func:`assemble_matrix` for large plain spaces."""
    A = _assemble(problem, space, True, tol, as_sparse=True)
    if not np.all(np.isfinite(A.data)):
        raise NonFiniteError("Assembled matrix has non-finite entries")
    return A


# --- loads -------------------------------------------------------------------

def axis_fourier_loads(
    axis: AxisSpace,
    kappas: np.ndarray,
    power: int = 0,
    tol: float = 1e-12,
    order: int = 8,
) -> np.ndarray:
    """
    I[m, a] = int f_a(x) x^power exp(i kappa_m x) dx for every family function f_a.

    Hats use per-element Gauss rules; the exponential profile is integrated in
    closed form, the erf profile by layer-graded quadrature.
    """
    kappas = np.asarray(kappas, dtype=np.float64).ravel()
    nodes = axis.nodes
    out = np.zeros((kappas.size, axis.size), dtype=np.complex128)

    def wave(x):
        return x ** power * np.exp(1j * kappas[:, None] * x[None, :])

    x, w = composite_rule(nodes, order, flat=False)
    h = (nodes[1:] - nodes[:-1])[:, None]
    fam = axis.node_family()
    phase = wave(x.ravel()).reshape(kappas.size, *x.shape) * w[None]
    for shape, family in (((nodes[1:, None] - x) / h, fam[:-1]), ((x - nodes[:-1, None]) / h, fam[1:])):
        contrib = np.sum(phase * shape[None], axis=2)
        keep = family >= 0
        np.add.at(out.T, family[keep], contrib[:, keep].T)

    corrector = axis.corrector
    if corrector is not None:
        xb, wb = composite_rule(nodes, order)
        blend = wave(xb) @ (wb * (corrector.l0 + corrector.l1 * xb))
        out[:, 0] = _raw_fourier(axis, kappas, power, tol, order) - blend
    return out


def _raw_fourier(axis: AxisSpace, kappas: np.ndarray, power: int, tol: float, order: int) -> np.ndarray:
    corrector = axis.corrector
    nodes = axis.nodes
    a, b = float(nodes[0]), float(nodes[-1])
    length = b - a
    rho, anchor, sigma = corrector.rate, corrector.anchor, corrector.sigma
    if corrector.profile == "exp" and power <= 1 and rho * length >= 0.5:
        # x = anchor + sigma t, t in [0, L]; integrand exp(z t) (anchor + sigma t)^power
        z = -rho + 1j * kappas * sigma
        ezl = np.exp(z * length)
        j0 = (ezl - 1.0) / z
        value = anchor * j0 if power == 1 else j0
        if power == 1:
            j1 = (ezl * (z * length - 1.0) + 1.0) / z ** 2
            value = value + sigma * j1
        return np.exp(1j * kappas * anchor) * value

    def integrand(x):
        return corrector.raw(x)[None, :] * x ** power * np.exp(1j * kappas[:, None] * x[None, :])

    return layer_quadrature(
        integrand,
        (a, b),
        corrector.layer_width,
        tol=tol,
        layer_points=[anchor],
        breakpoints=nodes,
        order=10,
    )


def assemble_loads(
    problem: ProblemSpec,
    space: EnrichedSpace,
    forcings: Sequence[ForcingParams],
    tol: float = 1e-12,
) -> np.ndarray:
    """Load vectors F_m[i] = int f_m phi_i for a batch of forcings, shape (M, total_dim)."""
    _check_space(problem, space)
    if not forcings:
        return np.zeros((0, space.total_dim))
    if any(f.dimension != space.dimension for f in forcings):
        raise ValueError(f"Forcing dimension does not match the {space.dimension}D problem")
    m0 = np.array([f.m0 for f in forcings])
    m1 = np.array([f.m1 for f in forcings])
    if space.dimension == 1:
        axis = space.axes[0]
        compat = np.array([f.compat_factor for f in forcings])
        F = np.zeros((len(forcings), space.total_dim))
        for power in (0, 1):
            rows = np.flatnonzero(compat == bool(power))
            if rows.size == 0:
                continue
            i0 = axis_fourier_loads(axis, [forcings[r].n0 for r in rows], power, tol)
            i1 = axis_fourier_loads(axis, [forcings[r].n1 for r in rows], power, tol)
            F[rows] = m0[rows, None] * i0.imag + m1[rows, None] * i1.real
    else:
        ax, ay = space.axes
        ix0 = axis_fourier_loads(ax, [f.n0 for f in forcings], 0, tol)
        iy1 = axis_fourier_loads(ay, [f.n1 for f in forcings], 0, tol)
        ix2 = axis_fourier_loads(ax, [f.n2 for f in forcings], 0, tol)
        iy3 = axis_fourier_loads(ay, [f.n3 for f in forcings], 0, tol)
        sine = np.einsum("ma,mb->mab", ix0, iy1).reshape(len(forcings), -1)
        cosine = np.einsum("ma,mb->mab", ix2, iy3).reshape(len(forcings), -1)
        F = (m0[:, None] * sine.imag + m1[:, None] * cosine.real)[:, space.order]
    bad = np.flatnonzero(~np.all(np.isfinite(F), axis=1))
    if bad.size:
        raise NonFiniteError("Non-finite load vector", sample_index=int(bad[0]))
    return F


def assemble_load(
    problem: ProblemSpec, space: EnrichedSpace, f: ForcingParams, tol: float = 1e-12
) -> np.ndarray:
    """Load vector F_i = int f phi_i."""
    return assemble_loads(problem, space, [f], tol)[0]


@dataclass(frozen=True)
class LinearSystem:
    """Matrix A (independent of the forcing) and one load vector per forcing."""
    A: np.ndarray
    F: np.ndarray
    space: EnrichedSpace

    @property
    def size(self) -> int:
        return self.A.shape[0]


def assemble_system(
    problem: ProblemSpec,
    space: EnrichedSpace,
    forcings: Sequence[ForcingParams],
    tol: float = 1e-12,
) -> LinearSystem:
    A = assemble_matrix(problem, space, tol=tol)
    return LinearSystem(A, assemble_loads(problem, space, forcings, tol), space)


# --- direct quadrature -------------------------------------------------------

def _layer_setup(space: EnrichedSpace, axis: int) -> Tuple[List[float], float]:
    return space.axes[axis].layer(fallback_width=space.problem.epsilon)


def bilinear_form_quadrature(
    problem: ProblemSpec,
    space: EnrichedSpace,
    i: int,
    k: int,
    tol: float = 1e-12,
    with_convection: bool = True,
) -> float:
    """B[phi_k, phi_i] by layer-graded quadrature of the global basis functions."""
    _check_space(problem, space)
    fi, fk = space.basis_function(i), space.basis_function(k)
    eps = problem.epsilon
    try:
        if space.dimension == 1:
            b0, b1 = problem.convection_poly(0) if with_convection else (0.0, 0.0)
            points, width = _layer_setup(space, 0)
            return float(layer_quadrature(
                lambda x: eps * fk.derivative(x) * fi.derivative(x) + (b0 + b1 * x) * fk.derivative(x) * fi(x),
                problem.domain,
                width,
                tol=tol,
                layer_points=points,
                breakpoints=space.axes[0].nodes,
            ))
        bx, by = (problem.convection_at(0.0, axis) if with_convection else 0.0 for axis in range(2))

        def integrand(x, y):
            gkx, gky = fk.gradient(x, y)
            gix, giy = fi.gradient(x, y)
            return eps * (gkx * gix + gky * giy) + (bx * gkx + by * gky) * fi(x, y)

        (px, wx), (py, _) = _layer_setup(space, 0), _layer_setup(space, 1)
        return float(layer_quadrature_2d(
            integrand,
            (problem.domain, problem.domain),
            wx,
            tol=tol,
            layer_points=(px, py),
            breakpoints=(space.axes[0].nodes, space.axes[1].nodes),
        ))
    except QuadratureError as e:
        raise QuadratureError(str(e), indices=(i, k)) from e


def load_quadrature(
    problem: ProblemSpec, space: EnrichedSpace, f: ForcingParams, i: int, tol: float = 1e-12
) -> float:
    """l(phi_i) by layer-graded quadrature."""
    _check_space(problem, space)
    fi = space.basis_function(i)
    try:
        if space.dimension == 1:
            points, width = _layer_setup(space, 0)
            return float(layer_quadrature(
                lambda x: forcing_eval(f, x) * fi(x),
                problem.domain,
                width,
                tol=tol,
                layer_points=points,
                breakpoints=space.axes[0].nodes,
            ))
        (px, wx), (py, _) = _layer_setup(space, 0), _layer_setup(space, 1)
        return float(layer_quadrature_2d(
            lambda x, y: forcing_eval(f, (x, y)) * fi(x, y),
            (problem.domain, problem.domain),
            wx,
            tol=tol,
            layer_points=(px, py),
            breakpoints=(space.axes[0].nodes, space.axes[1].nodes),
        ))
    except QuadratureError as e:
        raise QuadratureError(str(e), indices=(i,)) from e


# --- export ------------------------------------------------------------------

def export_matrix_market(path: str, array: np.ndarray, comment: str = "") -> None:
    """Write a matrix (coordinate format) or a vector (array format) as Matrix Market text."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim == 1:
        spio.mmwrite(path, array[:, None], comment=comment, precision=17)
    else:
        spio.mmwrite(path, sparse.coo_matrix(array), comment=comment, precision=17)


def read_matrix_market(path: str) -> np.ndarray:
    data = spio.mmread(path)
    return data.toarray() if sparse.issparse(data) else np.asarray(data)
