import math

import numpy as np
import pytest

from app.core.assembly import (
    assemble_load,
    assemble_loads,
    assemble_matrix,
    assemble_sparse_matrix,
    assemble_system,
    bilinear_form_quadrature,
    export_matrix_market,
    load_quadrature,
    read_matrix_market,
)
from app.core.basis import uniform_space
from app.core.exceptions import QuadratureError
from app.core.quadrature import composite_rule, gauss_legendre, graded_breakpoints, layer_quadrature
from app.schemas import ForcingParams, ProblemClass, ProblemSpec

ONE = ForcingParams(m0=0.0, m1=1.0, n0=0.0, n1=0.0)


def test_plain_paradigm_matrix(paradigm_problem):
    space = uniform_space(paradigm_problem, 4, enrich=False)
    A = assemble_matrix(paradigm_problem, space)
    assert A.shape == (3, 3)
    np.testing.assert_allclose(np.diag(A), 0.4)
    np.testing.assert_allclose(np.diag(A, 1), -0.7)
    np.testing.assert_allclose(np.diag(A, -1), 0.3)
    assert A[0, 2] == 0.0


def test_constant_forcing_hat_loads(paradigm_problem):
    space = uniform_space(paradigm_problem, 4, enrich=False)
    np.testing.assert_allclose(assemble_load(paradigm_problem, space, ONE), 0.5)


def test_pure_diffusion_matrix_is_symmetric(boundary_problem, boundary_space):
    A = assemble_matrix(boundary_problem, boundary_space, with_convection=False)
    np.testing.assert_allclose(A, A.T, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(0.5 * (A + A.T)) > 0)


def test_sparse_matches_dense(boundary_problem):
    space = uniform_space(boundary_problem, 16, enrich=False)
    dense = assemble_matrix(boundary_problem, space)
    np.testing.assert_allclose(assemble_sparse_matrix(boundary_problem, space).toarray(), dense)


@pytest.mark.parametrize("name", ["paradigm", "boundary1d", "interior1d"])
@pytest.mark.parametrize("eps", [1e-1, 1e-2, 1e-4, 1e-6])
def test_closed_form_matrix_matches_quadrature(name, eps):
    problem = ProblemSpec.preset(name, eps)
    space = uniform_space(problem, 8)
    A = assemble_matrix(problem, space)
    for i, k in [(0, 0), (0, 1), (1, 0), (0, 4), (4, 0), (3, 4), (4, 4), (7, 6)]:
        expected = bilinear_form_quadrature(problem, space, i, k, tol=1e-13)
        assert A[i, k] == pytest.approx(expected, rel=1e-8, abs=1e-10), (i, k)


@pytest.mark.parametrize("name", ["paradigm", "boundary1d", "interior1d"])
@pytest.mark.parametrize("eps", [1e-1, 1e-3, 1e-6])
def test_closed_form_loads_match_quadrature(name, eps):
    problem = ProblemSpec.preset(name, eps)
    space = uniform_space(problem, 8)
    f = ForcingParams.parse("1.81,0.09,1.68,-1.78", problem.problem_class)
    F = assemble_load(problem, space, f)
    for i in (0, 1, 4, 7):
        assert F[i] == pytest.approx(load_quadrature(problem, space, f, i, tol=1e-13), rel=1e-9, abs=1e-12)


@pytest.mark.slow
@pytest.mark.parametrize("eps", [1e-8, 1e-10])
def test_closed_form_survives_tiny_eps(eps):
    problem = ProblemSpec.preset("boundary1d", eps)
    space = uniform_space(problem, 8)
    A = assemble_matrix(problem, space)
    assert np.all(np.isfinite(A))
    assert A[0, 0] == pytest.approx(bilinear_form_quadrature(problem, space, 0, 0, tol=1e-12), rel=1e-7)


@pytest.mark.slow
def test_tensor_assembly_matches_quadrature(square_problem):
    space = uniform_space(square_problem, 4)
    A = assemble_matrix(square_problem, space)
    f = ForcingParams.parse("1.0,-0.5,1.3,0.7,-1.1,0.4", ProblemClass.SQUARE_2D)
    F = assemble_load(square_problem, space, f)
    for i, k in [(0, 0), (6, 6), (0, 7), (7, 0), (10, 11)]:
        assert A[i, k] == pytest.approx(
            bilinear_form_quadrature(square_problem, space, i, k, tol=1e-10), rel=1e-7, abs=1e-9
        )
    for i in (0, 6, 10):
        assert F[i] == pytest.approx(load_quadrature(square_problem, space, f, i, tol=1e-10), rel=1e-7, abs=1e-9)


def test_compat_factor_loads(interior_problem):
    space = uniform_space(interior_problem, 8)
    plain = ForcingParams(m0=0.0, m1=1.0, n0=0.0, n1=0.0)
    weighted = plain.model_copy(update={"compat_factor": True})
    F = assemble_loads(interior_problem, space, [plain, weighted])
    # f = 1 is even and f = x is odd; the hats come in mirror pairs around 0
    nodal = F[:, 1:]
    np.testing.assert_allclose(nodal[0], nodal[0][::-1], atol=1e-13)
    np.testing.assert_allclose(nodal[1], -nodal[1][::-1], atol=1e-13)


def test_loads_are_linear_in_amplitudes(boundary_problem, boundary_space):
    f = ForcingParams(m0=1.2, m1=-0.4, n0=1.5, n1=0.3)
    g = ForcingParams(m0=2.4, m1=-0.8, n0=1.5, n1=0.3)
    F = assemble_loads(boundary_problem, boundary_space, [f, g])
    np.testing.assert_allclose(F[1], 2.0 * F[0], rtol=1e-13)


def test_space_of_another_problem_is_rejected(boundary_space):
    other = ProblemSpec.preset("boundary1d", 1e-2)
    with pytest.raises(ValueError):
        assemble_matrix(other, boundary_space)


def test_assemble_system(boundary_problem, boundary_space, sample_forcing):
    system = assemble_system(boundary_problem, boundary_space, [sample_forcing, ONE])
    assert system.size == boundary_space.total_dim
    assert system.F.shape == (2, boundary_space.total_dim)


def test_matrix_market_export(tmp_path, paradigm_problem):
    space = uniform_space(paradigm_problem, 4)
    A = assemble_matrix(paradigm_problem, space)
    path = str(tmp_path / "A.mtx")
    export_matrix_market(path, A, comment="paradigm")
    np.testing.assert_array_equal(read_matrix_market(path), A)


# --- quadrature ----------------------------------------------------------------

def test_gauss_legendre_integrates_polynomials_exactly():
    x, w = gauss_legendre(5)
    assert np.sum(w * x ** 8) == pytest.approx(2.0 / 9.0, rel=1e-14)


def test_composite_rule_on_sine():
    nodes, weights = composite_rule(np.linspace(0.0, math.pi, 5), order=10)
    assert np.sum(weights * np.sin(nodes)) == pytest.approx(2.0, rel=1e-13)


def test_graded_breakpoints_stay_inside():
    bp = graded_breakpoints((0.0, 1.0), [1.0], 1e-3, extra=[0.5])
    assert bp[0] == 0.0 and bp[-1] == 1.0
    assert np.any(np.isclose(bp, 0.999, rtol=0, atol=1e-15)) and 0.5 in bp
    assert np.all(np.diff(bp) > 0)


@pytest.mark.parametrize("eps", [1e-2, 1e-6, 1e-10])
def test_layer_quadrature_exponential(eps):
    value = layer_quadrature(lambda x: np.exp(-x / eps), (0.0, 1.0), eps, tol=1e-13, layer_points=[0.0])
    assert value == pytest.approx(eps * -math.expm1(-1.0 / eps), rel=1e-11)


def test_layer_quadrature_reports_failure():
    with pytest.raises(QuadratureError):
        layer_quadrature(lambda x: np.sign(x - 1.0 / 3.0), (0.0, 1.0), 1.0, tol=1e-15, max_refinements=2)


@pytest.mark.parametrize("name", ["paradigm", "boundary1d", "interior1d"])
@pytest.mark.parametrize("eps", [1e-1, 1e-2])
def test_every_corrector_entry_matches_quadrature(name, eps):
    problem = ProblemSpec.preset(name, eps)
    space = uniform_space(problem, 8)
    A = assemble_matrix(problem, space)
    scale = np.max(np.abs(A))
    for k in range(space.total_dim):
        for i, j in ((0, k), (k, 0)):
            expected = bilinear_form_quadrature(problem, space, i, j, tol=1e-13)
            assert A[i, j] == pytest.approx(expected, rel=1e-10, abs=1e-12 * scale), (i, j)
    f = ForcingParams.parse("1.81,0.09,1.68,-1.78", problem.problem_class)
    F = assemble_load(problem, space, f)
    assert F[0] == pytest.approx(load_quadrature(problem, space, f, 0, tol=1e-13), rel=1e-10, abs=1e-14)


def test_matrix_does_not_depend_on_forcing(boundary_problem, boundary_space):
    first = assemble_system(boundary_problem, boundary_space, [ONE])
    second = assemble_system(
        boundary_problem, boundary_space, [ForcingParams(m0=1.3, m1=-0.2, n0=0.9, n1=1.7), ONE]
    )
    assert first.A.tobytes() == second.A.tobytes()
    assert not np.array_equal(second.F[0], second.F[1])
