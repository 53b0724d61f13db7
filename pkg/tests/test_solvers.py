import numpy as np
import pytest

from app.core.assembly import assemble_matrix
from app.core.basis import uniform_space
from app.core.evaluation import relative_l2
from app.core.exceptions import NonFiniteError, SingularMatrixError
from app.core.solvers import (
    FactorizedSystem,
    GridFunction,
    ReferenceCache,
    Solution,
    cached_reference,
    fem_oracle,
    fem_oracle_batch,
    shishkin_reference,
    solve_direct,
    write_solution_csv,
)
from app.schemas import ForcingParams, ProblemSpec


def test_identity_system():
    F = np.array([1.0, -2.0, 3.0])
    np.testing.assert_allclose(solve_direct(np.eye(3), F), F)


def test_small_system():
    x = solve_direct(np.array([[2.0, 1.0], [1.0, 3.0]]), np.array([3.0, 5.0]))
    np.testing.assert_allclose(x, [0.8, 1.4], rtol=1e-14)


def test_batched_loads():
    system = FactorizedSystem(np.array([[4.0, 1.0], [2.0, 3.0]]))
    F = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    x = system.solve(F)
    assert x.shape == (3, 2)
    np.testing.assert_allclose(x[2], x[0] + x[1], atol=1e-15)


def test_singular_matrix_reports_column():
    with pytest.raises(SingularMatrixError) as info:
        FactorizedSystem(np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert info.value.column == 1


def test_non_finite_matrix():
    with pytest.raises(NonFiniteError):
        FactorizedSystem(np.array([[1.0, np.nan], [0.0, 1.0]]))


def test_ill_conditioned_matrix_warns(caplog):
    A = np.diag([1.0, 1e-15])
    with caplog.at_level("WARNING", logger="app.core.solvers"):
        FactorizedSystem(A)
    assert "ill-conditioned" in caplog.text


def test_load_length_mismatch():
    with pytest.raises(ValueError):
        FactorizedSystem(np.eye(2)).solve(np.ones(3))


def test_zero_forcing_gives_zero_solution(boundary_problem, boundary_space):
    zero = ForcingParams(m0=0.0, m1=0.0, n0=1.0, n1=1.0)
    sol = fem_oracle(boundary_problem, boundary_space, zero)
    assert np.all(sol.coefficients == 0.0)


def test_oracle_is_linear_in_forcing(boundary_problem, boundary_space):
    f = ForcingParams(m0=1.0, m1=0.0, n0=1.3, n1=0.0)
    g = ForcingParams(m0=0.0, m1=1.0, n0=0.0, n1=-0.7)
    fg = ForcingParams(m0=2.0, m1=-3.0, n0=1.3, n1=-0.7)
    coeffs = fem_oracle_batch(boundary_problem, boundary_space, [f, g, fg])
    np.testing.assert_allclose(coeffs[2], 2.0 * coeffs[0] - 3.0 * coeffs[1], atol=1e-12)


def test_solution_evaluation_and_boundary(boundary_problem, boundary_space, sample_forcing):
    sol = fem_oracle(boundary_problem, boundary_space, sample_forcing)
    values = sol(np.array([0.0, 0.5, 1.0]))
    assert abs(values[0]) <= 1e-13 and abs(values[2]) <= 1e-13
    assert sol.gradient(np.array([0.25])).shape == (1, 1)


def test_solution_rejects_wrong_length(boundary_space):
    with pytest.raises(ValueError):
        Solution(np.zeros(boundary_space.total_dim + 1), boundary_space)


def test_enriched_oracle_matches_reference(sample_forcing):
    problem = ProblemSpec.preset("boundary1d", 1e-2)
    space = uniform_space(problem, 64)
    sol = fem_oracle(problem, space, sample_forcing)
    ref = shishkin_reference(problem, sample_forcing, n_ref=1024)
    x = np.linspace(0.0, 1.0, 401)
    assert relative_l2(sol(x), ref(x)) < 5e-3


def test_reference_size_and_boundary(sample_forcing):
    problem = ProblemSpec.preset("paradigm", 1e-4)
    ref = shishkin_reference(problem, sample_forcing, n_ref=256)
    assert ref.axes[0].size == 257
    assert ref.values[0] == 0.0 and ref.values[-1] == 0.0
    with pytest.raises(ValueError):
        shishkin_reference(problem, sample_forcing, n_ref=64)


def test_reference_2d(square_problem):
    f = ForcingParams.parse("1.0,0.5,1.0,0.2,-0.3,0.8", square_problem.problem_class)
    ref = shishkin_reference(square_problem, f, n_ref=128)
    assert ref.values.shape == (129, 129)
    assert np.all(ref.values[0] == 0.0) and np.all(ref.values[:, -1] == 0.0)
    assert np.all(np.isfinite(ref(np.array([[0.5, 0.5], [0.99, 0.01]]))))


def test_grid_function_save_load(tmp_path):
    ref = GridFunction((np.array([0.0, 0.5, 1.0]),), np.array([0.0, 2.0, 0.0]))
    path = str(tmp_path / "ref.npz")
    ref.save(path)
    loaded = GridFunction.load(path)
    assert loaded(np.array([0.25]))[0] == pytest.approx(1.0)
    np.testing.assert_allclose(loaded.derivative(np.array([0.5, 0.75])), [4.0, -4.0])


def test_reference_cache(tmp_path, sample_forcing):
    problem = ProblemSpec.preset("boundary1d", 1e-3)
    cache = ReferenceCache(str(tmp_path / "cache"))
    first = cached_reference(problem, sample_forcing, 256, cache=cache)
    key = ReferenceCache.key(problem, sample_forcing, 256, 2.0)
    assert cache.get(key) is not None
    second = cached_reference(problem, sample_forcing, 256, cache=cache)
    np.testing.assert_array_equal(first.values, second.values)


def test_condition_estimate_is_finite():
    problem = ProblemSpec.preset("boundary1d", 1e-3)
    plain = FactorizedSystem(assemble_matrix(problem, uniform_space(problem, 32, enrich=False)))
    assert np.isfinite(plain.condition)


def test_write_solution_csv(tmp_path):
    path = tmp_path / "u.csv"
    write_solution_csv(str(path), np.array([0.0, 1.0, 0.0]), np.array([0.0, 0.5, 1.0]))
    lines = path.read_text().splitlines()
    assert lines[0] == "x,u"
    assert len(lines) == 4


def test_reference_self_convergence(boundary_problem, sample_forcing):
    x = np.linspace(0.0, 1.0, 401)
    coarse = shishkin_reference(boundary_problem, sample_forcing, n_ref=4096)(x)
    fine = shishkin_reference(boundary_problem, sample_forcing, n_ref=8192)(x)
    assert np.max(np.abs(coarse - fine)) <= 1e-4 * np.max(np.abs(fine))


@pytest.mark.parametrize("name", ["paradigm", "boundary1d"])
def test_oracle_keeps_sign_of_nonnegative_forcing(name):
    problem = ProblemSpec.preset(name, 1e-3)
    space = uniform_space(problem, 100)
    f = ForcingParams(m0=0.0, m1=1.0, n0=0.0, n1=0.0)
    u = fem_oracle(problem, space, f)(np.linspace(*problem.domain, 2001))
    assert u.min() >= -1e-12 * u.max()
    assert u.max() > 0.0
