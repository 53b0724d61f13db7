import numpy as np
import pytest

from app.core.basis import (
    BlendedCorrector,
    BoundaryExp,
    InteriorErf,
    TensorCorrector,
    build_enriched_space,
    corrector_eval,
    corrector_kinds,
    dump_basis_csv,
    make_corrector,
    nodal_eval,
    uniform_space,
)
from app.core.exceptions import BasisError
from app.core.geometry import build_tensor_mesh_2d, build_uniform_mesh_1d
from app.schemas import LayerSide, ProblemSpec


@pytest.mark.parametrize("name", ["paradigm", "boundary1d", "interior1d"])
@pytest.mark.parametrize("eps", [1e-1, 1e-4, 1e-8])
def test_corrector_vanishes_on_boundary(name, eps):
    problem = ProblemSpec.preset(name, eps)
    corrector = make_corrector(corrector_kinds(problem), eps, problem.domain)
    a, b = problem.domain
    values, _ = corrector_eval(corrector, np.array([a, b]))
    assert np.all(np.abs(values) <= 1e-13)


def test_corrector_kinds_follow_convection():
    left = corrector_kinds(ProblemSpec.preset("paradigm", 1e-3))
    assert left.side == LayerSide.LEFT
    assert left.rate == pytest.approx(1e3)
    right = corrector_kinds(ProblemSpec.preset("boundary1d", 1e-3))
    assert right.side == LayerSide.RIGHT
    assert right.rate == pytest.approx(2e3)
    kind = corrector_kinds(ProblemSpec.preset("interior1d", 1e-2))
    assert isinstance(kind, InteriorErf)
    assert kind.center == 0.0
    assert kind.scale == pytest.approx(np.sqrt(50.0))


def test_boundary_corrector_away_from_layer():
    eps = 1e-5
    corrector = make_corrector(BoundaryExp(LayerSide.RIGHT, 2.0 / eps), eps, (0.0, 1.0))
    value, _ = corrector_eval(corrector, 0.5)
    assert float(value) == pytest.approx(-0.5, abs=1e-12)


def test_interior_corrector_is_odd():
    corrector = make_corrector(InteriorErf(0.0, 10.0), 5e-3, (-1.0, 1.0))
    x = np.linspace(-1.0, 1.0, 21)
    np.testing.assert_allclose(corrector(x), -corrector(-x), atol=1e-14)


@pytest.mark.parametrize(
    "kind, domain",
    [
        (BoundaryExp(LayerSide.LEFT, 20.0), (-1.0, 1.0)),
        (BoundaryExp(LayerSide.RIGHT, 50.0), (0.0, 1.0)),
        (InteriorErf(0.0, 7.0), (-1.0, 1.0)),
    ],
)
def test_corrector_derivative_matches_finite_differences(kind, domain):
    corrector = BlendedCorrector(kind, domain)
    x = np.linspace(domain[0] + 0.05, domain[1] - 0.05, 13)
    h = 1e-6
    fd = (corrector(x + h) - corrector(x - h)) / (2 * h)
    np.testing.assert_allclose(corrector.derivative(x), fd, rtol=1e-6, atol=1e-6)


def test_rejects_nonpositive_eps():
    with pytest.raises(BasisError):
        make_corrector(BoundaryExp(LayerSide.LEFT, 1.0), 0.0, (0.0, 1.0))


def test_nodal_eval_1d(boundary_problem):
    space = build_enriched_space(boundary_problem, build_uniform_mesh_1d(0.0, 1.0, 4))
    value, grad = nodal_eval(space, 1, 0.5)
    assert value == pytest.approx(1.0)
    value, grad = nodal_eval(space, 1, 0.375)
    assert value == pytest.approx(0.5)
    assert grad[0] == pytest.approx(4.0)
    value, grad = nodal_eval(space, 0, 0.75)
    assert value == 0.0
    assert grad[0] == 0.0


def test_nodal_eval_2d_left_element_gradient(square_problem):
    mesh = build_tensor_mesh_2d(3, 3)
    space = build_enriched_space(square_problem, mesh)
    p = (mesh.x_nodes[1], mesh.y_nodes[1])
    value, grad = nodal_eval(space, 0, p)
    assert value == pytest.approx(1.0)
    np.testing.assert_allclose(grad, [3.0, 3.0])


def test_point_outside_domain_is_rejected(boundary_space):
    with pytest.raises(BasisError):
        boundary_space.evaluate(np.zeros(boundary_space.total_dim), np.array([1.5]))
    with pytest.raises(BasisError):
        nodal_eval(boundary_space, boundary_space.nodal_count, 0.5)


def test_space_dimensions():
    space_1d = uniform_space(ProblemSpec.preset("boundary1d", 1e-3), 100)
    assert space_1d.total_dim == 100
    assert space_1d.corrector_count == 1
    plain = uniform_space(ProblemSpec.preset("boundary1d", 1e-3), 100, enrich=False)
    assert plain.total_dim == 99
    space_2d = uniform_space(ProblemSpec.preset("square2d", 1e-3), 52)
    assert space_2d.nodal_count == 2601
    assert space_2d.total_dim == 2601 + 51 + 51 + 1


def test_2d_corrector_ordering(square_problem):
    space = uniform_space(square_problem, 4)
    assert space.corrector_count == 7
    ex, ey = make_corrector(corrector_kinds(square_problem), square_problem.epsilon, (0.0, 1.0))
    points = np.array([[0.3, 0.25], [0.6, 0.5], [0.9, 0.1]])
    values = space.basis_values(points)
    x, y = points[:, 0], points[:, 1]

    def first_hat(t):
        return np.interp(t, [0.0, 0.25, 0.5], [0.0, 1.0, 0.0])

    # (ex, hat of the first y-node), then (hat of the first x-node, ey), then the corner
    np.testing.assert_allclose(values[0], ex(x) * first_hat(y), atol=1e-14)
    np.testing.assert_allclose(values[3], first_hat(x) * ey(y), atol=1e-14)
    np.testing.assert_allclose(values[6], ex(x) * ey(y), atol=1e-14)
    assert isinstance(space.basis_function(6), TensorCorrector)


def test_evaluate_matches_basis_values(boundary_space):
    rng = np.random.default_rng(0)
    coeffs = rng.normal(size=boundary_space.total_dim)
    x = np.linspace(0.0, 1.0, 57)
    np.testing.assert_allclose(
        boundary_space.evaluate(coeffs, x), coeffs @ boundary_space.basis_values(x), atol=1e-13
    )


def test_evaluate_grid_matches_points(square_problem):
    space = uniform_space(square_problem, 4)
    coeffs = np.random.default_rng(1).normal(size=space.total_dim)
    x = np.linspace(0.0, 1.0, 5)
    y = np.linspace(0.0, 1.0, 7)
    xx, yy = np.meshgrid(x, y, indexing="ij")
    points = np.stack([xx.ravel(), yy.ravel()], axis=1)
    grid = space.evaluate_grid(coeffs, x, y)
    np.testing.assert_allclose(grid.ravel(), space.evaluate(coeffs, points), atol=1e-13)
    # homogeneous Dirichlet data on all four sides
    assert np.all(np.abs(grid[0]) <= 1e-13)
    assert np.all(np.abs(grid[:, -1]) <= 1e-13)


def test_mesh_must_span_problem_domain(boundary_problem):
    with pytest.raises(BasisError):
        build_enriched_space(boundary_problem, build_uniform_mesh_1d(-1.0, 1.0, 4))


def test_dump_basis_csv(tmp_path, boundary_space):
    path = tmp_path / "basis.csv"
    dump_basis_csv(boundary_space, str(path), resolution=11, indices=[0, 1])
    lines = path.read_text().splitlines()
    assert lines[0] == "x,phi_0,phi_1"
    assert len(lines) == 12


def test_square_space_vanishes_on_boundary(square_problem):
    space = uniform_space(square_problem, 6)
    t = np.linspace(0.0, 1.0, 23)
    zeros, ones = np.zeros_like(t), np.ones_like(t)
    sides = [np.stack(side, axis=1) for side in ((t, zeros), (t, ones), (zeros, t), (ones, t))]
    values = space.basis_values(np.concatenate(sides))
    assert np.all(np.abs(values) <= 1e-13)


@pytest.mark.parametrize("name", ["paradigm", "boundary1d", "interior1d"])
def test_corrector_is_outside_nodal_span(name):
    problem = ProblemSpec.preset(name, 1e-3)
    space = uniform_space(problem, 16)
    x = np.linspace(*problem.domain, 2001)
    values = space.basis_values(x)
    corrector, hats = values[0], values[space.corrector_count:]
    coeffs, *_ = np.linalg.lstsq(hats.T, corrector, rcond=None)
    residual = np.linalg.norm(hats.T @ coeffs - corrector) / np.linalg.norm(corrector)
    assert residual > 1e-2


def test_partition_of_unity_on_interior_elements(boundary_problem, square_problem):
    space = uniform_space(boundary_problem, 8)
    for x in np.linspace(0.125, 0.875, 13):
        total = sum(nodal_eval(space, k, x)[0] for k in range(space.nodal_count))
        assert total == pytest.approx(1.0, abs=1e-13)
    square = uniform_space(square_problem, 4)
    for p in [(0.25, 0.25), (0.3, 0.6), (0.75, 0.5)]:
        total = sum(nodal_eval(square, k, p)[0] for k in range(square.nodal_count))
        assert total == pytest.approx(1.0, abs=1e-13)
