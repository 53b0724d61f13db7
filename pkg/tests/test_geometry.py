import math

import numpy as np
import pytest

from app.core.exceptions import MeshError
from app.core.geometry import (
    Mesh1D,
    build_shishkin_mesh_1d,
    build_tensor_mesh_2d,
    build_uniform_mesh_1d,
    shishkin_transition,
)
from app.schemas import LayerSide, ShishkinSpec


def test_uniform_mesh_nodes():
    mesh = build_uniform_mesh_1d(0.0, 1.0, 4)
    np.testing.assert_array_equal(mesh.nodes, [0.0, 0.25, 0.5, 0.75, 1.0])
    assert mesh.element_count == 4
    assert mesh.h == pytest.approx(0.25)
    assert mesh.boundary_indices == (0, 4)


@pytest.mark.parametrize("a, b, n", [(1.0, 0.0, 4), (0.0, 1.0, 1)])
def test_uniform_mesh_rejects_bad_input(a, b, n):
    with pytest.raises(MeshError):
        build_uniform_mesh_1d(a, b, n)


def test_mesh_rejects_unsorted_nodes():
    with pytest.raises(MeshError):
        Mesh1D(np.array([0.0, 0.6, 0.5, 1.0]))


def test_shared_node_belongs_to_left_element():
    mesh = build_uniform_mesh_1d(0.0, 1.0, 2)
    np.testing.assert_array_equal(mesh.locate(np.array([0.0, 0.25, 0.5, 1.0])), [0, 0, 0, 1])


def test_shishkin_right_layer():
    eps = 1e-3
    spec = ShishkinSpec(n=8, layer_sides=[LayerSide.RIGHT])
    mesh = build_shishkin_mesh_1d(0.0, 1.0, spec, eps)
    tau = 2e-3 * math.log(8)
    assert mesh.nodes.size == 9
    assert mesh.nodes[4] == pytest.approx(1.0 - tau)
    np.testing.assert_allclose(np.diff(mesh.nodes[4:]), tau / 4)
    np.testing.assert_allclose(np.diff(mesh.nodes[:5]), (1.0 - tau) / 4)


def test_shishkin_left_layer_mirrors_right():
    spec_left = ShishkinSpec(n=16, layer_sides=[LayerSide.LEFT])
    spec_right = ShishkinSpec(n=16, layer_sides=[LayerSide.RIGHT])
    left = build_shishkin_mesh_1d(-1.0, 1.0, spec_left, 1e-4).nodes
    right = build_shishkin_mesh_1d(-1.0, 1.0, spec_right, 1e-4).nodes
    np.testing.assert_allclose(left, -right[::-1], atol=1e-14)


def test_shishkin_transition_is_clamped():
    spec = ShishkinSpec(n=8, layer_sides=[LayerSide.RIGHT])
    tau, cap = shishkin_transition(1.0, spec, 1.0)
    assert tau == cap == 0.5
    mesh = build_shishkin_mesh_1d(0.0, 1.0, spec, 1.0)
    np.testing.assert_allclose(mesh.nodes, np.linspace(0.0, 1.0, 9))


def test_shishkin_interior_band():
    eps = 1e-4
    spec = ShishkinSpec(n=16, layer_sides=[LayerSide.INTERIOR], interior_center=0.0)
    mesh = build_shishkin_mesh_1d(-1.0, 1.0, spec, eps)
    tau = 2.0 * math.sqrt(eps) * math.log(16)
    assert mesh.nodes[4] == pytest.approx(-tau)
    assert mesh.nodes[8] == pytest.approx(0.0, abs=1e-15)
    assert mesh.nodes[12] == pytest.approx(tau)


def test_shishkin_two_layers():
    spec = ShishkinSpec(n=8, layer_sides=[LayerSide.LEFT, LayerSide.RIGHT])
    mesh = build_shishkin_mesh_1d(0.0, 1.0, spec, 1e-3)
    tau = 2e-3 * math.log(8)
    assert mesh.nodes[2] == pytest.approx(tau)
    assert mesh.nodes[6] == pytest.approx(1.0 - tau)


@pytest.mark.parametrize("n, sides", [(7, [LayerSide.RIGHT]), (6, [LayerSide.INTERIOR])])
def test_shishkin_spec_element_counts(n, sides):
    with pytest.raises(ValueError):
        ShishkinSpec(n=n, layer_sides=sides)


def test_shishkin_rejects_nonpositive_eps():
    with pytest.raises(MeshError):
        build_shishkin_mesh_1d(0.0, 1.0, ShishkinSpec(n=8, layer_sides=[LayerSide.LEFT]), 0.0)


def test_tensor_mesh_interior_numbering():
    mesh = build_tensor_mesh_2d(51, 51)
    assert mesh.interior_count == 2500
    assert mesh.interior_node_index[(1, 1)] == 0
    assert mesh.interior_node_index[(1, 2)] == 1
    assert mesh.interior_node_index[(2, 1)] == 50
    assert mesh.cells.shape == (51 * 51, 4)


def test_tensor_mesh_checks_given_axes():
    with pytest.raises(MeshError):
        build_tensor_mesh_2d(2, 2, x_nodes=np.array([0.0, 0.5, 0.9]))
    with pytest.raises(MeshError):
        build_tensor_mesh_2d(3, 2, x_nodes=np.array([0.0, 0.5, 1.0]))


def test_mesh_csv(tmp_path):
    path = tmp_path / "mesh.csv"
    build_uniform_mesh_1d(0.0, 1.0, 4).to_csv(str(path))
    lines = path.read_text().splitlines()
    assert lines[0] == "x"
    assert len(lines) == 6
