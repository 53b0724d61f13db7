"""End-to-end accuracy runs; each takes from seconds to minutes."""
import numpy as np
import pytest

from app.cli import main
from app.core.assembly import assemble_loads, assemble_matrix
from app.core.basis import uniform_space
from app.core.evaluation import ExperimentSpec, convergence_study, h_study, halving_ratios, run_experiment
from app.core.operator_net import NetworkParameters, init_network, load_checkpoint, residual_loss_and_grad
from app.core.sampling import discretize_batch, sample_forcings
from app.schemas import GridKind, NetworkConfig, ProblemSpec, SamplingSpec, SolverMode, TrainConfig
from app.services.training_service import TrainingService

pytestmark = pytest.mark.slow


def test_enriched_oracle_accuracy_boundary_layer():
    spec = ExperimentSpec(problem=ProblemSpec.preset("boundary1d", 1e-5), mesh_n=100, n_test=100)
    for report in run_experiment(spec):
        assert report.rel_l2_mean <= 1e-3


@pytest.mark.parametrize("name, factor", [("boundary1d", 1e-2), ("interior1d", 1e-1)])
def test_enrichment_ablation_gap(name, factor):
    spec = ExperimentSpec(
        problem=ProblemSpec.preset(name, 1e-5),
        mesh_n=100,
        modes=[SolverMode.ORACLE, SolverMode.PLAIN],
        grids=[GridKind.UNIFORM],
        n_test=20,
    )
    oracle, plain = run_experiment(spec)
    assert oracle.rel_l2_mean <= factor * plain.rel_l2_mean


def test_under_resolved_h1_trend():
    rungs = h_study(ProblemSpec.preset("boundary1d", 1e-4), ns=(32, 64, 128), n_test=5)
    for ratio in halving_ratios(rungs):
        assert 1.6 <= ratio <= 2.8


def test_square_oracle_accuracy():
    spec = ExperimentSpec(
        problem=ProblemSpec.preset("square2d", 1e-3), mesh_n=50, grids=[GridKind.UNIFORM], n_test=20, n_ref=256
    )
    (report,) = run_experiment(spec)
    assert report.rel_l2_mean <= 1e-2


@pytest.mark.parametrize("name", ["boundary1d", "interior1d", "square2d"])
def test_residual_gradient_on_assembled_systems(name):
    problem = ProblemSpec.preset(name, 1e-3)
    space = uniform_space(problem, 8)
    A = assemble_matrix(problem, space)
    forcings = sample_forcings(SamplingSpec(samples=6), problem.problem_class)
    F = assemble_loads(problem, space, forcings)
    inputs = discretize_batch(forcings, 9, problem.domain)
    net = init_network(NetworkConfig(input_dim=inputs.shape[1], output_dim=space.total_dim, widths=[6]), seed=4)
    _, grad = residual_loss_and_grad(net, A, inputs, F)
    params = NetworkParameters.from_network(net)
    rng = np.random.default_rng(0)
    h = 1e-6
    for j in rng.choice(params.vector.size, size=20, replace=False):
        values = []
        for sign in (1.0, -1.0):
            shifted = params.vector.copy()
            shifted[j] += sign * h
            NetworkParameters(params.names, params.shapes, shifted).load_into(net)
            values.append(residual_loss_and_grad(net, A, inputs, F)[0])
        fd = (values[0] - values[1]) / (2 * h)
        assert fd == pytest.approx(grad[j], rel=1e-5, abs=1e-8 * max(1.0, abs(values[0])))


async def test_training_viability(tmp_path):
    problem = ProblemSpec.preset("boundary1d", 1e-3)
    response = await TrainingService(str(tmp_path)).train(
        problem, 100, 201, SamplingSpec(samples=64), TrainConfig(samples=64, steps=200)
    )
    assert response.success
    net = load_checkpoint(response.result["checkpoint"])
    spec = ExperimentSpec(
        problem=problem, mesh_n=100, modes=[SolverMode.TRAINED], grids=[GridKind.UNIFORM], n_test=20, network=net
    )
    (report,) = run_experiment(spec)
    assert report.rel_l2_mean <= 1e-2


def test_capacity_ladder_trend():
    rungs = convergence_study(ProblemSpec.preset("boundary1d", 1e-3), n_test=20)
    errors = [r.oracle_error for r in rungs]
    for before, after in zip(errors[:-1], errors[1:]):
        assert after <= 1.2 * before
    assert errors[-1] < errors[0]


def test_reports_are_reproducible(tmp_path):
    args = ["eval", "--problem", "paradigm", "--epsilon", "1e-4", "--mesh-n", "32", "--n-test", "5",
            "--n-ref", "1024", "--modes", "oracle,plain", "--grids", "uniform,layer"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
