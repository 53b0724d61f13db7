"""Shared fixtures: small problems, forcings and a ready operator engine."""
import logging

import pytest

from app.core.basis import uniform_space
from app.core.inference_engine import OperatorEngine
from app.schemas import ForcingParams, ProblemClass, ProblemSpec, SamplingSpec

logging.getLogger("app").setLevel(logging.WARNING)


@pytest.fixture
def boundary_problem():
    return ProblemSpec.preset("boundary1d", 1e-3)


@pytest.fixture
def paradigm_problem():
    return ProblemSpec.preset("paradigm", 1e-1)


@pytest.fixture
def interior_problem():
    return ProblemSpec.preset("interior1d", 1e-3)


@pytest.fixture
def square_problem():
    return ProblemSpec.preset("square2d", 1e-2)


@pytest.fixture
def boundary_space(boundary_problem):
    return uniform_space(boundary_problem, 16)


@pytest.fixture
def sample_forcing():
    """The forcing plotted in the one-dimensional examples."""
    return ForcingParams.parse("1.81,0.09,1.68,-1.78", ProblemClass.BOUNDARY_1D)


@pytest.fixture
def small_sampling():
    return SamplingSpec(samples=8, seed=3)


@pytest.fixture
def engine(boundary_problem):
    return OperatorEngine(boundary_problem, mesh_n=32, reference_n=256)
