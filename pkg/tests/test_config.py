import json
import logging

import pytest
from pydantic import ValidationError

from app.config import Settings
from app.logging_config import configure_logging
from app.schemas import Convection, ProblemClass, ProblemSpec, RunConfig


def test_settings_read_environment(monkeypatch):
    monkeypatch.setenv("SERVE_PROBLEM", "interior1d")
    monkeypatch.setenv("SERVE_EPSILON", "1e-5")
    settings = Settings()
    assert settings.serve_problem == "interior1d"
    assert settings.serve_epsilon == 1e-5
    assert settings.reference_n_1d == 8192


def test_presets():
    problem = ProblemSpec.preset("paradigm", 1e-3)
    assert problem.domain == (-1.0, 1.0)
    assert problem.convection_at(0.3) == -1.0
    assert ProblemSpec.preset("boundary1d", 1e-3).convection_at(1.0) == 2.0
    assert ProblemSpec.preset("square2d", 1e-3).dimension == 2
    with pytest.raises(ValueError):
        ProblemSpec.preset("cube3d", 1e-3)


def test_problem_validation():
    with pytest.raises(ValidationError):
        ProblemSpec(problem_class=ProblemClass.BOUNDARY_1D, epsilon=0.0, convection=Convection.AFFINE)
    with pytest.raises(ValidationError):
        ProblemSpec(problem_class=ProblemClass.INTERIOR_1D, epsilon=1e-3, convection=Convection.AFFINE)


def test_run_config_defaults():
    config = RunConfig()
    assert config.epsilons == [1e-3, 1e-4, 1e-5, 1e-6]
    assert config.mesh_n == 100
    with pytest.raises(ValidationError):
        RunConfig(epsilons=[])


def test_json_logging(capsys):
    settings = Settings(log_json=True)
    configure_logging(settings, "INFO")
    logging.getLogger("efeo.test").info("assembled")
    line = capsys.readouterr().err.strip().splitlines()[-1]
    assert json.loads(line)["message"] == "assembled"
    configure_logging(Settings(), "WARNING")
