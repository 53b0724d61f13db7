"""
Command line: solve | train | eval | sweep | reference | study | serve.

Configuration is merged as defaults < JSON document (--config) < flags and
validated before any computation. Exit codes: 0 success, 1 failure, 2 invalid
configuration.
"""
import argparse
import asyncio
import json
import logging
import os
import sys
from datetime import datetime, timezone
from typing import List, Optional

import numpy as np
from pydantic import ValidationError

from app import __version__
from app.config import settings
from app.core.evaluation import DEFAULT_RESOLUTION, ExperimentSpec, plot_data, write_plot_csv
from app.core.inference_engine import OperatorEngine
from app.core.operator_net import load_checkpoint
from app.core.sampling import make_rng, sample_forcing
from app.core.solvers import DEFAULT_REFERENCE_N, ReferenceCache, write_solution_csv
from app.logging_config import configure_logging
from app.schemas import (
    ForcingParams,
    NetworkConfig,
    PredictRequest,
    ProblemSpec,
    RunConfig,
    SolveRequest,
    SolverMode,
    TrainConfig,
)
from app.services.evaluation_service import EvaluationService
from app.services.reference_service import ReferenceService
from app.services.solve_service import SolveService
from app.services.training_service import TrainingService

logger = logging.getLogger(__name__)

COMMANDS = ["solve", "train", "eval", "sweep", "reference", "study", "serve"]
NEEDS_EPSILON = {"solve", "train", "eval", "reference", "study", "serve"}


class ConfigError(Exception):
    """Invalid configuration outside pydantic validation."""


def _csv_list(text: str) -> List[str]:
    return [item.strip() for item in text.split(",") if item.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="efeo", description="Layer-enriched Galerkin operator network")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        # every option defaults to SUPPRESS so only given flags override the JSON document
        p.add_argument("--config", help="JSON document with RunConfig fields")
        p.add_argument("--problem", default=argparse.SUPPRESS)
        p.add_argument("--epsilon", type=float, default=argparse.SUPPRESS)
        p.add_argument("--epsilons", type=_csv_list, default=argparse.SUPPRESS)
        p.add_argument("--mesh-n", dest="mesh_n", type=int, default=argparse.SUPPRESS)
        p.add_argument("--resolution", type=int, default=argparse.SUPPRESS)
        p.add_argument("--samples", type=int, default=argparse.SUPPRESS)
        p.add_argument("--mode", choices=["online", "fixed"], default=argparse.SUPPRESS)
        p.add_argument("--modes", type=_csv_list, default=argparse.SUPPRESS)
        p.add_argument("--grids", type=_csv_list, default=argparse.SUPPRESS)
        p.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        p.add_argument("--out", default=argparse.SUPPRESS)
        p.add_argument("--checkpoint", default=argparse.SUPPRESS)
        p.add_argument("--forcing", default=argparse.SUPPRESS, help='"m0,m1,n0,n1[,n2,n3]"')
        p.add_argument("--forcing-index", dest="forcing_index", type=int, default=argparse.SUPPRESS)
        p.add_argument("--n-test", dest="n_test", type=int, default=argparse.SUPPRESS)
        p.add_argument("--n-ref", dest="n_ref", type=int, default=argparse.SUPPRESS)
        p.add_argument("--input", choices=["forcing", "load"], default=argparse.SUPPRESS)
        p.add_argument("--no-enrich", dest="enrich", action="store_false", default=argparse.SUPPRESS)
        p.add_argument("--with-timing", dest="with_timing", action="store_true", default=argparse.SUPPRESS)
        p.add_argument("--log-level", dest="log_level", default=None)
        if name == "study":
            p.add_argument("--kind", choices=["ladder", "mesh"], default="ladder")
    return parser


def load_run_config(args: argparse.Namespace) -> RunConfig:
    """Merge the JSON document and flags into a validated RunConfig."""
    data: dict = {}
    if args.config:
        try:
            with open(args.config) as handle:
                data = json.load(handle)
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Cannot read config {args.config}: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"Config {args.config} must hold a JSON object")
    flags = {
        k: v for k, v in vars(args).items()
        if k not in ("command", "config", "log_level", "kind", "input")
    }
    data.update(flags)
    if "input" in vars(args):
        data["train"] = {**data.get("train", {}), "input_kind": args.input}
    return RunConfig.model_validate(data)


def train_config_of(config: RunConfig) -> TrainConfig:
    """TrainConfig from the ``train`` overrides; top-level samples, mode and seed win."""
    return TrainConfig.model_validate(
        {**config.train, "samples": config.samples, "mode": config.mode, "seed": config.seed}
    )


def problem_of(config: RunConfig, epsilon: Optional[float] = None) -> ProblemSpec:
    return ProblemSpec.preset(config.problem, epsilon if epsilon is not None else config.epsilon)


def resolution_of(config: RunConfig, problem: ProblemSpec) -> int:
    return config.resolution or DEFAULT_RESOLUTION[problem.dimension]


def forcing_of(config: RunConfig, problem: ProblemSpec) -> ForcingParams:
    """Explicit --forcing, else draw ``forcing_index`` of the solve stream."""
    if config.forcing:
        return ForcingParams.parse(config.forcing, problem.problem_class)
    sampling = config.sampling.model_copy(update={"seed": config.seed})
    return sample_forcing(make_rng(config.seed, "solve", config.forcing_index), sampling, problem.problem_class)


def write_metadata(out: str, command: str, config: RunConfig, started: datetime, extra: Optional[dict]) -> None:
    """Everything needed to rerun the command: config echo, seed and version."""
    document = {
        "command": command,
        "version": __version__,
        "config": config.model_dump(mode="json"),
        "seed": config.seed,
        "started": started.isoformat(),
        "finished": datetime.now(timezone.utc).isoformat(),
        "argv": sys.argv[1:],
        "reference": {
            "sigma": settings.shishkin_sigma,
            "n_ref": config.n_ref,
            "n_ref_default": {f"{d}d": n for d, n in DEFAULT_REFERENCE_N.items()},
        },
        "result": extra or {},
    }
    with open(os.path.join(out, "metadata.json"), "w") as handle:
        json.dump(document, handle, indent=2, sort_keys=True, default=str)


def _engine(config: RunConfig, problem: ProblemSpec, checkpoint: Optional[str] = None) -> OperatorEngine:
    return OperatorEngine(
        problem,
        config.mesh_n,
        checkpoint_path=checkpoint,
        input_kind=train_config_of(config).input_kind,
        resolution=config.resolution,
        reference_n=config.n_ref,
        shishkin_sigma=settings.shishkin_sigma,
        reference_cache_dir=settings.reference_cache_dir,
        condition_warning=settings.condition_warning,
    )


# --- commands ------------------------------------------------------------------

def cmd_solve(config: RunConfig):
    problem = problem_of(config)
    f = forcing_of(config, problem)
    engine = _engine(config, problem, config.checkpoint)
    service = SolveService(engine)
    if config.checkpoint:
        response = asyncio.run(service.predict(PredictRequest(forcing=f, resolution=config.resolution)))
    else:
        response = asyncio.run(
            service.solve(SolveRequest(forcing=f, resolution=config.resolution, enrich=config.enrich))
        )
    if response.success:
        result = response.result
        points = np.array(result["x"]) if "y" not in result else np.column_stack([result["x"], result["y"]])
        write_solution_csv(os.path.join(config.out, "solution.csv"), np.array(result["u"]), points)
        np.savetxt(os.path.join(config.out, "coefficients.txt"), np.array(result["coefficients"]), fmt="%.17g")
    return response


def cmd_train(config: RunConfig):
    problem = problem_of(config)
    sampling = config.sampling.model_copy(update={"seed": config.seed, "samples": config.samples})
    service = TrainingService(config.out)
    return asyncio.run(
        service.train(
            problem,
            config.mesh_n,
            resolution_of(config, problem),
            sampling,
            train_config_of(config),
            config.network,
            enrich=config.enrich,
            with_timing=config.with_timing,
        )
    )


def _experiment(config: RunConfig, problem: ProblemSpec) -> ExperimentSpec:
    modes = list(config.modes)
    network = None
    if config.checkpoint:
        network = load_checkpoint(config.checkpoint)
        if "modes" not in config.model_fields_set:
            modes = [SolverMode.TRAINED]
    if SolverMode.TRAINED in modes and network is None:
        raise ConfigError("trained mode needs --checkpoint")
    return ExperimentSpec(
        problem=problem,
        mesh_n=config.mesh_n,
        modes=modes,
        grids=list(config.grids),
        n_test=config.n_test,
        sampling=config.sampling.model_copy(update={"seed": config.seed}),
        resolution=config.resolution,
        n_ref=config.n_ref,
        sigma=settings.shishkin_sigma,
        network=network,
        input_kind=train_config_of(config).input_kind,
        samples=config.samples if network is not None else 0,
        cache=ReferenceCache(settings.reference_cache_dir) if settings.reference_cache_dir else None,
        with_timing=config.with_timing,
    )


def cmd_eval(config: RunConfig):
    problem = problem_of(config)
    spec = _experiment(config, problem)
    response = asyncio.run(EvaluationService(config.out).evaluate(spec))
    if response.success and config.forcing:
        f = ForcingParams.parse(config.forcing, problem.problem_class)
        for mode in spec.modes:
            points, pred, ref = plot_data(spec, f, mode)
            write_plot_csv(os.path.join(config.out, f"plot_{mode.value}.csv"), points, pred, ref)
    return response


def cmd_sweep(config: RunConfig):
    epsilons = [config.epsilon] if "epsilon" in config.model_fields_set else config.epsilons
    base = _experiment(config, problem_of(config, epsilons[0]))
    return asyncio.run(EvaluationService(config.out).sweep(config.problem, epsilons, base))


def cmd_reference(config: RunConfig):
    problem = problem_of(config)
    f = forcing_of(config, problem)
    engine = _engine(config, problem)
    response = asyncio.run(ReferenceService(engine).reference(SolveRequest(forcing=f, n_ref=config.n_ref)))
    if response.success:
        ref = engine.reference(f, config.n_ref)
        ref.save(os.path.join(config.out, "reference.npz"))
        if ref.dimension == 1:
            points = ref.axes[0]
        else:
            xx, yy = np.meshgrid(ref.axes[0], ref.axes[1], indexing="ij")
            points = np.column_stack([xx.ravel(), yy.ravel()])
        write_solution_csv(os.path.join(config.out, "reference.csv"), ref.values.ravel(), points)
    return response


def cmd_study(config: RunConfig, kind: str):
    problem = problem_of(config)
    service = EvaluationService(config.out)
    sampling = config.sampling.model_copy(update={"seed": config.seed})
    if kind == "mesh":
        return asyncio.run(service.mesh_study(problem, sampling, config.n_test))
    train_config = train_config_of(config)
    if "mode" not in config.model_fields_set:
        train_config = train_config.model_copy(update={"mode": "fixed"})
    return asyncio.run(
        service.ladder(problem, config.mesh_n, train_config, sampling, config.n_test, config.resolution)
    )


def cmd_serve(config: RunConfig) -> int:
    import uvicorn

    settings.serve_problem = config.problem
    settings.serve_epsilon = config.epsilon
    settings.serve_mesh_n = config.mesh_n
    if config.checkpoint:
        settings.checkpoint_path = config.checkpoint
    uvicorn.run("app.main:app", host=settings.host, port=settings.port, log_level=settings.log_level.lower())
    return 0


def _print_validation(error: ValidationError, prefix: str = "") -> None:
    for item in error.errors():
        parts = ([prefix] if prefix else []) + [str(part) for part in item["loc"]]
        path = ".".join(parts) or "<root>"
        print(f"config error at {path}: {item['msg']}", file=sys.stderr)


def validate(args: argparse.Namespace) -> RunConfig:
    """RunConfig plus every nested override, checked before any computation."""
    try:
        config = load_run_config(args)
    except ValidationError as e:
        _print_validation(e)
        raise ConfigError("invalid configuration") from e
    sections = (
        ("train", lambda: train_config_of(config)),
        ("network", lambda: NetworkConfig.model_validate({"input_dim": 1, "output_dim": 1, **config.network})),
    )
    for prefix, check in sections:
        try:
            check()
        except ValidationError as e:
            _print_validation(e, prefix)
            raise ConfigError(f"invalid {prefix} configuration") from e
    if args.command in NEEDS_EPSILON and config.epsilon is None:
        raise ConfigError(f"{args.command} needs --epsilon")
    if config.forcing:
        problem_class = ProblemSpec.preset(config.problem, config.epsilon or 1.0).problem_class
        try:
            ForcingParams.parse(config.forcing, problem_class)
        except ValueError as e:
            raise ConfigError(f"forcing: {e}") from e
    return config


COMMAND_HANDLERS = {
    "solve": cmd_solve,
    "train": cmd_train,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "reference": cmd_reference,
}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(settings, args.log_level)

    try:
        config = validate(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2

    if args.command == "serve":
        return cmd_serve(config)

    try:
        os.makedirs(config.out, exist_ok=True)
        probe = os.path.join(config.out, ".write-test")
        with open(probe, "w"):
            pass
        os.remove(probe)
    except OSError as e:
        print(f"Cannot write to {config.out}: {e}", file=sys.stderr)
        return 1

    started = datetime.now(timezone.utc)
    try:
        if args.command == "study":
            response = cmd_study(config, args.kind)
        else:
            response = COMMAND_HANDLERS[args.command](config)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return 1

    if not response.success:
        print(f"error: {response.error}", file=sys.stderr)
        return 1
    write_metadata(config.out, args.command, config, started, {**(response.metadata or {}), "result": response.result})
    print(json.dumps(response.result, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
