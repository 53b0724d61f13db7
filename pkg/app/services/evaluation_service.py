"""Service for error reports, epsilon sweeps and convergence studies."""
import logging
import os
from typing import Optional, Sequence

from app.core.evaluation import (
    ExperimentSpec,
    convergence_study,
    h_study,
    halving_ratios,
    run_experiment,
    summarize,
    sweep,
    write_ladder_csv,
    write_mesh_study_csv,
    write_reports_csv,
)
from app.schemas import InferenceResponse, ProblemSpec, SamplingSpec, TrainConfig

logger = logging.getLogger(__name__)

REPORT_NAME = "report.csv"


class EvaluationService:
    """Runs experiments and writes their report CSVs to ``out_dir``."""

    def __init__(self, out_dir: str):
        self.out_dir = out_dir

    def _failure(self, task: str, e: Exception) -> InferenceResponse:
        logger.error(f"{task} failed: {e}")
        return InferenceResponse(success=False, result=None, error=str(e))

    async def evaluate(self, spec: ExperimentSpec) -> InferenceResponse:
        """One problem at one epsilon, every requested mode and grid."""
        try:
            reports = run_experiment(spec)
            path = os.path.join(self.out_dir, REPORT_NAME)
            write_reports_csv(path, reports)
            return InferenceResponse(
                success=True,
                result={"report": path, "rows": len(reports), "rel_l2": summarize(reports)},
                metadata={"task": "eval", "problem": spec.problem.name, "epsilon": spec.problem.epsilon},
            )
        except Exception as e:
            return self._failure("Evaluation", e)

    async def sweep(self, problem_name: str, epsilons: Sequence[float], base: ExperimentSpec) -> InferenceResponse:
        """run_experiment over every epsilon."""
        try:
            reports = sweep(problem_name, epsilons, base)
            path = os.path.join(self.out_dir, REPORT_NAME)
            write_reports_csv(path, reports)
            return InferenceResponse(
                success=True,
                result={"report": path, "rows": len(reports)},
                metadata={"task": "sweep", "problem": problem_name, "epsilons": list(epsilons)},
            )
        except Exception as e:
            return self._failure("Sweep", e)

    async def ladder(
        self,
        problem: ProblemSpec,
        mesh_n: int,
        train_config: TrainConfig,
        sampling: SamplingSpec,
        n_test: int,
        resolution: Optional[int] = None,
    ) -> InferenceResponse:
        """Capacity ladder measured against the oracle."""
        try:
            rungs = convergence_study(
                problem, mesh_n=mesh_n, train_config=train_config, sampling=sampling,
                n_test=n_test, resolution=resolution,
            )
            path = os.path.join(self.out_dir, "ladder.csv")
            write_ladder_csv(path, rungs)
            return InferenceResponse(
                success=True,
                result={"report": path, "errors": [r.oracle_error for r in rungs]},
                metadata={"task": "ladder", "problem": problem.name, "epsilon": problem.epsilon},
            )
        except Exception as e:
            return self._failure("Convergence study", e)

    async def mesh_study(self, problem: ProblemSpec, sampling: SamplingSpec, n_test: int) -> InferenceResponse:
        """H1 error of the enriched oracle under mesh halving."""
        try:
            rungs = h_study(problem, sampling=sampling, n_test=n_test)
            path = os.path.join(self.out_dir, "h_study.csv")
            write_mesh_study_csv(path, rungs)
            return InferenceResponse(
                success=True,
                result={"report": path, "ratios": halving_ratios(rungs)},
                metadata={"task": "h_study", "problem": problem.name, "epsilon": problem.epsilon},
            )
        except Exception as e:
            return self._failure("Mesh study", e)
