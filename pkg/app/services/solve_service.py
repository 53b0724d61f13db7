"""Service for Galerkin solves and network predictions."""
import logging
import time

import numpy as np

from app.core.inference_engine import OperatorEngine
from app.schemas import InferenceResponse, PredictRequest, SolveRequest

logger = logging.getLogger(__name__)


def grid_payload(points: np.ndarray, values: np.ndarray) -> dict:
    """Sampled solution as JSON lists: x[, y] and u."""
    if points.ndim == 1:
        return {"x": points.tolist(), "u": values.tolist()}
    return {"x": points[:, 0].tolist(), "y": points[:, 1].tolist(), "u": values.tolist()}


class SolveService:
    """Service for oracle, plain FEM and network solutions."""

    def __init__(self, engine: OperatorEngine):
        """
        Initialize solve service.

        Args:
            engine: Operator engine instance
        """
        self.engine = engine

    async def solve(self, request: SolveRequest) -> InferenceResponse:
        """
        Solve the Galerkin system for one forcing.

        Args:
            request: Solve request

        Returns:
            Inference response with the sampled solution and its coefficients
        """
        try:
            started = time.perf_counter()
            (f,) = self.engine.prepare_forcings([request.forcing])
            coeffs = self.engine.solve([f], enrich=request.enrich)[0]
            points = self.engine.output_points(request.resolution)
            values = self.engine.evaluate(coeffs, points, enrich=request.enrich)
            result = grid_payload(points, values)
            result["coefficients"] = coeffs.tolist()
            return InferenceResponse(
                success=True,
                result=result,
                metadata={
                    "task": "oracle" if request.enrich else "plain",
                    "problem": self.engine.problem.name,
                    "epsilon": self.engine.problem.epsilon,
                    "mesh_n": self.engine.mesh_n,
                    "total_dim": int(coeffs.size),
                    "forcing": f.model_dump(),
                    "seconds": time.perf_counter() - started,
                },
            )

        except Exception as e:
            logger.error(f"Solve failed: {e}")
            return InferenceResponse(
                success=False,
                result=None,
                error=str(e),
            )

    async def predict(self, request: PredictRequest) -> InferenceResponse:
        """One-shot prediction from the loaded network."""
        try:
            started = time.perf_counter()
            (f,) = self.engine.prepare_forcings([request.forcing])
            coeffs = self.engine.predict([f])[0]
            points = self.engine.output_points(request.resolution)
            result = grid_payload(points, self.engine.evaluate(coeffs, points))
            result["coefficients"] = coeffs.tolist()
            return InferenceResponse(
                success=True,
                result=result,
                metadata={
                    "task": "predict",
                    "problem": self.engine.problem.name,
                    "epsilon": self.engine.problem.epsilon,
                    "mesh_n": self.engine.mesh_n,
                    "seconds": time.perf_counter() - started,
                },
            )

        except Exception as e:
            logger.error(f"Prediction failed: {e}")
            return InferenceResponse(
                success=False,
                result=None,
                error=str(e),
            )
