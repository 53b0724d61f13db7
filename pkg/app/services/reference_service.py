"""Service for Shishkin reference solutions."""
import logging
import time

from app.core.inference_engine import OperatorEngine
from app.schemas import InferenceResponse, SolveRequest
from app.services.solve_service import grid_payload

logger = logging.getLogger(__name__)


class ReferenceService:
    """Service for layer-resolved reference solutions."""

    def __init__(self, engine: OperatorEngine):
        self.engine = engine

    async def reference(self, request: SolveRequest) -> InferenceResponse:
        """
        Compute (or load from cache) the reference for one forcing.

        Nodal values are returned on the Shishkin mesh unless a resolution is
        requested, in which case the reference is interpolated onto a uniform grid.
        """
        try:
            started = time.perf_counter()
            (f,) = self.engine.prepare_forcings([request.forcing])
            ref = self.engine.reference(f, request.n_ref)
            if request.resolution:
                points = self.engine.output_points(request.resolution)
                result = grid_payload(points, ref(points))
            elif ref.dimension == 1:
                result = {"x": ref.axes[0].tolist(), "u": ref.values.tolist()}
            else:
                result = {"x": ref.axes[0].tolist(), "y": ref.axes[1].tolist(), "u": ref.values.tolist()}
            return InferenceResponse(
                success=True,
                result=result,
                metadata={
                    "task": "reference",
                    "problem": self.engine.problem.name,
                    "epsilon": self.engine.problem.epsilon,
                    "n_ref": int(ref.axes[0].size - 1),
                    "sigma": self.engine.shishkin_sigma,
                    "seconds": time.perf_counter() - started,
                },
            )

        except Exception as e:
            logger.error(f"Reference solve failed: {e}")
            return InferenceResponse(
                success=False,
                result=None,
                error=str(e),
            )
