"""API routes for the operator network server."""
import logging

from fastapi import APIRouter, Depends, HTTPException, status

from app import __version__
from app.core.inference_engine import OperatorEngine
from app.schemas import (
    HealthResponse,
    InferenceResponse,
    PredictRequest,
    SolveRequest,
)
from app.services.reference_service import ReferenceService
from app.services.solve_service import SolveService

logger = logging.getLogger(__name__)

router = APIRouter()

# Global engine instance (will be initialized on startup)
_engine: OperatorEngine = None


def get_engine() -> OperatorEngine:
    """Get the global operator engine instance."""
    if _engine is None:
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail="Operator engine not initialized"
        )
    return _engine


def set_engine(engine: OperatorEngine):
    """Set the global operator engine instance."""
    global _engine
    _engine = engine


@router.get("/health", response_model=HealthResponse)
async def health_check():
    """Health check endpoint."""
    try:
        engine = get_engine()
        return HealthResponse(
            status="healthy",
            model_loaded=engine.is_ready(),
            version=__version__,
            problem=engine.problem.name,
        )
    except HTTPException:
        return HealthResponse(
            status="unhealthy",
            model_loaded=False,
            version=__version__,
        )


@router.post("/v1/solve", response_model=InferenceResponse)
async def solve(
    request: SolveRequest,
    engine: OperatorEngine = Depends(get_engine),
):
    """
    Solve the Galerkin system for one forcing.

    Returns the solution sampled on a uniform grid together with its basis
    coefficients. ``enrich=false`` solves in the plain P1/Q1 space.
    """
    service = SolveService(engine)
    return await service.solve(request)


@router.post("/v1/reference", response_model=InferenceResponse)
async def reference(
    request: SolveRequest,
    engine: OperatorEngine = Depends(get_engine),
):
    """Layer-resolved reference solution on a Shishkin mesh."""
    service = ReferenceService(engine)
    return await service.reference(request)


@router.post("/v1/predict", response_model=InferenceResponse)
async def predict(
    request: PredictRequest,
    engine: OperatorEngine = Depends(get_engine),
):
    """One-shot prediction from the loaded network checkpoint."""
    if not engine.is_ready():
        raise HTTPException(
            status_code=status.HTTP_503_SERVICE_UNAVAILABLE,
            detail="No network checkpoint loaded"
        )
    service = SolveService(engine)
    return await service.predict(request)
