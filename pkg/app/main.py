"""Main FastAPI application."""
import logging
from contextlib import asynccontextmanager

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware

from app.api.routes import router, set_engine
from app.config import settings
from app.core.inference_engine import OperatorEngine
from app.logging_config import configure_logging
from app.schemas import ProblemSpec

configure_logging(settings)
logger = logging.getLogger(__name__)


@asynccontextmanager
async def lifespan(app: FastAPI):
    """
    Lifespan context manager for FastAPI application.

    Assembles and factorizes the served problem on startup and loads the
    network checkpoint when one is configured.
    """
    # Startup
    logger.info("Starting operator network server...")
    logger.info(f"Problem: {settings.serve_problem}, eps={settings.serve_epsilon:g}, n={settings.serve_mesh_n}")

    try:
        problem = ProblemSpec.preset(settings.serve_problem, settings.serve_epsilon)
        engine = OperatorEngine(
            problem=problem,
            mesh_n=settings.serve_mesh_n,
            checkpoint_path=settings.checkpoint_path,
            reference_n=settings.reference_n_1d if problem.dimension == 1 else settings.reference_n_2d,
            shishkin_sigma=settings.shishkin_sigma,
            reference_cache_dir=settings.reference_cache_dir,
            condition_warning=settings.condition_warning,
        )

        # Set global engine instance
        set_engine(engine)

        logger.info("Operator engine initialized successfully")
        logger.info(f"Server ready at http://{settings.host}:{settings.port}")

    except Exception as e:
        logger.error(f"Failed to initialize operator engine: {e}")
        raise

    yield

    # Shutdown
    logger.info("Shutting down operator network server...")


# Create FastAPI application
app = FastAPI(
    title=settings.app_name,
    version=settings.app_version,
    description="""
    Galerkin solver and operator-learning server for singularly perturbed
    convection-diffusion problems.

    ## Features

    - **Solve**: corrector-enriched (or plain) Galerkin solution for a forcing
    - **Reference**: layer-resolved solution on a Shishkin mesh
    - **Predict**: one-shot solution from a residual-trained coefficient network
    """,
    lifespan=lifespan,
)

# Add CORS middleware
app.add_middleware(
    CORSMiddleware,
    allow_origins=settings.allow_origins,
    allow_credentials=settings.allow_credentials,
    allow_methods=settings.allow_methods,
    allow_headers=settings.allow_headers,
)

# Include API router
app.include_router(router, prefix="/api")


@app.get("/")
async def root():
    """Root endpoint."""
    return {
        "name": settings.app_name,
        "version": settings.app_version,
        "status": "running",
        "docs": "/docs",
        "health": "/api/health",
    }
