"""Pydantic schemas for problem descriptions, run configuration and responses."""
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, Field, field_validator, model_validator

from app.config import settings


class ProblemClass(str, Enum):
    """Supported problem classes."""
    BOUNDARY_1D = "boundary1d"
    INTERIOR_1D = "interior1d"
    SQUARE_2D = "square2d"


class Convection(str, Enum):
    """Convection coefficient b(x) of -eps u'' + b u' = f."""
    CONST_NEG = "const_neg"      # b = -1
    AFFINE = "affine"            # b = x + 1
    LINEAR_NEG = "linear_neg"    # b = -x
    CONST_VEC = "const_vec"      # b = (-1, -1)


# (b0, b1) per axis with b(x) = b0 + b1 * x
CONVECTION_COEFFICIENTS = {
    Convection.CONST_NEG: ((-1.0, 0.0),),
    Convection.AFFINE: ((1.0, 1.0),),
    Convection.LINEAR_NEG: ((0.0, -1.0),),
    Convection.CONST_VEC: ((-1.0, 0.0), (-1.0, 0.0)),
}

ALLOWED_CONVECTION = {
    ProblemClass.BOUNDARY_1D: {Convection.CONST_NEG, Convection.AFFINE},
    ProblemClass.INTERIOR_1D: {Convection.LINEAR_NEG},
    ProblemClass.SQUARE_2D: {Convection.CONST_VEC},
}


class ProblemSpec(BaseModel):
    """Singularly perturbed convection-diffusion problem -eps div(grad u) + b . grad u = f."""
    problem_class: ProblemClass
    epsilon: float = Field(..., gt=0, description="Singular perturbation parameter")
    convection: Convection
    domain: Tuple[float, float] = Field((0.0, 1.0), description="Interval (per axis in 2D)")
    name: str = Field("", description="Preset name")

    model_config = {"frozen": True}

    @model_validator(mode="after")
    def _check_consistency(self) -> "ProblemSpec":
        if self.convection not in ALLOWED_CONVECTION[self.problem_class]:
            raise ValueError(
                f"convection {self.convection.value} does not belong to "
                f"problem class {self.problem_class.value}"
            )
        if not self.domain[0] < self.domain[1]:
            raise ValueError(f"empty domain {self.domain}")
        return self

    @property
    def dimension(self) -> int:
        return 2 if self.problem_class == ProblemClass.SQUARE_2D else 1

    def convection_poly(self, axis: int = 0) -> Tuple[float, float]:
        """Coefficients (b0, b1) of the convection component along ``axis``."""
        return CONVECTION_COEFFICIENTS[self.convection][axis]

    def convection_at(self, x: float, axis: int = 0) -> float:
        b0, b1 = self.convection_poly(axis)
        return b0 + b1 * x

    @classmethod
    def preset(cls, name: str, epsilon: float) -> "ProblemSpec":
        """Build one of the named benchmark problems."""
        presets = {
            "paradigm": (ProblemClass.BOUNDARY_1D, Convection.CONST_NEG, (-1.0, 1.0)),
            "boundary1d": (ProblemClass.BOUNDARY_1D, Convection.AFFINE, (0.0, 1.0)),
            "interior1d": (ProblemClass.INTERIOR_1D, Convection.LINEAR_NEG, (-1.0, 1.0)),
            "square2d": (ProblemClass.SQUARE_2D, Convection.CONST_VEC, (0.0, 1.0)),
        }
        if name not in presets:
            raise ValueError(f"Unknown problem '{name}', expected one of {sorted(presets)}")
        problem_class, convection, domain = presets[name]
        return cls(
            problem_class=problem_class,
            epsilon=epsilon,
            convection=convection,
            domain=domain,
            name=name,
        )


PROBLEM_NAMES = ["paradigm", "boundary1d", "interior1d", "square2d"]


class LayerSide(str, Enum):
    """Location of a layer resolved by a Shishkin mesh."""
    LEFT = "left"
    RIGHT = "right"
    INTERIOR = "interior"


class ShishkinSpec(BaseModel):
    """Piecewise-uniform layer-adapted mesh parameters."""
    n: int = Field(..., ge=2, description="Element count (even)")
    sigma: float = Field(2.0, gt=0, description="Mesh constant")
    beta: float = Field(1.0, gt=0, description="Lower bound of |b| near the layer")
    layer_sides: List[LayerSide] = Field(..., min_length=1, max_length=2)
    interior_center: float = Field(0.0, description="Layer position for interior layers")

    @model_validator(mode="after")
    def _check(self) -> "ShishkinSpec":
        if self.n % 2:
            raise ValueError(f"Shishkin mesh needs an even element count, got {self.n}")
        if LayerSide.INTERIOR in self.layer_sides and len(self.layer_sides) > 1:
            raise ValueError("An interior layer cannot be combined with boundary layers")
        if (len(self.layer_sides) == 2 or LayerSide.INTERIOR in self.layer_sides) and self.n % 4:
            raise ValueError(f"Three-piece Shishkin mesh needs n divisible by 4, got {self.n}")
        return self


class ForcingParams(BaseModel):
    """Random parameters of f(x) = m0 sin(n0 x) + m1 cos(n1 x) or its 2D analogue."""
    m0: float
    m1: float
    n0: float
    n1: float
    n2: float = 0.0
    n3: float = 0.0
    dimension: int = Field(1, ge=1, le=2)
    compat_factor: bool = Field(False, description="Multiply f by x so that f(0) = 0")

    model_config = {"frozen": True}

    @field_validator("m0", "m1", "n0", "n1", "n2", "n3")
    @classmethod
    def _finite(cls, value: float) -> float:
        if value != value or value in (float("inf"), float("-inf")):
            raise ValueError("forcing parameters must be finite")
        return value

    def as_row(self) -> List[float]:
        if self.dimension == 1:
            return [self.m0, self.m1, self.n0, self.n1]
        return [self.m0, self.m1, self.n0, self.n1, self.n2, self.n3]

    @classmethod
    def parse(cls, text: str, problem_class: ProblemClass) -> "ForcingParams":
        """Parse ``"m0,m1,n0,n1[,n2,n3]"`` as given on the command line."""
        values = [float(v) for v in text.split(",") if v.strip()]
        if problem_class == ProblemClass.SQUARE_2D:
            if len(values) != 6:
                raise ValueError("2D forcing needs 6 values: m0,m1,n0,n1,n2,n3")
            m0, m1, n0, n1, n2, n3 = values
            return cls(m0=m0, m1=m1, n0=n0, n1=n1, n2=n2, n3=n3, dimension=2)
        if len(values) != 4:
            raise ValueError("1D forcing needs 4 values: m0,m1,n0,n1")
        m0, m1, n0, n1 = values
        return cls(
            m0=m0, m1=m1, n0=n0, n1=n1,
            compat_factor=problem_class == ProblemClass.INTERIOR_1D,
        )


FORCING_PARAMETERS = ("m0", "m1", "n0", "n1", "n2", "n3")


def _check_interval(value: Tuple[float, float]) -> Tuple[float, float]:
    lo, hi = value
    if not (lo <= hi) or abs(lo) == float("inf") or abs(hi) == float("inf"):
        raise ValueError(f"range {value} must be a finite interval with lo <= hi")
    return value


class SamplingSpec(BaseModel):
    """Uniform ranges of the forcing parameters."""
    amplitude_range: Tuple[float, float] = (-2.0, 2.0)
    frequency_range: Tuple[float, float] = (-2.0, 2.0)
    parameter_ranges: Dict[str, Tuple[float, float]] = Field(
        default_factory=dict, description="Per-parameter ranges overriding the two above"
    )
    samples: int = Field(64, ge=1, description="Samples per batch (M)")
    seed: int = 0

    @field_validator("amplitude_range", "frequency_range")
    @classmethod
    def _interval(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        return _check_interval(value)

    @field_validator("parameter_ranges")
    @classmethod
    def _known_parameters(cls, value: Dict[str, Tuple[float, float]]) -> Dict[str, Tuple[float, float]]:
        for name, interval in value.items():
            if name not in FORCING_PARAMETERS:
                raise ValueError(f"unknown forcing parameter '{name}'")
            _check_interval(interval)
        return value

    def range_of(self, name: str) -> Tuple[float, float]:
        if name in self.parameter_ranges:
            return self.parameter_ranges[name]
        return self.amplitude_range if name.startswith("m") else self.frequency_range


class Architecture(str, Enum):
    MLP = "mlp"
    CONV1D = "conv1d"
    CONV2D = "conv2d"


class NetworkConfig(BaseModel):
    """Coefficient network layout."""
    architecture: Architecture = Architecture.MLP
    input_dim: int = Field(..., ge=1)
    output_dim: int = Field(..., ge=1)
    widths: List[int] = Field(default_factory=lambda: [64, 64], description="Hidden MLP widths")
    channels: int = Field(16, description="Channels of every convolutional layer")
    conv_layers: int = Field(6, description="Number of convolutional layers")
    kernel_size: int = Field(5, ge=1)
    activation: str = "swish"

    @field_validator("widths")
    @classmethod
    def _positive_widths(cls, value: List[int]) -> List[int]:
        if any(w <= 0 for w in value):
            raise ValueError(f"zero-width layer in {value}")
        return value

    @model_validator(mode="after")
    def _check(self) -> "NetworkConfig":
        if self.architecture != Architecture.MLP and (self.channels <= 0 or self.conv_layers <= 0):
            raise ValueError("convolutional networks need positive channels and layers")
        if self.activation != "swish":
            raise ValueError(f"unsupported activation {self.activation}")
        return self


class Optimizer(str, Enum):
    LBFGS = "lbfgs"
    ADAM = "adam"


class TrainMode(str, Enum):
    ONLINE = "online"
    FIXED = "fixed"


class InputKind(str, Enum):
    FORCING = "forcing"
    LOAD = "load"


class TrainConfig(BaseModel):
    """Optimizer settings for residual training."""
    optimizer: Optimizer = Optimizer.LBFGS
    learning_rate: float = Field(0.1, gt=0)
    max_iter: int = Field(100, ge=1, description="Iterations per optimization step")
    history_size: int = Field(100, ge=1)
    steps: int = Field(200, ge=1)
    samples: int = Field(64, ge=1, description="Samples per step (M)")
    mode: TrainMode = TrainMode.ONLINE
    seed: int = 0
    tolerance: float = Field(1e-14, ge=0, description="Stop once the loss falls below this value")
    precondition: bool = False
    input_kind: InputKind = InputKind.FORCING


class SolverMode(str, Enum):
    ORACLE = "oracle"
    TRAINED = "trained"
    PLAIN = "plain"


class GridKind(str, Enum):
    UNIFORM = "uniform"
    LAYER = "layer"


class ErrorReport(BaseModel):
    """Aggregated relative L2 error of one solver mode on a set of test forcings."""
    problem: str
    epsilon: float
    mode: SolverMode
    mesh_n: int
    samples: int = Field(0, description="Training samples per step (M); 0 for solvers")
    grid: GridKind
    rel_l2_mean: float = Field(..., ge=0)
    rel_l2_std: float = Field(..., ge=0)
    n_test: int = Field(..., ge=1)
    seconds: float = 0.0


class RunConfig(BaseModel):
    """Command-scoped settings, validated before any computation."""
    problem: str = "boundary1d"
    epsilon: Optional[float] = Field(None, gt=0)
    mesh_n: int = Field(100, ge=2)
    resolution: Optional[int] = Field(None, ge=2)
    samples: int = Field(64, ge=1)
    mode: TrainMode = TrainMode.ONLINE
    modes: List[SolverMode] = Field(default_factory=lambda: [SolverMode.ORACLE])
    epsilons: List[float] = Field(default_factory=lambda: [1e-3, 1e-4, 1e-5, 1e-6])
    grids: List[GridKind] = Field(default_factory=lambda: [GridKind.UNIFORM])
    seed: int = 0
    out: str = Field(default_factory=lambda: settings.output_dir)
    checkpoint: Optional[str] = None
    forcing: Optional[str] = None
    forcing_index: int = 0
    n_test: int = Field(100, ge=1)
    n_ref: Optional[int] = None
    enrich: bool = True
    with_timing: bool = False
    sampling: SamplingSpec = Field(default_factory=SamplingSpec)
    network: dict = Field(default_factory=dict, description="NetworkConfig overrides")
    train: dict = Field(default_factory=dict, description="TrainConfig overrides")

    @field_validator("problem")
    @classmethod
    def _known_problem(cls, value: str) -> str:
        if value not in PROBLEM_NAMES:
            raise ValueError(f"unknown problem '{value}', expected one of {PROBLEM_NAMES}")
        return value

    @field_validator("epsilons")
    @classmethod
    def _positive(cls, value: List[float]) -> List[float]:
        if not value or any(e <= 0 for e in value):
            raise ValueError("epsilons must be a non-empty list of positive values")
        return value


class SolveRequest(BaseModel):
    """Request for an oracle, plain or reference solve."""
    forcing: ForcingParams
    resolution: Optional[int] = Field(None, ge=2, description="Output grid resolution per axis")
    enrich: bool = Field(True, description="Use the corrector-enriched space")
    n_ref: Optional[int] = Field(None, description="Reference resolution (reference solves only)")


class PredictRequest(BaseModel):
    """Request for a one-shot network prediction."""
    forcing: ForcingParams
    resolution: Optional[int] = Field(None, ge=2)


class InferenceResponse(BaseModel):
    """Base response."""
    success: bool = Field(..., description="Whether the request was successful")
    result: Any = Field(..., description="Result payload")
    error: Optional[str] = Field(None, description="Error message if failed")
    metadata: Optional[dict] = Field(None, description="Additional metadata")


class HealthResponse(BaseModel):
    """Health check response."""
    status: str = Field(..., description="Service status")
    model_loaded: bool = Field(..., description="Whether a network checkpoint is loaded")
    version: str = Field(..., description="API version")
    problem: Optional[str] = None
