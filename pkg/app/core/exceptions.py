"""Domain exceptions raised by the numerical core."""
from typing import Optional, Sequence


class MeshError(ValueError):
    """Invalid mesh request."""


class BasisError(ValueError):
    """Invalid basis evaluation or unsupported problem class."""


class QuadratureError(RuntimeError):
    """Adaptive quadrature did not converge."""

    def __init__(self, message: str, indices: Optional[Sequence[int]] = None):
        self.indices = tuple(indices) if indices is not None else None
        if self.indices is not None:
            message = f"{message} (entry {self.indices})"
        super().__init__(message)


class SingularMatrixError(RuntimeError):
    """Matrix is singular to working precision."""

    def __init__(self, column: int):
        self.column = column
        super().__init__(f"Matrix is singular to working precision at pivot column {column}")


class NonFiniteError(ValueError):
    """A loss, load or integrand value is not finite."""

    def __init__(self, message: str, sample_index: Optional[int] = None):
        self.sample_index = sample_index
        if sample_index is not None:
            message = f"{message} (sample {sample_index})"
        super().__init__(message)


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or does not match the requested network."""
