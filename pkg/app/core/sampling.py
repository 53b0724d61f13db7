"""Random forcings f(x; omega) and their discretization into network inputs."""
import csv
import logging
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from app.schemas import ForcingParams, ProblemClass, SamplingSpec

logger = logging.getLogger(__name__)

# Purpose tags mixed into the seed sequence; train and test streams never overlap.
PURPOSES = {
    "train": 1,
    "fixed": 2,
    "test": 3,
    "solve": 4,
    "init": 5,
    "ladder": 6,
    "montecarlo": 7,
}


def make_rng(seed: int, purpose: str, index: int = 0) -> np.random.Generator:
    """
    Counter-based generator for draw ``index`` of stream ``purpose``.

    Philox keyed by SeedSequence([seed, purpose tag, index]) gives independent,
    platform-stable streams without shared state between draws.
    """
    if purpose not in PURPOSES:
        raise ValueError(f"Unknown sampling purpose '{purpose}', expected one of {sorted(PURPOSES)}")
    if seed < 0 or index < 0:
        raise ValueError("seed and index must be non-negative")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, PURPOSES[purpose], index])))


def sample_forcing(
    rng: np.random.Generator, spec: SamplingSpec, problem_class: ProblemClass
) -> ForcingParams:
    """Draw one forcing; interior-layer forcings carry the factor x so that f(0) = 0."""
    dimension = 2 if problem_class == ProblemClass.SQUARE_2D else 1
    names = ("m0", "m1", "n0", "n1") + (("n2", "n3") if dimension == 2 else ())
    values = {}
    for name in names:
        lo, hi = spec.range_of(name)
        values[name] = float(rng.uniform(lo, hi)) if hi > lo else float(lo)
    return ForcingParams(
        **values,
        dimension=dimension,
        compat_factor=problem_class == ProblemClass.INTERIOR_1D,
    )


def sample_forcings(
    spec: SamplingSpec,
    problem_class: ProblemClass,
    purpose: str = "train",
    count: Optional[int] = None,
    start: int = 0,
    seed: Optional[int] = None,
) -> List[ForcingParams]:
    """Draws ``start .. start + count`` of a stream; count defaults to ``spec.samples``."""
    count = spec.samples if count is None else count
    seed = spec.seed if seed is None else seed
    return [
        sample_forcing(make_rng(seed, purpose, start + i), spec, problem_class)
        for i in range(count)
    ]


def forcing_eval(f: ForcingParams, p) -> np.ndarray:
    """Evaluate f at points; 1D takes x, 2D takes (x, y) or an array of shape (..., 2)."""
    if f.dimension == 1:
        x = np.asarray(p, dtype=np.float64)
        value = f.m0 * np.sin(f.n0 * x) + f.m1 * np.cos(f.n1 * x)
        return x * value if f.compat_factor else value
    if isinstance(p, (tuple, list)) and len(p) == 2:
        x, y = (np.asarray(c, dtype=np.float64) for c in p)
    else:
        pts = np.asarray(p, dtype=np.float64)
        x, y = pts[..., 0], pts[..., 1]
    return f.m0 * np.sin(f.n0 * x + f.n1 * y) + f.m1 * np.cos(f.n2 * x + f.n3 * y)


def input_grid(domain: Tuple[float, float], resolution: int, dimension: int) -> np.ndarray:
    """Uniform points: (R,) in 1D, (R * R, 2) x-major in 2D."""
    if resolution < 2:
        raise ValueError(f"resolution must be >= 2, got {resolution}")
    axis = np.linspace(domain[0], domain[1], resolution)
    if dimension == 1:
        return axis
    xx, yy = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


def discretize_forcing(
    f: ForcingParams, resolution: int, domain: Tuple[float, float] = (0.0, 1.0)
) -> np.ndarray:
    """Values of f on the uniform input grid, flattened row-major (x-major) in 2D."""
    return forcing_eval(f, input_grid(domain, resolution, f.dimension))


def discretize_batch(
    forcings: Sequence[ForcingParams], resolution: int, domain: Tuple[float, float]
) -> np.ndarray:
    if not forcings:
        raise ValueError("empty forcing batch")
    grid = input_grid(domain, resolution, forcings[0].dimension)
    return np.stack([forcing_eval(f, grid) for f in forcings])


def write_samples_csv(path: str, forcings: Iterable[ForcingParams]) -> None:
    """One parameter row per sample."""
    forcings = list(forcings)
    dimension = forcings[0].dimension if forcings else 1
    header = ["index", "m0", "m1", "n0", "n1"] + (["n2", "n3"] if dimension == 2 else [])
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header + ["compat_factor"])
        for i, f in enumerate(forcings):
            writer.writerow([i] + [repr(v) for v in f.as_row()] + [int(f.compat_factor)])
