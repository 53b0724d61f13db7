"""
Coefficient network alpha(f) trained on the Galerkin residual.

The network maps a discretized forcing (or its load vector) to the expansion
coefficients of the enriched space. Since B[u, phi_i] is linear in u, the
residual loss over test functions collapses to mean_m ||A alpha_m - F_m||^2
and needs neither reference solutions nor oracle solves.
"""
import csv
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
import torch
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from app.core.assembly import assemble_loads
from app.core.basis import EnrichedSpace
from app.core.exceptions import CheckpointError, NonFiniteError
from app.core.quadrature import layer_quadrature
from app.core.sampling import discretize_batch, sample_forcings
from app.schemas import (
    Architecture,
    ForcingParams,
    InputKind,
    NetworkConfig,
    Optimizer,
    ProblemSpec,
    SamplingSpec,
    TrainConfig,
    TrainMode,
)

logger = logging.getLogger(__name__)

DTYPE = torch.float64
CHECKPOINT_MAGIC = b"EFEO1\n"
CHECKPOINT_VERSION = 1


class OperatorNetwork(nn.Module):
    """MLP or strided convolutional encoder followed by a linear head, in float64."""

    def __init__(self, config: NetworkConfig):
        super().__init__()
        self.config = config
        self.activation = nn.SiLU()
        if config.architecture == Architecture.MLP:
            widths = [config.input_dim] + list(config.widths) + [config.output_dim]
            self.layers = nn.ModuleList(nn.Linear(w_in, w_out) for w_in, w_out in zip(widths[:-1], widths[1:]))
            self.encoder = None
            self.head = None
        else:
            conv = nn.Conv1d if config.architecture == Architecture.CONV1D else nn.Conv2d
            self.input_shape = self._input_shape(config)
            blocks = []
            channels = 1
            for _ in range(config.conv_layers):
                blocks += [
                    conv(channels, config.channels, config.kernel_size, stride=2, padding=config.kernel_size // 2),
                    nn.SiLU(),
                ]
                channels = config.channels
            self.encoder = nn.Sequential(*blocks, nn.Flatten())
            with torch.no_grad():
                features = self.encoder(torch.zeros((1, 1) + self.input_shape)).shape[1]
            self.head = nn.Linear(features, config.output_dim)
            self.layers = None
        self.to(DTYPE)

    @staticmethod
    def _input_shape(config: NetworkConfig) -> Tuple[int, ...]:
        if config.architecture == Architecture.CONV1D:
            return (config.input_dim,)
        side = math.isqrt(config.input_dim)
        if side * side != config.input_dim:
            raise ValueError(f"conv2d needs a square input, got input_dim={config.input_dim}")
        return (side, side)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.config.input_dim:
            raise ValueError(f"Input has dimension {x.shape[-1]}, network expects {self.config.input_dim}")
        if self.layers is not None:
            for layer in self.layers[:-1]:
                x = self.activation(layer(x))
            return self.layers[-1](x)
        batch = x.shape[0]
        return self.head(self.encoder(x.reshape((batch, 1) + self.input_shape)))

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


@dataclass(frozen=True)
class NetworkParameters:
    """Flat float64 parameter vector with the names and shapes it unpacks into."""
    names: Tuple[str, ...]
    shapes: Tuple[Tuple[int, ...], ...]
    vector: np.ndarray

    @classmethod
    def from_network(cls, net: OperatorNetwork) -> "NetworkParameters":
        named = list(net.named_parameters())
        vector = parameters_to_vector([p for _, p in named]).detach().cpu().numpy().copy()
        return cls(tuple(n for n, _ in named), tuple(tuple(p.shape) for _, p in named), vector)

    def load_into(self, net: OperatorNetwork) -> None:
        vector_to_parameters(torch.from_numpy(self.vector.astype(np.float64)), net.parameters())


def init_network(config: NetworkConfig, seed: int = 0, zeros: bool = False) -> OperatorNetwork:
    """
    Build a network with Xavier-uniform weights and zero biases.

    Initialization draws from a forked torch RNG seeded with ``seed`` so global
    torch state is untouched. ``zeros`` sets every parameter to zero.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        net = OperatorNetwork(config)
        with torch.no_grad():
            for name, p in net.named_parameters():
                if zeros or name.endswith("bias"):
                    p.zero_()
                else:
                    nn.init.xavier_uniform_(p)
    return net


def predict(net: OperatorNetwork, inputs: np.ndarray) -> np.ndarray:
    """Coefficients for a batch (M, input_dim) or a single input vector."""
    x = torch.as_tensor(np.atleast_2d(inputs), dtype=DTYPE)
    with torch.no_grad():
        out = net(x).numpy()
    return out[0] if np.ndim(inputs) == 1 else out


# --- residual loss -----------------------------------------------------------

def row_scaling(A: np.ndarray) -> np.ndarray:
    """1 / ||row_i(A)||_2 for row preconditioning of the residual."""
    norms = np.linalg.norm(A, axis=1)
    if np.any(norms == 0):
        raise ValueError("Matrix has a zero row")
    return 1.0 / norms


def residual_loss(
    net: OperatorNetwork, A: torch.Tensor, inputs: torch.Tensor, F: torch.Tensor
) -> torch.Tensor:
    """(1 / M) sum_m ||A net(x_m) - F_m||^2; non-finite samples raise with their index."""
    residual = net(inputs) @ A.T - F
    per_sample = (residual ** 2).sum(dim=1)
    finite = torch.isfinite(per_sample)
    if not bool(finite.all()):
        index = int(torch.nonzero(~finite)[0, 0])
        raise NonFiniteError("Non-finite residual loss", sample_index=index)
    return per_sample.mean()


def residual_loss_and_grad(
    net: OperatorNetwork, A: np.ndarray, inputs: np.ndarray, F: np.ndarray
) -> Tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the flat parameter vector."""
    net.zero_grad()
    loss = residual_loss(net, to_tensor(A), to_tensor(inputs), to_tensor(F))
    loss.backward()
    grad = parameters_to_vector([p.grad for p in net.parameters()]).detach().numpy().copy()
    return float(loss.item()), grad


def naive_residual_loss(
    problem: ProblemSpec, space: EnrichedSpace, coeffs: np.ndarray, F: np.ndarray, tol: float = 1e-13
) -> float:
    """
    Residual loss with B[u, phi_i] integrated directly for every test function.

    1D spaces only; agrees with the matrix form up to quadrature error.
    """
    if space.dimension != 1:
        raise ValueError("naive_residual_loss supports 1D spaces only")
    coeffs = np.atleast_2d(coeffs)
    F = np.atleast_2d(F)
    eps = problem.epsilon
    b0, b1 = problem.convection_poly(0)
    points, width = space.axes[0].layer(fallback_width=eps)
    total = 0.0
    for alpha, load in zip(coeffs, F):
        def integrand(x):
            du = alpha @ space.basis_values(x, derivative=0)
            return eps * du[None, :] * space.basis_values(x, derivative=0) + (b0 + b1 * x) * du * space.basis_values(x)

        form = layer_quadrature(
            integrand, problem.domain, width, tol=tol, layer_points=points, breakpoints=space.axes[0].nodes
        )
        total += float(np.sum((form - load) ** 2))
    return total / coeffs.shape[0]


def to_tensor(array: np.ndarray) -> torch.Tensor:
    return torch.as_tensor(np.asarray(array, dtype=np.float64), dtype=DTYPE)


# --- training ----------------------------------------------------------------

@dataclass
class HistoryRecord:
    step: int
    loss: float
    seconds: float
    event: str = ""


@dataclass
class TrainingHistory:
    records: List[HistoryRecord] = field(default_factory=list)

    def append(self, record: HistoryRecord) -> None:
        self.records.append(record)

    @property
    def losses(self) -> List[float]:
        return [r.loss for r in self.records]

    @property
    def events(self) -> List[Tuple[int, str]]:
        return [(r.step, r.event) for r in self.records if r.event]

    def to_csv(self, path: str, with_timing: bool = False) -> None:
        """Columns step, loss, seconds, event; seconds are 0 unless ``with_timing``."""
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["step", "loss", "seconds", "event"])
            for r in self.records:
                seconds = repr(r.seconds) if with_timing else "0"
                writer.writerow([r.step, repr(r.loss), seconds, r.event])


def network_inputs(
    problem: ProblemSpec,
    forcings: Sequence[ForcingParams],
    resolution: int,
    input_kind: InputKind,
    loads: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Network inputs for ``forcings``: sampled values or the load vectors themselves."""
    if input_kind == InputKind.LOAD:
        if loads is None:
            raise ValueError("load inputs need the assembled load vectors")
        return loads
    return discretize_batch(forcings, resolution, problem.domain)


def input_dimension(space: EnrichedSpace, resolution: int, input_kind: InputKind) -> int:
    if input_kind == InputKind.LOAD:
        return space.total_dim
    return resolution ** space.dimension


class BatchSource:
    """Training batches: a fresh draw per step (online) or one frozen draw (fixed)."""

    def __init__(
        self,
        problem: ProblemSpec,
        space: EnrichedSpace,
        sampling: SamplingSpec,
        train: TrainConfig,
        resolution: int,
    ):
        self.problem = problem
        self.space = space
        self.sampling = sampling
        self.train = train
        self.resolution = resolution
        self._fixed: Optional[Tuple[np.ndarray, np.ndarray]] = None

    def _draw(self, purpose: str, start: int) -> Tuple[np.ndarray, np.ndarray]:
        forcings = sample_forcings(
            self.sampling, self.problem.problem_class, purpose,
            count=self.train.samples, start=start, seed=self.train.seed,
        )
        F = assemble_loads(self.problem, self.space, forcings)
        return network_inputs(self.problem, forcings, self.resolution, self.train.input_kind, F), F

    def batch(self, step: int) -> Tuple[np.ndarray, np.ndarray]:
        if self.train.mode == TrainMode.FIXED:
            if self._fixed is None:
                self._fixed = self._draw("fixed", 0)
            return self._fixed
        return self._draw("train", step * self.train.samples)


class ResidualTrainer:
    """
    Minimizes the residual loss with L-BFGS (strong Wolfe) or Adam.

    An L-BFGS step that leaves the loss higher or non-finite is undone and
    replaced by a backtracking steepest-descent step; the event is recorded.
    """

    def __init__(
        self,
        net: OperatorNetwork,
        A: np.ndarray,
        config: TrainConfig,
        row_scale: Optional[np.ndarray] = None,
    ):
        self.net = net
        self.config = config
        self.row_scale = row_scale
        A = A if row_scale is None else row_scale[:, None] * A
        self.A = to_tensor(A)
        self.optimizer = self._make_optimizer()

    def _make_optimizer(self) -> torch.optim.Optimizer:
        if self.config.optimizer == Optimizer.LBFGS:
            return torch.optim.LBFGS(
                self.net.parameters(),
                lr=self.config.learning_rate,
                max_iter=self.config.max_iter,
                history_size=self.config.history_size,
                tolerance_grad=1e-15,
                tolerance_change=1e-16,
                line_search_fn="strong_wolfe",
            )
        return torch.optim.Adam(self.net.parameters(), lr=self.config.learning_rate)

    def _loss(self, inputs: torch.Tensor, F: torch.Tensor) -> torch.Tensor:
        return residual_loss(self.net, self.A, inputs, F)

    def _vector(self) -> torch.Tensor:
        return parameters_to_vector(self.net.parameters()).detach().clone()

    def _set(self, vector: torch.Tensor) -> None:
        with torch.no_grad():
            vector_to_parameters(vector, self.net.parameters())

    def _steepest_descent(self, inputs, F, start: torch.Tensor, start_loss: float, shrink: int = 40) -> str:
        self._set(start)
        self.net.zero_grad()
        self._loss(inputs, F).backward()
        grad = parameters_to_vector([p.grad for p in self.net.parameters()]).detach().clone()
        t = self.config.learning_rate
        for _ in range(shrink):
            self._set(start - t * grad)
            try:
                with torch.no_grad():
                    trial = self._loss(inputs, F).item()
            except NonFiniteError:
                trial = math.inf
            if trial < start_loss:
                return "steepest_descent"
            t *= 0.5
        self._set(start)
        return "stalled"

    def step(self, inputs_np: np.ndarray, F_np: np.ndarray) -> Tuple[float, str]:
        """One optimization step on a batch; returns the loss afterwards and any event."""
        if self.row_scale is not None:
            F_np = F_np * self.row_scale[None, :]
        inputs, F = to_tensor(inputs_np), to_tensor(F_np)
        start = self._vector()
        with torch.no_grad():
            start_loss = self._loss(inputs, F).item()

        if self.config.optimizer == Optimizer.ADAM:
            for _ in range(self.config.max_iter):
                self.optimizer.zero_grad()
                self._loss(inputs, F).backward()
                self.optimizer.step()
            with torch.no_grad():
                return self._loss(inputs, F).item(), ""

        def closure():
            self.optimizer.zero_grad()
            loss = self._loss(inputs, F)
            loss.backward()
            return loss

        event = ""
        try:
            self.optimizer.step(closure)
            with torch.no_grad():
                loss = self._loss(inputs, F).item()
            failed = not math.isfinite(loss) or loss > start_loss
        except NonFiniteError:
            failed = True
        if failed:
            logger.warning("L-BFGS step did not decrease the loss; taking a steepest-descent step")
            self.optimizer = self._make_optimizer()
            event = self._steepest_descent(inputs, F, start, start_loss)
            with torch.no_grad():
                loss = self._loss(inputs, F).item()
        return loss, event


def train(
    problem: ProblemSpec,
    space: EnrichedSpace,
    net_config: NetworkConfig,
    train_config: TrainConfig,
    sampling: SamplingSpec,
    resolution: int,
    A: np.ndarray,
    net: Optional[OperatorNetwork] = None,
    callback: Optional[Callable[[HistoryRecord], None]] = None,
) -> Tuple[OperatorNetwork, TrainingHistory]:
    """
    Train a coefficient network on the residual loss of ``A``.

    Stops after ``train_config.steps`` steps or once the loss drops below
    ``train_config.tolerance``.
    """
    if net_config.output_dim != space.total_dim:
        raise ValueError(f"Network output {net_config.output_dim} != space dimension {space.total_dim}")
    expected_in = input_dimension(space, resolution, train_config.input_kind)
    if net_config.input_dim != expected_in:
        raise ValueError(f"Network input {net_config.input_dim} != input dimension {expected_in}")
    net = net or init_network(net_config, seed=train_config.seed)
    row_scale = row_scaling(A) if train_config.precondition else None
    trainer = ResidualTrainer(net, A, train_config, row_scale)
    source = BatchSource(problem, space, sampling, train_config, resolution)
    history = TrainingHistory()
    started = time.perf_counter()
    for step in range(train_config.steps):
        inputs, F = source.batch(step)
        loss, event = trainer.step(inputs, F)
        if not event and loss < train_config.tolerance:
            event = "converged"
        record = HistoryRecord(step, loss, time.perf_counter() - started, event)
        history.append(record)
        if callback is not None:
            callback(record)
        if step % 10 == 0 or event:
            logger.info(f"step {step}: loss={loss:.6e}{' ' + event if event else ''}")
        if event == "converged":
            break
    return net, history


# --- checkpoints -------------------------------------------------------------

def save_checkpoint(net: OperatorNetwork, path: str) -> None:
    """Magic, uint32 header length, JSON header, then little-endian float64 parameters."""
    params = NetworkParameters.from_network(net)
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": net.config.model_dump(mode="json"),
        "parameters": [{"name": n, "shape": list(s)} for n, s in zip(params.names, params.shapes)],
        "dtype": "<f8",
        "count": int(params.vector.size),
    }
    encoded = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(CHECKPOINT_MAGIC)
        handle.write(struct.pack("<I", len(encoded)))
        handle.write(encoded)
        handle.write(params.vector.astype("<f8").tobytes())


def load_checkpoint(path: str, expected: Optional[NetworkConfig] = None) -> OperatorNetwork:
    """Rebuild the stored network; ``expected`` must then match every parameter shape."""
    with open(path, "rb") as handle:
        data = handle.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    offset = len(CHECKPOINT_MAGIC)
    if len(data) < offset + 4:
        raise CheckpointError(f"{path} is truncated")
    (length,) = struct.unpack("<I", data[offset:offset + 4])
    offset += 4
    if len(data) < offset + length:
        raise CheckpointError(f"{path} is truncated inside the header")
    try:
        header = json.loads(data[offset:offset + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path} has an unreadable header: {e}") from e
    offset += length
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {header.get('format_version')}")
    if header.get("dtype") != "<f8":
        raise CheckpointError(f"Unsupported parameter dtype {header.get('dtype')}")
    count = int(header["count"])
    payload = data[offset:]
    if len(payload) != 8 * count:
        raise CheckpointError(f"{path} is truncated: expected {count} parameters, found {len(payload) // 8}")

    config = NetworkConfig.model_validate(header["config"])
    stored = [tuple(p["shape"]) for p in header["parameters"]]
    if expected is not None:
        requested = [tuple(p.shape) for p in OperatorNetwork(expected).parameters()]
        if requested != stored:
            raise CheckpointError(
                f"Architecture mismatch: checkpoint has parameter shapes {stored}, "
                f"requested network has {requested}"
            )
        config = expected
    net = OperatorNetwork(config)
    actual = [tuple(p.shape) for p in net.parameters()]
    if actual != stored:
        raise CheckpointError(f"Checkpoint shapes {stored} do not match its own config {actual}")
    vector = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    with torch.no_grad():
        vector_to_parameters(torch.from_numpy(vector.copy()), net.parameters())
    return net
