"""Service for residual training of coefficient networks."""
import logging
import os
import time
from typing import Optional

from app.core.assembly import assemble_matrix
from app.core.basis import EnrichedSpace, uniform_space
from app.core.operator_net import input_dimension, save_checkpoint, train
from app.schemas import (
    InferenceResponse,
    NetworkConfig,
    ProblemSpec,
    SamplingSpec,
    TrainConfig,
)

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.efeo"
HISTORY_NAME = "history.csv"


def network_config_for(
    space: EnrichedSpace, resolution: int, train_config: TrainConfig, overrides: Optional[dict] = None
) -> NetworkConfig:
    """Network sized for ``space``; ``overrides`` set architecture fields other than the dimensions."""
    overrides = dict(overrides or {})
    overrides.pop("input_dim", None)
    overrides.pop("output_dim", None)
    return NetworkConfig(
        input_dim=input_dimension(space, resolution, train_config.input_kind),
        output_dim=space.total_dim,
        **overrides,
    )


class TrainingService:
    """Trains a network for one problem and writes its checkpoint and history."""

    def __init__(self, out_dir: str):
        """
        Initialize training service.

        Args:
            out_dir: Directory receiving model.efeo and history.csv
        """
        self.out_dir = out_dir

    def _cleanup(self, *paths: str) -> None:
        for path in paths:
            if os.path.exists(path):
                os.remove(path)

    async def train(
        self,
        problem: ProblemSpec,
        mesh_n: int,
        resolution: int,
        sampling: SamplingSpec,
        train_config: TrainConfig,
        network_overrides: Optional[dict] = None,
        enrich: bool = True,
        with_timing: bool = False,
    ) -> InferenceResponse:
        """
        Train on the residual loss and persist the results.

        Partial outputs are removed when training fails.
        """
        checkpoint = os.path.join(self.out_dir, CHECKPOINT_NAME)
        history_path = os.path.join(self.out_dir, HISTORY_NAME)
        try:
            started = time.perf_counter()
            space = uniform_space(problem, mesh_n, enrich=enrich)
            net_config = network_config_for(space, resolution, train_config, network_overrides)
            logger.info(
                f"Training {net_config.architecture.value} {net_config.input_dim} -> {net_config.output_dim} "
                f"on {problem.name} eps={problem.epsilon:g}"
            )
            A = assemble_matrix(problem, space)
            net, history = train(problem, space, net_config, train_config, sampling, resolution, A)
            os.makedirs(self.out_dir, exist_ok=True)
            save_checkpoint(net, checkpoint)
            history.to_csv(history_path, with_timing=with_timing)
            return InferenceResponse(
                success=True,
                result={
                    "checkpoint": checkpoint,
                    "history": history_path,
                    "final_loss": history.records[-1].loss,
                    "steps": len(history.records),
                    "events": history.events,
                },
                metadata={
                    "task": "train",
                    "parameters": net.parameter_count(),
                    "network": net_config.model_dump(mode="json"),
                    "seconds": time.perf_counter() - started,
                },
            )

        except Exception as e:
            logger.error(f"Training failed: {e}")
            self._cleanup(checkpoint, history_path)
            return InferenceResponse(
                success=False,
                result=None,
                error=str(e),
            )
