"""This module defines the structured header stored at the front of a checkpoint."""

from typing import List

from pydantic import BaseModel, Field

from deep_fext.models.network import FextNetworkSpec, MeshHeadSpec
from deep_fext.models.training import NormalizationStats, Task, TrainState

CHECKPOINT_MAGIC = b"DFXT"
CHECKPOINT_VERSION = 1


class ParameterEntry(BaseModel):
    """Name and shape of one parameter, in declaration order."""
    name: str
    shape: List[int]


class CheckpointHeader(BaseModel):
    """Everything needed to rebuild the model and resume training."""
    network: FextNetworkSpec
    head: MeshHeadSpec
    task: Task
    feature_count: int
    normalization: NormalizationStats
    train_state: TrainState = Field(default_factory=TrainState)
    parameters: List[ParameterEntry]
    parameter_count: int = Field(..., ge=0)
    optimizer_slots: int = Field(0, ge=0, le=2)
