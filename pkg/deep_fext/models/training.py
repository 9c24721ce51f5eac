"""This module defines Pydantic models and enums for training runs."""

from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from deep_fext.models.exceptions import FextError, ErrorTypes
from deep_fext.models.network import FextNetworkSpec, MeshHeadSpec, network_preset


class Task(str, Enum):
    """Prediction target; fixes the class encoding of the label maps."""
    VESSEL = "vessel"
    CENTERLINE = "centerline"
    BOTH = "both"

    @property
    def num_classes(self) -> int:
        return 3 if self is Task.BOTH else 2

    @property
    def class_names(self) -> List[str]:
        if self is Task.BOTH:
            return ["background", "vessel", "centerline"]
        return ["background", self.value]


class OptimizerKind(str, Enum):
    """Supported update rules."""
    ADAM = "adam"
    SGD_MOMENTUM = "sgd_momentum"

    @property
    def slots(self) -> int:
        """Moment buffers kept per parameter."""
        return 2 if self is OptimizerKind.ADAM else 1


class TrainConfig(BaseModel):
    """Training run configuration, read from a JSON document."""
    model_config = ConfigDict(extra="forbid")

    seed: int = Field(0, ge=0)
    task: Task = Task.VESSEL
    network_preset: Optional[str] = "fext5-100"
    network: Optional[FextNetworkSpec] = None
    head: Optional[MeshHeadSpec] = None

    optimizer: OptimizerKind = OptimizerKind.ADAM
    learning_rate: float = Field(1e-3, ge=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = Field(1e-8, gt=0.0)

    patch_size: int = Field(64, ge=23)
    patches_per_step: int = Field(4, ge=1)
    batch_pixels: Optional[int] = Field(None, ge=1)
    epochs: int = Field(40, ge=1)
    patches_per_epoch: int = Field(2000, ge=1)
    max_steps: Optional[int] = Field(None, ge=1)
    class_weights: Optional[List[float]] = None
    border_margin: int = Field(11, ge=0)
    augment: bool = False

    checkpoint_every: int = Field(500, ge=1)
    validation_patches: int = Field(8, ge=1)
    divergence_factor: float = Field(10.0, gt=1.0)
    divergence_patience: int = Field(100, ge=1)

    @model_validator(mode="after")
    def check_consistency(self) -> "TrainConfig":
        """Class weights must cover the task's classes; betas must be in [0, 1)."""
        if self.class_weights is not None:
            if len(self.class_weights) != self.task.num_classes:
                raise ValueError(
                    f"class_weights has {len(self.class_weights)} entries, task "
                    f"'{self.task.value}' has {self.task.num_classes} classes"
                )
            if any(weight < 0 for weight in self.class_weights):
                raise ValueError("class_weights must be nonnegative")
        if not all(0.0 <= beta < 1.0 for beta in self.betas):
            raise ValueError(f"betas must lie in [0, 1), got {self.betas}")
        if self.network is None and self.network_preset is None:
            raise ValueError("either network or network_preset is required")
        return self

    @property
    def steps_per_epoch(self) -> int:
        return max(1, self.patches_per_epoch // self.patches_per_step)

    @property
    def total_steps(self) -> int:
        steps = self.epochs * self.steps_per_epoch
        return min(steps, self.max_steps) if self.max_steps else steps

    def network_spec(self) -> FextNetworkSpec:
        """Inline network wins over the preset name."""
        return self.network if self.network is not None else network_preset(self.network_preset)

    def head_spec(self) -> MeshHeadSpec:
        """Inline head, or the default head sized to the network's feature count."""
        if self.head is not None:
            return self.head
        features = self.network_spec().feature_count
        side = int(round(features ** 0.5))
        if side * side != features:
            raise FextError(
                f"{features} features do not form a square mesh; give an explicit head",
                ErrorTypes.CONFIGURATION
            )
        return MeshHeadSpec(mesh_h=side, mesh_w=side, num_classes=self.task.num_classes)

    @classmethod
    def from_file(cls, path: Path) -> "TrainConfig":
        """Load and validate a JSON config document."""
        try:
            return cls.model_validate_json(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError as err:
            raise FextError(f"config file not found: {path}", ErrorTypes.CONFIGURATION) from err
        except ValidationError as err:
            raise FextError(f"invalid config {path}: {err}", ErrorTypes.CONFIGURATION) from err


class NormalizationStats(BaseModel):
    """Per-channel input statistics from the training split."""
    mean: List[float]
    std: List[float]

    @classmethod
    def identity(cls, channels: int) -> "NormalizationStats":
        return cls(mean=[0.0] * channels, std=[1.0] * channels)


class TrainState(BaseModel):
    """Progress counters plus per-parameter optimizer moments (stored in the checkpoint payload)."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    step: int = 0
    epoch: int = 0
    running_loss: float = 0.0
    initial_loss: Optional[float] = None
    rng_state: Optional[Dict[str, Any]] = None
    optimizer: OptimizerKind = OptimizerKind.ADAM
    divergent_steps: int = 0
    validation_losses: List[float] = Field(default_factory=list)
    class_weights: List[float] = Field(default_factory=list)
    final: bool = False
    moments: Dict[str, List[np.ndarray]] = Field(default_factory=dict, exclude=True)
