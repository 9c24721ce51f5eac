"""Model composite (extraction network + mesh head) and whole-image inference."""
import logging
from typing import List, Optional, Tuple

import numpy as np

from deep_fext.autograd import ops
from deep_fext.autograd.tensor import ComputeGraph, Tensor
from deep_fext.config import settings
from deep_fext.models.exceptions import FextError, ErrorTypes
from deep_fext.models.network import FextNetworkSpec, MeshHeadSpec
from deep_fext.models.training import NormalizationStats, Task
from deep_fext.services.fext_service import FextNetwork, build_fext_network
from deep_fext.services.mesh_head_service import MeshHead, build_mesh_head, classify_features

logger = logging.getLogger(__name__)


class DeepFextModel:
    """Extraction network and mesh head trained together for one task."""

    def __init__(
        self,
        network: FextNetwork,
        head: MeshHead,
        task: Task,
        normalization: Optional[NormalizationStats] = None
    ):
        if network.feature_count != head.spec.mesh_size:
            raise FextError(
                f"network emits {network.feature_count} features but the head expects a "
                f"{head.spec.mesh_h}x{head.spec.mesh_w} mesh",
                ErrorTypes.CONFIGURATION
            )
        if head.num_classes != task.num_classes:
            raise FextError(
                f"task '{task.value}' needs {task.num_classes} classes, head has {head.num_classes}",
                ErrorTypes.CONFIGURATION
            )
        self.network = network
        self.head = head
        self.task = task
        self.normalization = normalization or NormalizationStats.identity(network.spec.input_channels)

    @property
    def min_size(self) -> int:
        """Smallest accepted image edge: the largest branch scale."""
        return max(layer.max_scale for layer in self.network.spec.layers)

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        """Parameters in declaration order: extraction layers, then head."""
        tensors = self.network.parameters() + self.head.parameters()
        return [(tensor.name, tensor) for tensor in tensors]

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.parameters())

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.zero_grad()

    def normalize(self, images: np.ndarray) -> np.ndarray:
        """Per-channel (x - mean) / std on (N,C,H,W) or (C,H,W) arrays."""
        mean = np.asarray(self.normalization.mean, dtype=np.float32)
        std = np.asarray(self.normalization.std, dtype=np.float32)
        shape = (-1, 1, 1)
        return ((images - mean.reshape(shape)) / std.reshape(shape)).astype(np.float32)

    def forward(self, images: Tensor, graph: Optional[ComputeGraph] = None) -> Tensor:
        """Normalized (N,C,H,W) batch -> (N,K,H,W) logits."""
        features = self.network.forward(images, graph)
        return classify_features(features, self.head, graph)


def build_model(
    network_spec: FextNetworkSpec,
    head_spec: MeshHeadSpec,
    task: Task,
    seed: int = 0,
    normalization: Optional[NormalizationStats] = None
) -> DeepFextModel:
    """Initialize a model; one generator seeds the network and then the head."""
    rng = np.random.default_rng(seed)
    network = build_fext_network(network_spec, rng)
    head = build_mesh_head(head_spec, rng)
    model = DeepFextModel(network, head, task, normalization)
    logger.info(
        "model ready: task=%s features=%d parameters=%d",
        task.value, network.feature_count, model.parameter_count()
    )
    return model


def predict_probabilities(model: DeepFextModel, image: np.ndarray, tile: Optional[int] = None) -> np.ndarray:
    """
    Class probabilities (K,H,W) for one (C,H,W) image in [0,1].

    Inference runs on tiles with a halo of one receptive radius, so the result
    matches a single whole-image pass.

    Raises:
        FextError: image smaller than the largest branch scale.
    """
    image = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float32)
    if image.ndim != 3 or image.shape[0] != model.network.spec.input_channels:
        raise FextError(
            f"expected a ({model.network.spec.input_channels},H,W) image, got {image.shape}",
            ErrorTypes.DATA
        )
    _, height, width = image.shape
    if height < model.min_size or width < model.min_size:
        raise FextError(
            f"image {height}x{width} is smaller than {model.min_size}x{model.min_size}; "
            "pad it to at least the largest filter scale",
            ErrorTypes.DATA
        )

    normalized = model.normalize(image)
    tile = tile or settings.PREDICT_TILE
    halo = model.network.receptive_radius
    probs = np.zeros((model.head.num_classes, height, width), dtype=np.float32)

    for y0 in range(0, height, tile):
        for x0 in range(0, width, tile):
            y1, x1 = min(y0 + tile, height), min(x0 + tile, width)
            ya, xa = max(0, y0 - halo), max(0, x0 - halo)
            yb, xb = min(height, y1 + halo), min(width, x1 + halo)
            logits = model.forward(Tensor(normalized[None, :, ya:yb, xa:xb]))
            tile_probs = ops.softmax(logits.data, axis=1)[0]
            probs[:, y0:y1, x0:x1] = tile_probs[:, y0 - ya:y1 - ya, x0 - xa:x1 - xa]
    return probs


def task_probability(probs: np.ndarray, task: Task, target: str) -> Optional[np.ndarray]:
    """
    Task-level binary probability from class probabilities.

    ``vessel`` is the whole vessel tree (vessel + centerline classes for the
    3-class model); ``centerline`` is the centerline class. None when the
    model does not predict ``target``.
    """
    if task is Task.BOTH:
        if target == "vessel":
            return probs[1] + probs[2]
        if target == "centerline":
            return probs[2]
        return None
    return probs[1] if target == task.value else None
