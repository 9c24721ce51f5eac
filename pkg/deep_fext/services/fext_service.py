"""
Feature extraction network: factorized mini-networks, multi-scale layers and
the stacked network whose concatenated outputs form the per-pixel feature set.
"""
import logging
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.signal import convolve2d

from deep_fext.autograd import ops
from deep_fext.autograd.tensor import ComputeGraph, ConvKernel, Tensor
from deep_fext.models.exceptions import FextError, ErrorTypes
from deep_fext.models.network import FextLayerSpec, FextNetworkSpec

logger = logging.getLogger(__name__)


class MiniNetwork:
    """Chain of small same-size convolutions emulating one square filter."""

    def __init__(self, target_scale: int, stages: List[ConvKernel]):
        self.target_scale = target_scale
        self.stages = stages

    @property
    def in_channels(self) -> int:
        return self.stages[0].in_channels

    @property
    def out_channels(self) -> int:
        return self.stages[-1].out_channels

    @property
    def weight_count(self) -> int:
        return sum(stage.weight_count for stage in self.stages)

    @property
    def parameter_count(self) -> int:
        return sum(stage.parameter_count for stage in self.stages)

    def parameters(self) -> List[Tensor]:
        return [tensor for stage in self.stages for tensor in stage.parameters()]

    def forward(self, x: Tensor, graph: Optional[ComputeGraph] = None, linear: bool = False) -> Tensor:
        """Apply every stage; ``linear`` skips the activations."""
        for stage in self.stages:
            x = ops.conv2d_same(x, stage, graph)
            if not linear:
                x = ops.relu(x, graph)
        return x

    def composed_kernel(self) -> np.ndarray:
        """Single (out, in, kh, kw) kernel equal to the bias- and activation-free chain."""
        composed = self.stages[0].weights.data.astype(np.float64)
        for stage in self.stages[1:]:
            following = stage.weights.data.astype(np.float64)
            out_ch, mid_ch = following.shape[:2]
            in_ch = composed.shape[1]
            kh = composed.shape[2] + following.shape[2] - 1
            kw = composed.shape[3] + following.shape[3] - 1
            merged = np.zeros((out_ch, in_ch, kh, kw))
            for o in range(out_ch):
                for i in range(in_ch):
                    for m in range(mid_ch):
                        merged[o, i] += convolve2d(composed[m, i], following[o, m], mode="full")
            composed = merged
        return composed


def receptive_field(net: MiniNetwork) -> Tuple[int, int]:
    """Composed receptive field (sum(kh-1)+1, sum(kw-1)+1) of a stage chain."""
    height = sum(stage.kernel_h - 1 for stage in net.stages) + 1
    width = sum(stage.kernel_w - 1 for stage in net.stages) + 1
    return height, width


def stage_shapes(target_scale: int, refactor_3x3: bool = False) -> List[Tuple[int, int]]:
    """Kernel extents of the chain emulating a ``target_scale`` square filter."""
    if target_scale < 3 or target_scale % 2 == 0:
        raise FextError(f"scale must be odd and >= 3, got {target_scale}", ErrorTypes.CONFIGURATION)
    shapes = []
    for _ in range((target_scale - 1) // 2):
        shapes.extend([(1, 3), (3, 1)] if refactor_3x3 else [(3, 3)])
    return shapes


def factorize(
    target_scale: int,
    in_ch: int,
    out_ch: int,
    refactor_3x3: bool = False,
    rng: Optional[np.random.Generator] = None,
    name: str = "mini"
) -> MiniNetwork:
    """
    Replace a ``target_scale`` square convolution with a chain of 3x3 stages.

    Every stage after the first keeps ``out_ch`` channels. With
    ``refactor_3x3`` each 3x3 stage becomes 1x3 followed by 3x1.

    Raises:
        FextError: even or < 3 scale.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    stages = []
    width = in_ch
    for index, (kernel_h, kernel_w) in enumerate(stage_shapes(target_scale, refactor_3x3)):
        stages.append(ConvKernel.initialize(out_ch, width, kernel_h, kernel_w, rng, name=f"{name}.stages.{index}"))
        width = out_ch
    return MiniNetwork(target_scale, stages)


def direct_parameter_count(scale: int, in_ch: int, out_ch: int) -> int:
    """Parameters of the unfactorized square convolution."""
    return out_ch * in_ch * scale * scale + out_ch


class FextLayer:
    """Multi-scale layer: one mini-network per branch, concatenated, then activated."""

    def __init__(self, spec: FextLayerSpec, branches: List[MiniNetwork]):
        self.spec = spec
        self.branches = branches

    @property
    def out_channels(self) -> int:
        return self.spec.out_channels

    def parameters(self) -> List[Tensor]:
        return [tensor for branch in self.branches for tensor in branch.parameters()]

    def forward(self, x: Tensor, graph: Optional[ComputeGraph] = None) -> Tensor:
        if len(x.shape) != 4 or x.shape[1] != self.spec.in_channels:
            raise FextError(
                f"layer expects {self.spec.in_channels} input channels, got shape {x.shape}",
                ErrorTypes.SHAPE
            )
        outputs = [branch.forward(x, graph) for branch in self.branches]
        return ops.relu(ops.concat_channels(outputs, graph), graph)


def build_fext_layer(
    spec: FextLayerSpec,
    rng: Optional[np.random.Generator] = None,
    name: str = "layer"
) -> FextLayer:
    """Instantiate every branch of ``spec`` as a factorized mini-network."""
    rng = rng if rng is not None else np.random.default_rng(0)
    branches = [
        factorize(
            branch.scale,
            spec.in_channels,
            branch.out_features,
            refactor_3x3=spec.refactor_3x3,
            rng=rng,
            name=f"{name}.branches.{index}"
        )
        for index, branch in enumerate(spec.branches)
    ]
    return FextLayer(spec, branches)


class FextNetwork:
    """Stacked extraction layers producing the concatenated feature set."""

    def __init__(self, spec: FextNetworkSpec, layers: List[FextLayer]):
        self.spec = spec
        self.layers = layers

    @property
    def feature_count(self) -> int:
        return self.spec.feature_count

    @property
    def receptive_radius(self) -> int:
        return self.spec.receptive_radius

    def parameters(self) -> List[Tensor]:
        return [tensor for layer in self.layers for tensor in layer.parameters()]

    def parameter_count(self) -> int:
        return sum(tensor.size for tensor in self.parameters())

    def parameter_breakdown(self) -> Dict[str, Tuple[int, int]]:
        """Per branch: (factorized parameters, direct square-kernel parameters)."""
        breakdown = {}
        for layer_index, layer in enumerate(self.layers):
            for branch in layer.branches:
                key = f"layer{layer_index + 1}/s{branch.target_scale}"
                direct = direct_parameter_count(branch.target_scale, branch.in_channels, branch.out_channels)
                breakdown[key] = (branch.parameter_count, direct)
        return breakdown

    def forward_blocks(self, image: Tensor, graph: Optional[ComputeGraph] = None) -> List[Tensor]:
        """Feature blocks in output order: input (when passed through), then each layer."""
        if len(image.shape) != 4:
            raise FextError(f"network expects (N,C,H,W), got {image.shape}", ErrorTypes.SHAPE)
        blocks = [image] if self.spec.include_input_passthrough else []
        x = image
        for layer in self.layers:
            x = layer.forward(x, graph)
            blocks.append(x)
        return blocks

    def forward(self, image: Tensor, graph: Optional[ComputeGraph] = None) -> Tensor:
        """(N,C,H,W) image -> (N,feature_count,H,W) features."""
        blocks = self.forward_blocks(image, graph)
        if len(blocks) == 1:
            return blocks[0]
        return ops.concat_channels(blocks, graph)


def build_fext_network(spec: FextNetworkSpec, rng: Optional[np.random.Generator] = None) -> FextNetwork:
    """
    Instantiate the stacked network, layer by layer in declaration order.

    Raises:
        FextError: inconsistent inter-layer channel counts.
    """
    spec.check_chain()
    rng = rng if rng is not None else np.random.default_rng(0)
    layers = [build_fext_layer(layer, rng, name=f"fext.layers.{index}") for index, layer in enumerate(spec.layers)]
    network = FextNetwork(spec, layers)

    factorized = sum(pair[0] for pair in network.parameter_breakdown().values())
    direct = sum(pair[1] for pair in network.parameter_breakdown().values())
    logger.debug(
        "built extraction network: %d features, %d parameters (%d with square kernels)",
        network.feature_count, factorized, direct
    )
    return network


def _normalize_plane(plane: np.ndarray) -> np.ndarray:
    low, high = float(plane.min()), float(plane.max())
    if high <= low:
        return np.zeros(plane.shape, dtype=np.float32)
    return ((plane.astype(np.float64) - low) / (high - low)).astype(np.float32)


def export_feature_maps(network: FextNetwork, image: Tensor) -> List[np.ndarray]:
    """Every output channel min-max normalized to [0,1]; constant channels become all zero."""
    if len(image.shape) == 3:
        image = Tensor(image.data[None])
    features = network.forward(image)
    return [_normalize_plane(features.data[0, channel]) for channel in range(features.shape[1])]


def block_ranges(spec: FextNetworkSpec) -> List[Tuple[str, int, int]]:
    """(name, start, stop) channel range of each feature block."""
    names = (["input"] if spec.include_input_passthrough else []) + [
        f"layer{index + 1}" for index in range(len(spec.layers))
    ]
    offsets = np.cumsum([0] + spec.block_sizes)
    return [(name, int(offsets[i]), int(offsets[i + 1])) for i, name in enumerate(names)]
