"""Per-pixel classifier over the feature mesh."""
from typing import List, Optional

import numpy as np

from deep_fext.autograd import ops
from deep_fext.autograd.tensor import ComputeGraph, ConvKernel, Tensor
from deep_fext.models.exceptions import FextError, ErrorTypes
from deep_fext.models.network import MeshHeadSpec


class MeshHead:
    """Three same-size convolutions over each pixel's mesh, then a global average per class."""

    def __init__(self, spec: MeshHeadSpec, convs: List[ConvKernel]):
        self.spec = spec
        self.convs = convs

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def parameters(self) -> List[Tensor]:
        return [tensor for conv in self.convs for tensor in conv.parameters()]

    def forward(self, mesh: Tensor, graph: Optional[ComputeGraph] = None) -> Tensor:
        """(M,1,mesh_h,mesh_w) -> (M,num_classes) logits."""
        expected = (1, self.spec.mesh_h, self.spec.mesh_w)
        if len(mesh.shape) != 4 or mesh.shape[1:] != expected:
            raise FextError(f"mesh head expects (M,{expected}), got {mesh.shape}", ErrorTypes.SHAPE)
        x = mesh
        last = len(self.convs) - 1
        for index, conv in enumerate(self.convs):
            x = ops.conv2d_same(x, conv, graph)
            if index < last:
                x = ops.relu(x, graph)
        return ops.mean_spatial(x, graph)


def build_mesh_head(spec: MeshHeadSpec, rng: Optional[np.random.Generator] = None) -> MeshHead:
    """Initialize the classifier convolutions in declaration order."""
    rng = rng if rng is not None else np.random.default_rng(0)
    convs = []
    in_channels = 1
    for index, layer in enumerate(spec.conv_layers):
        convs.append(ConvKernel.initialize(
            layer.out_channels, in_channels, layer.kernel_h, layer.kernel_w, rng, name=f"head.convs.{index}"
        ))
        in_channels = layer.out_channels
    return MeshHead(spec, convs)


def head_forward(mesh: Tensor, head: MeshHead, graph: Optional[ComputeGraph] = None) -> Tensor:
    """Logits (M, num_classes) for a batch of meshes."""
    return head.forward(mesh, graph)


def classify_features(features: Tensor, head: MeshHead, graph: Optional[ComputeGraph] = None) -> Tensor:
    """(N,F,H,W) features -> (N,K,H,W) logits; meshes never mix pixels."""
    n, _, height, width = features.shape
    mesh = ops.to_mesh(features, head.spec.mesh_h, head.spec.mesh_w, graph)
    logits = head.forward(mesh, graph)
    return ops.pixels_to_map(logits, n, height, width, graph)
