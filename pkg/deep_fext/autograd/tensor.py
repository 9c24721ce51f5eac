"""
Dense tensors, the define-by-run compute graph and convolution kernels.

A ``ComputeGraph`` is rebuilt for every forward pass. Ops append one node per
output tensor; ``backward`` walks the nodes in exact reverse order, so the
construction order is the topological order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from deep_fext.models.exceptions import FextError, ErrorTypes

logger = logging.getLogger(__name__)

BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Sequence[Optional[np.ndarray]]]


class Tensor:
    """32-bit dense array with an optional gradient buffer.

    Scalar losses pass ``dtype=np.float64`` so their value keeps the 64-bit accumulator.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None, dtype=np.float32):
        array = np.ascontiguousarray(data, dtype=dtype)
        if any(extent < 1 for extent in array.shape):
            raise FextError(f"Tensor extents must be >= 1, got {array.shape}", ErrorTypes.SHAPE)
        self.data = array
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        """Extents, batch-outermost."""
        return self.data.shape

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self) -> None:
        """Reset the gradient buffer to exact zeros."""
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        """Value of a single-element tensor."""
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    """One recorded operation."""
    op: str
    inputs: Tuple[int, ...]
    output: Tensor
    backward: Optional[BackwardFn] = None


class ComputeGraph:
    """Ordered operation records for one forward pass."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._index: Dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def node_id(self, tensor: Tensor) -> int:
        """Id of the node producing ``tensor``; unseen tensors become leaf nodes."""
        key = id(tensor)
        if key not in self._index:
            self._index[key] = len(self.nodes)
            self.nodes.append(Node(op="leaf", inputs=(), output=tensor))
        return self._index[key]

    def contains(self, tensor: Tensor) -> bool:
        return id(tensor) in self._index

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> Tensor:
        """Append a node; the output requires grad when any input does."""
        input_ids = tuple(self.node_id(tensor) for tensor in inputs)
        output.requires_grad = any(tensor.requires_grad for tensor in inputs)
        self._index[id(output)] = len(self.nodes)
        self.nodes.append(Node(op=op, inputs=input_ids, output=output, backward=backward))
        return output

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` of every leaf that requires it with d(loss)/d(leaf)."""
        if not self.nodes or not self.contains(loss):
            raise FextError("backward called before a forward pass produced the loss", ErrorTypes.STATE)
        if loss.size != 1:
            raise FextError(f"loss must be scalar, got shape {loss.shape}", ErrorTypes.STATE)
        if not np.isfinite(loss.data).all():
            raise FextError(f"non-finite loss {loss.item()}", ErrorTypes.NUMERIC)

        grads: Dict[int, np.ndarray] = {self._index[id(loss)]: np.ones_like(loss.data)}

        for node_id in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[node_id]
            upstream = grads.pop(node_id, None)

            if node.op == "leaf":
                if node.output.requires_grad:
                    if node.output.grad is None:
                        node.output.zero_grad()
                    if upstream is not None:
                        node.output.grad += upstream.astype(np.float32, copy=False)
                continue

            if upstream is None or not node.output.requires_grad:
                continue

            needs = tuple(self.nodes[i].output.requires_grad for i in node.inputs)
            input_grads = node.backward(upstream, needs)
            for input_id, need, grad in zip(node.inputs, needs, input_grads):
                if not need or grad is None:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + grad
                else:
                    grads[input_id] = grad


def backward(graph: ComputeGraph, loss: Tensor) -> None:
    """Reverse-mode pass over ``graph`` starting at the scalar ``loss``."""
    graph.backward(loss)


class ConvKernel:
    """Weights (out, in, kh, kw) and bias (out,) of one same-size convolution."""

    def __init__(self, weights: Tensor, bias: Tensor):
        if len(weights.shape) != 4:
            raise FextError(f"kernel weights must be rank 4, got {weights.shape}", ErrorTypes.CONFIGURATION)
        out_channels, _, kernel_h, kernel_w = weights.shape
        if kernel_h % 2 == 0 or kernel_w % 2 == 0:
            raise FextError(
                f"kernel extents must be odd for same padding, got {kernel_h}x{kernel_w}",
                ErrorTypes.CONFIGURATION
            )
        if bias.shape != (out_channels,):
            raise FextError(
                f"bias shape {bias.shape} does not match {out_channels} output channels",
                ErrorTypes.CONFIGURATION
            )
        self.weights = weights
        self.bias = bias

    @classmethod
    def initialize(
        cls,
        out_channels: int,
        in_channels: int,
        kernel_h: int,
        kernel_w: int,
        rng: np.random.Generator,
        name: str = "conv"
    ) -> "ConvKernel":
        """He-style uniform weights bounded by sqrt(6 / fan_in), zero bias."""
        if kernel_h % 2 == 0 or kernel_w % 2 == 0:
            raise FextError(
                f"kernel extents must be odd for same padding, got {kernel_h}x{kernel_w}",
                ErrorTypes.CONFIGURATION
            )
        fan_in = in_channels * kernel_h * kernel_w
        bound = np.sqrt(6.0 / fan_in)
        weights = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_h, kernel_w))
        return cls(
            Tensor(weights, requires_grad=True, name=f"{name}.weight"),
            Tensor(np.zeros(out_channels), requires_grad=True, name=f"{name}.bias"),
        )

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]

    @property
    def padding(self) -> Tuple[int, int]:
        return (self.kernel_h - 1) // 2, (self.kernel_w - 1) // 2

    @property
    def weight_count(self) -> int:
        return self.weights.size

    @property
    def parameter_count(self) -> int:
        return self.weights.size + self.bias.size

    def parameters(self) -> List[Tensor]:
        return [self.weights, self.bias]

    def __repr__(self) -> str:
        return f"ConvKernel({self.out_channels}<-{self.in_channels}, {self.kernel_h}x{self.kernel_w})"
