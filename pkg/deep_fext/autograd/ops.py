"""
Differentiable primitives used by the extraction network and the mesh head.

Every op takes an optional ``graph``. With ``graph=None`` the op only computes
its output; otherwise it records a node whose backward closure maps the
upstream gradient to one gradient per input.
"""
from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np

from deep_fext.autograd.tensor import ComputeGraph, ConvKernel, Tensor
from deep_fext.models.exceptions import FextError, ErrorTypes


def _require_rank4(tensor: Tensor, op: str) -> Tuple[int, int, int, int]:
    if len(tensor.shape) != 4:
        raise FextError(f"{op} expects (N,C,H,W), got {tensor.shape}", ErrorTypes.SHAPE)
    return tensor.shape


def _pad_nhwc(x: np.ndarray, pad_h: int, pad_w: int) -> np.ndarray:
    """(N,C,H,W) float32 -> zero-padded (N,H+2ph,W+2pw,C) float64."""
    padded = np.pad(x.transpose(0, 2, 3, 1), ((0, 0), (pad_h, pad_h), (pad_w, pad_w), (0, 0)))
    return padded.astype(np.float64)


def conv2d_same(x: Tensor, kernel: ConvKernel, graph: Optional[ComputeGraph] = None) -> Tensor:
    """Zero-padded stride-1 cross-correlation; output keeps the input's H and W."""
    n, channels, height, width = _require_rank4(x, "conv2d_same")
    if kernel.in_channels != channels:
        raise FextError(
            f"kernel expects {kernel.in_channels} input channels, got {channels}",
            ErrorTypes.CONFIGURATION
        )
    pad_h, pad_w = kernel.padding
    weights = kernel.weights.data.astype(np.float64)
    padded = _pad_nhwc(x.data, pad_h, pad_w)

    # Shift-and-accumulate over kernel taps, 64-bit accumulator.
    acc = np.zeros((n, height, width, kernel.out_channels), dtype=np.float64)
    for dy in range(kernel.kernel_h):
        for dx in range(kernel.kernel_w):
            window = padded[:, dy:dy + height, dx:dx + width, :]
            acc += np.tensordot(window, weights[:, :, dy, dx], axes=([3], [1]))
    acc += kernel.bias.data.astype(np.float64)
    out = Tensor(acc.transpose(0, 3, 1, 2))

    if graph is None:
        return out

    def conv_backward(grad: np.ndarray, needs: Tuple[bool, ...]):
        need_x, need_w, need_b = needs
        upstream = grad.astype(np.float64).transpose(0, 2, 3, 1)
        grad_x = grad_w = grad_b = None
        if need_b:
            grad_b = upstream.sum(axis=(0, 1, 2))
        if need_w:
            source = _pad_nhwc(x.data, pad_h, pad_w)
            grad_w = np.zeros_like(weights)
            for dy in range(kernel.kernel_h):
                for dx in range(kernel.kernel_w):
                    window = source[:, dy:dy + height, dx:dx + width, :]
                    grad_w[:, :, dy, dx] = np.tensordot(upstream, window, axes=([0, 1, 2], [0, 1, 2]))
        if need_x:
            grad_padded = np.zeros((n, height + 2 * pad_h, width + 2 * pad_w, channels), dtype=np.float64)
            for dy in range(kernel.kernel_h):
                for dx in range(kernel.kernel_w):
                    grad_padded[:, dy:dy + height, dx:dx + width, :] += np.tensordot(
                        upstream, weights[:, :, dy, dx], axes=([3], [0])
                    )
            grad_x = grad_padded[:, pad_h:pad_h + height, pad_w:pad_w + width, :].transpose(0, 3, 1, 2)
        return grad_x, grad_w, grad_b

    return graph.record("conv2d_same", (x, kernel.weights, kernel.bias), out, conv_backward)


def relu(x: Tensor, graph: Optional[ComputeGraph] = None) -> Tensor:
    """Elementwise max(0, x)."""
    out = Tensor(np.maximum(x.data, 0.0))
    if graph is None:
        return out

    def relu_backward(grad: np.ndarray, _needs):
        return (grad * (x.data > 0),)

    return graph.record("relu", (x,), out, relu_backward)


def concat_channels(inputs: Sequence[Tensor], graph: Optional[ComputeGraph] = None) -> Tensor:
    """Stack (N,C_i,H,W) tensors along channels, in argument order."""
    if not inputs:
        raise FextError("concat_channels needs at least one input", ErrorTypes.SHAPE)
    n, _, height, width = _require_rank4(inputs[0], "concat_channels")
    for tensor in inputs[1:]:
        other_n, _, other_h, other_w = _require_rank4(tensor, "concat_channels")
        if (other_n, other_h, other_w) != (n, height, width):
            raise FextError(
                f"cannot concatenate {tensor.shape} with {inputs[0].shape}: batch/spatial mismatch",
                ErrorTypes.SHAPE
            )
    out = Tensor(np.concatenate([tensor.data for tensor in inputs], axis=1))
    if graph is None:
        return out

    offsets = np.cumsum([0] + [tensor.shape[1] for tensor in inputs])

    def concat_backward(grad: np.ndarray, _needs):
        return tuple(grad[:, offsets[i]:offsets[i + 1]] for i in range(len(inputs)))

    return graph.record("concat_channels", tuple(inputs), out, concat_backward)


def slice_channels(x: Tensor, start: int, stop: int, graph: Optional[ComputeGraph] = None) -> Tensor:
    """Channels [start, stop) of an (N,C,H,W) tensor."""
    _, channels, _, _ = _require_rank4(x, "slice_channels")
    if not 0 <= start < stop <= channels:
        raise FextError(f"channel slice [{start},{stop}) outside 0..{channels}", ErrorTypes.SHAPE)
    out = Tensor(x.data[:, start:stop])
    if graph is None:
        return out

    def slice_backward(grad: np.ndarray, _needs):
        full = np.zeros(x.shape, dtype=grad.dtype)
        full[:, start:stop] = grad
        return (full,)

    return graph.record("slice_channels", (x,), out, slice_backward)


def to_mesh(features: Tensor, mesh_h: int, mesh_w: int, graph: Optional[ComputeGraph] = None) -> Tensor:
    """(N,C,H,W) -> (N*H*W,1,mesh_h,mesh_w); pixel (n,y,x) gets its channel vector row-major."""
    n, channels, height, width = _require_rank4(features, "to_mesh")
    if channels != mesh_h * mesh_w:
        raise FextError(
            f"{channels} features cannot fill a {mesh_h}x{mesh_w} mesh",
            ErrorTypes.CONFIGURATION
        )
    out = Tensor(features.data.transpose(0, 2, 3, 1).reshape(n * height * width, 1, mesh_h, mesh_w))
    if graph is None:
        return out

    def to_mesh_backward(grad: np.ndarray, _needs):
        return (grad.reshape(n, height, width, channels).transpose(0, 3, 1, 2),)

    return graph.record("to_mesh", (features,), out, to_mesh_backward)


def from_mesh(mesh: Tensor, n: int, height: int, width: int, graph: Optional[ComputeGraph] = None) -> Tensor:
    """Inverse of ``to_mesh``."""
    count, _, mesh_h, mesh_w = _require_rank4(mesh, "from_mesh")
    if count != n * height * width:
        raise FextError(f"{count} meshes do not tile a {n}x{height}x{width} batch", ErrorTypes.SHAPE)
    channels = mesh_h * mesh_w
    out = Tensor(mesh.data.reshape(n, height, width, channels).transpose(0, 3, 1, 2))
    if graph is None:
        return out

    def from_mesh_backward(grad: np.ndarray, _needs):
        return (grad.transpose(0, 2, 3, 1).reshape(count, 1, mesh_h, mesh_w),)

    return graph.record("from_mesh", (mesh,), out, from_mesh_backward)


def mean_spatial(x: Tensor, graph: Optional[ComputeGraph] = None) -> Tensor:
    """Global average over H and W: (M,C,H,W) -> (M,C)."""
    _, _, height, width = _require_rank4(x, "mean_spatial")
    out = Tensor(x.data.astype(np.float64).mean(axis=(2, 3)))
    if graph is None:
        return out

    def mean_backward(grad: np.ndarray, _needs):
        spread = grad[:, :, None, None] / float(height * width)
        return (np.broadcast_to(spread, x.shape).copy(),)

    return graph.record("mean_spatial", (x,), out, mean_backward)


def pixels_to_map(logits: Tensor, n: int, height: int, width: int, graph: Optional[ComputeGraph] = None) -> Tensor:
    """(N*H*W,K) per-pixel scores -> (N,K,H,W) map."""
    if len(logits.shape) != 2 or logits.shape[0] != n * height * width:
        raise FextError(f"{logits.shape} does not tile a {n}x{height}x{width} batch", ErrorTypes.SHAPE)
    classes = logits.shape[1]
    out = Tensor(logits.data.reshape(n, height, width, classes).transpose(0, 3, 1, 2))
    if graph is None:
        return out

    def map_backward(grad: np.ndarray, _needs):
        return (grad.transpose(0, 2, 3, 1).reshape(n * height * width, classes),)

    return graph.record("pixels_to_map", (logits,), out, map_backward)


def add(a: Tensor, b: Tensor, graph: Optional[ComputeGraph] = None) -> Tensor:
    """Elementwise sum of equally shaped tensors."""
    if a.shape != b.shape:
        raise FextError(f"cannot add {a.shape} and {b.shape}", ErrorTypes.SHAPE)
    out = Tensor(a.data.astype(np.float64) + b.data)
    if graph is None:
        return out
    return graph.record("add", (a, b), out, lambda grad, _needs: (grad, grad))


def weighted_sum(x: Tensor, weights: np.ndarray, graph: Optional[ComputeGraph] = None) -> Tensor:
    """Scalar sum(x * weights), accumulated in 64 bits."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != x.shape:
        raise FextError(f"weights {weights.shape} do not match {x.shape}", ErrorTypes.SHAPE)
    out = Tensor((x.data.astype(np.float64) * weights).sum(), dtype=np.float64)
    if graph is None:
        return out

    def weighted_backward(grad: np.ndarray, _needs):
        return (grad.item() * weights,)

    return graph.record("weighted_sum", (x,), out, weighted_backward)


def softmax(logits: np.ndarray, axis: int = 1) -> np.ndarray:
    """Numerically stable softmax; not recorded."""
    shifted = logits.astype(np.float64) - logits.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(
    logits: Tensor,
    labels: np.ndarray,
    weight_mask: Optional[np.ndarray] = None,
    graph: Optional[ComputeGraph] = None
) -> Tensor:
    """Weighted mean over pixels of -log softmax(logits)[label]."""
    n, classes, height, width = _require_rank4(logits, "softmax_cross_entropy")
    labels = np.asarray(labels)
    if labels.shape != (n, height, width):
        raise FextError(f"labels {labels.shape} do not match logits {logits.shape}", ErrorTypes.SHAPE)
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise FextError(
            f"labels must lie in [0,{classes}), found range [{labels.min()},{labels.max()}]",
            ErrorTypes.DATA
        )
    if weight_mask is None:
        weights = np.ones((n, height, width), dtype=np.float64)
    else:
        weights = np.asarray(weight_mask, dtype=np.float64)
        if weights.shape != (n, height, width):
            raise FextError(f"weight mask {weights.shape} does not match labels", ErrorTypes.SHAPE)
        if (weights < 0).any():
            raise FextError("weight mask must be nonnegative", ErrorTypes.DATA)

    z = logits.data.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_probs = z - log_norm
    index = labels.astype(np.int64)[:, None]
    nll = -np.take_along_axis(log_probs, index, axis=1)[:, 0]

    total = weights.sum()
    loss_value = (weights * nll).sum() / total if total > 0 else 0.0
    out = Tensor(loss_value, dtype=np.float64)
    if graph is None:
        return out

    def cross_entropy_backward(grad: np.ndarray, _needs):
        if total <= 0:
            return (np.zeros(logits.shape),)
        probs = np.exp(log_probs)
        np.put_along_axis(probs, index, np.take_along_axis(probs, index, axis=1) - 1.0, axis=1)
        return (grad.item() * probs * (weights / total)[:, None],)

    return graph.record("softmax_cross_entropy", (logits,), out, cross_entropy_backward)
