"""Tensor storage and reverse-mode differentiation."""
from deep_fext.autograd.tensor import ComputeGraph, ConvKernel, Node, Tensor, backward
from deep_fext.autograd import ops

__all__ = ["ComputeGraph", "ConvKernel", "Node", "Tensor", "backward", "ops"]
