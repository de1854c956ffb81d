"""Dense tensor core with reverse-mode differentiation."""

from vihe.diffcore.tensor import Graph, Tensor, no_grad
from vihe.diffcore.nn import Module, Parameter
from vihe.diffcore.optim import Adam, OptimizerState, optimizer_step

__all__ = ['Graph', 'Tensor', 'no_grad', 'Module', 'Parameter', 'Adam', 'OptimizerState', 'optimizer_step']
