"""
Adaptive-moment optimizer with linear warmup.
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from vihe.diffcore.tensor import Tensor
from vihe.exceptions import NonFiniteGradientError, ShapeError

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """
    Per-parameter first and second moments plus the schedule.

    Attributes:
        m: first moment buffers keyed by parameter name
        v: second moment buffers keyed by parameter name
        step: number of updates applied so far
        lr: peak learning rate
        warmup_steps: linear warmup length
    """
    lr: float = 1e-3
    warmup_steps: int = 100
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def learning_rate(self, step: Optional[int] = None) -> float:
        step = self.step + 1 if step is None else step
        if self.warmup_steps <= 0:
            return self.lr
        return self.lr * min(1.0, step / self.warmup_steps)


def optimizer_step(params: Sequence[Tuple[str, Tensor]], grads: Dict[str, np.ndarray],
                   state: OptimizerState) -> None:
    """
    Apply one Adam update in place of each parameter's buffer.

    All gradients are checked before any parameter changes, so a rejected step
    leaves parameters and moments untouched. Parameters without a gradient entry
    are skipped.

    Args:
        params: (name, tensor) pairs
        grads: gradient arrays keyed by name
        state: optimizer state, advanced by one step

    Raises:
        NonFiniteGradientError: Naming the first parameter with a NaN or infinite gradient
        ShapeError: If a gradient does not match its parameter
    """
    for name, p in params:
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"Gradient for '{name}' has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            logger.error(f"Non-finite gradient in parameter '{name}' at step {state.step + 1}")
            raise NonFiniteGradientError(f"Non-finite gradient in parameter '{name}'")

    state.step += 1
    lr = state.learning_rate(state.step)
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for name, p in params:
        g = grads.get(name)
        if g is None:
            continue
        g = g.astype(np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros(p.shape, dtype=np.float64)
            v = np.zeros(p.shape, dtype=np.float64)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)


class Adam:
    """Convenience wrapper binding named parameters to an OptimizerState."""

    def __init__(self, named_params: List[Tuple[str, Tensor]], lr: float = 1e-3, warmup_steps: int = 100):
        self.params = list(named_params)
        self.state = OptimizerState(lr=lr, warmup_steps=warmup_steps)

    def step(self, grads: Optional[Dict[str, np.ndarray]] = None) -> None:
        if grads is None:
            grads = {name: p.grad for name, p in self.params if p.grad is not None}
        optimizer_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None
