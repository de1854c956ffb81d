"""
Parameter containers and layers built on the tensor core.
"""

import logging
from collections import OrderedDict
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from vihe.diffcore import functional as F
from vihe.diffcore.tensor import DEFAULT_DTYPE, Tensor, take
from vihe.exceptions import CheckpointError, ShapeError

logger = logging.getLogger(__name__)


class Parameter(Tensor):
    """A leaf tensor that always requires gradients."""

    def __init__(self, data, name: Optional[str] = None, dtype=None):
        super().__init__(data, requires_grad=True, name=name, dtype=dtype)


class Module:
    """
    Base class for layers. Parameters and sub-modules assigned as attributes
    (or stored in lists) are discovered by named_parameters.
    """

    def __init__(self) -> None:
        self.training = True

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, (Parameter, Module)):
                        yield f"{key}.{i}", item

    def named_parameters(self, prefix: str = "") -> List[Tuple[str, Parameter]]:
        params = []
        for key, value in self._children():
            name = f"{prefix}{key}"
            if isinstance(value, Parameter):
                params.append((name, value))
            else:
                params.extend(value.named_parameters(prefix=f"{name}."))
        return params

    def parameters(self) -> List[Parameter]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for _, value in self._children():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        return OrderedDict((name, p.data.copy()) for name, p in self.named_parameters())

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        """
        Copy arrays into the parameters, keeping each parameter's dtype.

        Raises:
            CheckpointError: On missing, unexpected or mis-shaped entries
        """
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise CheckpointError(f"State mismatch: missing {missing[:5]}, unexpected {unexpected[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise CheckpointError(f"Parameter '{name}' has shape {p.shape}, checkpoint holds {value.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def to_dtype(self, dtype) -> "Module":
        """Cast all parameters, e.g. to float64 for shadow-precision gradient checks."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        return self


def init_normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(DEFAULT_DTYPE)


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True,
                 std: Optional[float] = None):
        super().__init__()
        std = (1.0 / np.sqrt(in_features)) if std is None else std
        self.weight = Parameter(init_normal(rng, (in_features, out_features), std))
        self.bias = Parameter(np.zeros(out_features, dtype=DEFAULT_DTYPE)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"Linear expects {self.weight.shape[0]} features, got {x.shape}")
        return F.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, features: int, eps: float = 1e-5):
        super().__init__()
        self.weight = Parameter(np.ones(features, dtype=DEFAULT_DTYPE))
        self.bias = Parameter(np.zeros(features, dtype=DEFAULT_DTYPE))
        self.eps = eps

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.weight, self.bias, self.eps)


class MLP(Module):
    """Two linear layers with a GELU in between."""

    def __init__(self, in_features: int, hidden: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = Linear(in_features, hidden, rng)
        self.fc2 = Linear(hidden, out_features, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class Embedding(Module):
    """Lookup table of learned vectors."""

    def __init__(self, count: int, dim: int, rng: np.random.Generator, std: float = 0.02):
        super().__init__()
        self.weight = Parameter(init_normal(rng, (count, dim), std))

    def __call__(self, indices: np.ndarray) -> Tensor:
        return take(self.weight, np.asarray(indices).reshape(-1), axis=0)
