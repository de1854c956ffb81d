"""
Finite-difference gradient checking.
"""

import logging
from typing import Callable, Optional, Sequence

import numpy as np

from vihe.diffcore.tensor import Tensor

logger = logging.getLogger(__name__)


def numerical_gradient(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-3,
                       indices: Optional[Sequence[int]] = None) -> np.ndarray:
    """
    Central differences of the scalar fn() with respect to entries of tensor.

    Entries not listed in indices (flat positions) are left at zero.
    """
    tensor.data = np.ascontiguousarray(tensor.data)
    flat = tensor.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)
    positions = range(flat.size) if indices is None else indices
    for i in positions:
        original = flat[i]
        flat[i] = original + h
        plus = float(fn().data)
        flat[i] = original - h
        minus = float(fn().data)
        flat[i] = original
        grad[i] = (plus - minus) / (2.0 * h)
    return grad.reshape(tensor.shape)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a|| + ||n||, tiny)."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / denom)


def gradcheck(fn: Callable[..., Tensor], inputs: Sequence[Tensor], h: float = 1e-3) -> float:
    """
    Compare analytic and numeric gradients of fn(*inputs) for every input requiring grad.

    Returns:
        The largest relative error over inputs
    """
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    out.backward()
    worst = 0.0
    for t in inputs:
        if not t.requires_grad:
            continue
        numeric = numerical_gradient(lambda: fn(*inputs), t, h)
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        err = relative_error(analytic, numeric)
        logger.debug(f"gradcheck {t.name or t.shape}: relative error {err:.3e}")
        worst = max(worst, err)
    return worst
