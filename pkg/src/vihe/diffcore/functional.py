"""
Fused differentiable operations for the transformer: softmax, layer norm,
GELU, patch convolution and cross-entropy, each with an analytic backward.
"""

import logging
from typing import Optional, Union

import numpy as np

from vihe.diffcore.tensor import Tensor, matmul
from vihe.exceptions import DiffCoreError, ShapeError

logger = logging.getLogger(__name__)

_GELU_C = float(np.sqrt(2.0 / np.pi))
TARGET_SUM_TOLERANCE = 1e-6


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return Tensor._from_op(out, (x,), backward, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return Tensor._from_op(out, (x,), backward, "log_softmax")


def layer_norm(x: Tensor, weight: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if weight.shape != (x.shape[-1],) or bias.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm weight/bias {weight.shape}/{bias.shape} do not match features {x.shape[-1]}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + eps)
    xhat = centered * inv_std
    out = xhat * weight.data + bias.data
    lead = tuple(range(x.ndim - 1))

    def backward(g):
        gxhat = g * weight.data
        gx = inv_std * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)
    return Tensor._from_op(out, (x, weight, bias), backward, "layer_norm")


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    a = x.data
    inner = _GELU_C * (a + 0.044715 * a ** 3)
    t = np.tanh(inner)
    out = 0.5 * a * (1.0 + t)

    def backward(g):
        d_inner = _GELU_C * (1.0 + 3.0 * 0.044715 * a * a)
        return (g * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner),)
    return Tensor._from_op(out, (x,), backward, "gelu")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    out = matmul(x, weight)
    return out if bias is None else out + bias


def _patches(images: np.ndarray, patch: int) -> np.ndarray:
    views, height, width, channels = images.shape
    gh, gw = height // patch, width // patch
    blocks = images.reshape(views, gh, patch, gw, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    return blocks.reshape(views, gh * gw, patch * patch * channels)


def conv2d_patchify(images: Tensor, weight: Tensor, bias: Tensor, patch: int) -> Tensor:
    """
    Single convolution with kernel = stride = patch over (V, H, W, C) images.

    Args:
        images: (V, H, W, C) input
        weight: (patch * patch * C, D) kernel flattened in (row, col, channel) order
        bias: (D,) bias
        patch: Kernel size and stride

    Returns:
        (V, (H / patch) * (W / patch), D) patch tokens in row-major patch order

    Raises:
        ShapeError: If the image size is not divisible by patch or weights do not match
    """
    if images.ndim != 4:
        raise ShapeError(f"conv2d_patchify expects (V, H, W, C), got {images.shape}")
    views, height, width, channels = images.shape
    if height % patch or width % patch:
        raise ShapeError(f"image {height}x{width} is not divisible by patch {patch}")
    if weight.shape[0] != patch * patch * channels or bias.shape != (weight.shape[1],):
        raise ShapeError(f"kernel {weight.shape}/{bias.shape} does not match patch {patch} x {channels} channels")
    cols = _patches(images.data, patch)
    out = cols @ weight.data + bias.data
    gh, gw = height // patch, width // patch

    def backward(g):
        gimages = None
        if images.requires_grad:
            gcols = g @ weight.data.T
            gimages = (gcols.reshape(views, gh, gw, patch, patch, channels)
                       .transpose(0, 1, 3, 2, 4, 5).reshape(images.shape))
        gweight = np.einsum('vnk,vnd->kd', cols, g)
        return gimages, gweight, g.sum(axis=(0, 1))
    return Tensor._from_op(out, (images, weight, bias), backward, "conv2d_patchify")


def cross_entropy(logits: Tensor, target: Union[np.ndarray, Tensor]) -> Tensor:
    """
    Mean over rows of -sum(target * log_softmax(logits)).

    Args:
        logits: (R, K) scores
        target: (R, K) distributions, each row summing to 1

    Returns:
        Scalar tensor

    Raises:
        ShapeError: If shapes differ
        DiffCoreError: If a target row is not normalized
    """
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    if logits.ndim != 2 or target.shape != logits.shape:
        raise ShapeError(f"cross_entropy needs matching (R, K) shapes, got {logits.shape} and {target.shape}")
    row_sums = target.astype(np.float64).sum(axis=1)
    if np.any(np.abs(row_sums - 1.0) > TARGET_SUM_TOLERANCE) or np.any(target < 0):
        raise DiffCoreError(f"cross_entropy targets must be distributions; row sums {row_sums}")
    target = target.astype(logits.dtype)
    rows = logits.shape[0]
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = np.asarray(-(target * log_probs).sum() / rows, dtype=logits.dtype)

    def backward(g):
        return ((np.exp(log_probs) - target) * (g / rows),)
    return Tensor._from_op(loss, (logits,), backward, "cross_entropy")
