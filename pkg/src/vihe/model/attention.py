"""
Masked multi-head self-attention with 3-axis rotary position embeddings.

Image tokens rotate query/key pairs by angles proportional to their world
position: the head dimension is split into three equal blocks of pairs, one
per axis (any leftover pairs stay unrotated). Language and proprioception
tokens have no position and use learned per-pair phases instead.
"""

import logging
from typing import Optional

import numpy as np

from vihe.diffcore import functional as F
from vihe.diffcore.nn import MLP, LayerNorm, Linear, Module, Parameter, init_normal
from vihe.diffcore.tensor import Tensor, concat, matmul, take, transpose
from vihe.exceptions import ShapeError
from vihe.model.config import ModelConfig
from vihe.model.tokens import KIND_IMAGE, StageMask, TokenSet

logger = logging.getLogger(__name__)


def rope_frequencies(config: ModelConfig) -> np.ndarray:
    pairs_per_axis = (config.head_dim // 2) // 3
    return config.rope_base ** (-np.arange(pairs_per_axis, dtype=np.float64) / max(pairs_per_axis, 1))


def rope_angles(positions: np.ndarray, config: ModelConfig) -> np.ndarray:
    """
    Rotation angle of every query/key pair for tokens at world positions.

    Args:
        positions: (N, 3) meters
        config: Model configuration (head_dim, rope_base, rope_scale)

    Returns:
        (N, head_dim // 2) angles in radians
    """
    pairs = config.head_dim // 2
    freqs = rope_frequencies(config)
    per_axis = freqs.shape[0]
    angles = np.zeros((positions.shape[0], pairs), dtype=np.float64)
    for axis in range(3):
        block = positions[:, axis:axis + 1] * config.rope_scale * freqs[None, :]
        angles[:, axis * per_axis:(axis + 1) * per_axis] = block
    return angles


def _pair_layout(head_dim: int):
    expand = np.repeat(np.arange(head_dim // 2), 2)
    swap = np.arange(head_dim).reshape(-1, 2)[:, ::-1].reshape(-1)
    sign = np.tile(np.array([-1.0, 1.0]), head_dim // 2)
    return expand, swap, sign


def apply_rope(x: Tensor, angles: Tensor) -> Tensor:
    """
    Rotate consecutive (even, odd) feature pairs of x by per-token angles.

    Args:
        x: (heads, T, head_dim)
        angles: (T, head_dim // 2)
    """
    head_dim = x.shape[-1]
    if angles.shape != (x.shape[-2], head_dim // 2):
        raise ShapeError(f"RoPE angles {angles.shape} do not match features {x.shape}")
    expand, swap, sign = _pair_layout(head_dim)
    full = take(angles, expand, axis=1)
    rotated = take(x, swap, axis=-1) * Tensor(sign.astype(x.dtype))
    return x * full.cos() + rotated * full.sin()


class RotaryEmbedding(Module):
    """Per-token rotary angles: fixed for image tokens, learned for the rest."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        pairs = config.head_dim // 2
        self.phase = Parameter(init_normal(rng, (config.language_tokens + 1, pairs), 0.02))

    def angles(self, tokens: TokenSet) -> Tensor:
        image = tokens.kinds == KIND_IMAGE
        n_other = int((~image).sum())
        if n_other != self.phase.shape[0] or np.any(image[:n_other]):
            raise ShapeError("Rotary embedding expects language and proprioception tokens first")
        fixed = rope_angles(tokens.positions[image], self.config).astype(self.phase.dtype)
        return concat([self.phase, Tensor(fixed)], axis=0)


class AttentionBlock(Module):
    """Pre-norm transformer block: x + attn(norm(x)), then x + mlp(norm(x))."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = config.model_dim
        self.heads = config.heads
        self.head_dim = config.head_dim
        self.norm1 = LayerNorm(d)
        self.qkv = Linear(d, 3 * d, rng)
        self.proj = Linear(d, d, rng, std=0.02)
        self.norm2 = LayerNorm(d)
        self.mlp = MLP(d, config.mlp_ratio * d, d, rng)

    def _split(self, x: Tensor):
        tokens = x.shape[0]
        qkv = self.qkv(self.norm1(x)).reshape(tokens, 3, self.heads, self.head_dim)
        qkv = transpose(qkv, (1, 2, 0, 3))
        shape = (self.heads, tokens, self.head_dim)
        return [take(qkv, np.array([i]), axis=0).reshape(shape) for i in range(3)]

    def scores(self, x: Tensor, mask: np.ndarray, angles: Optional[Tensor] = None) -> Tensor:
        """Masked, scaled attention logits (heads, T, T) before the softmax."""
        q, k, _ = self._split(x)
        return self._scores(q, k, mask, angles)

    def _scores(self, q: Tensor, k: Tensor, mask: np.ndarray, angles: Optional[Tensor]) -> Tensor:
        if angles is not None:
            q = apply_rope(q, angles)
            k = apply_rope(k, angles)
        logits = matmul(q, transpose(k, (0, 2, 1))) * (1.0 / np.sqrt(self.head_dim))
        return logits + Tensor(mask.astype(logits.dtype))

    def __call__(self, x: Tensor, mask: np.ndarray, angles: Optional[Tensor] = None) -> Tensor:
        tokens, d = x.shape
        if mask.shape != (tokens, tokens):
            raise ShapeError(f"Mask {mask.shape} does not match {tokens} tokens")
        q, k, v = self._split(x)
        weights = F.softmax(self._scores(q, k, mask, angles), axis=-1)
        attended = transpose(matmul(weights, v), (1, 0, 2)).reshape(tokens, d)
        x = x + self.proj(attended)
        return x + self.mlp(self.norm2(x))


def attention_layer(block: AttentionBlock, tokens: TokenSet, mask: StageMask,
                    angles: Optional[Tensor] = None) -> TokenSet:
    """Run one attention block over a token set; bookkeeping is carried through unchanged."""
    return tokens.with_embeddings(block(tokens.embeddings, mask.values, angles))
