"""
Token assembly: language, proprioception and image patch tokens, with the
per-token stage index, view id and 3D position used by the stage mask and
the rotary embedding.
"""

import hashlib
import logging
import re
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from vihe.core.geometry import Pose
from vihe.core.renderer import RenderedStage
from vihe.diffcore import functional as F
from vihe.diffcore.nn import MLP, Embedding, Module, Parameter, init_normal
from vihe.diffcore.tensor import Tensor, concat, take
from vihe.exceptions import ModelError
from vihe.model.config import CHANNELS, PROPRIO_FEATURES, ModelConfig

logger = logging.getLogger(__name__)

PAD_TOKEN = 0
KIND_LANGUAGE = 0
KIND_PROPRIO = 1
KIND_IMAGE = 2
MASK_BLOCKED = -1e9

_WORD_RE = re.compile(r"[a-z0-9]+")


def word_bucket(word: str, vocab_buckets: int) -> int:
    """Stable hash bucket in [1, vocab_buckets) for one lowercase word."""
    digest = hashlib.sha256(word.encode('utf-8')).digest()
    return 1 + int.from_bytes(digest[:8], 'little') % (vocab_buckets - 1)


def tokenize_language(instruction: str, language_tokens: int, vocab_buckets: int) -> np.ndarray:
    """
    Hash-bucket token ids for an instruction, padded or truncated to language_tokens.

    Words are lowercase alphanumeric runs; id 0 is padding.
    """
    words = _WORD_RE.findall(instruction.lower())
    ids = np.full(language_tokens, PAD_TOKEN, dtype=np.int64)
    for i, word in enumerate(words[:language_tokens]):
        ids[i] = word_bucket(word, vocab_buckets)
    if len(words) > language_tokens:
        logger.debug(f"Instruction truncated from {len(words)} to {language_tokens} words")
    return ids


@dataclass(frozen=True)
class Proprioception:
    """Gripper state, normalized episode time and current end-effector pose."""
    gripper_open: bool
    timestep: float
    pose: Pose

    def __post_init__(self) -> None:
        if not 0.0 <= self.timestep <= 1.0:
            raise ModelError(f"timestep must lie in [0, 1], got {self.timestep}")

    def features(self) -> np.ndarray:
        return np.concatenate([[1.0 if self.gripper_open else 0.0, self.timestep],
                               self.pose.translation, self.pose.rotation]).astype(np.float32)


@dataclass(frozen=True, eq=False)
class TokenSet:
    """
    Token embeddings with their bookkeeping.

    Attributes:
        embeddings: (T, d) tensor
        stages: (T,) stage index per token; language and proprioception tokens carry 0
        kinds: (T,) KIND_LANGUAGE, KIND_PROPRIO or KIND_IMAGE
        views: (T,) view id for image tokens, -1 otherwise
        positions: (T, 3) world position for image tokens, NaN otherwise
    """
    embeddings: Tensor
    stages: np.ndarray
    kinds: np.ndarray
    views: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return int(self.stages.shape[0])

    def image_slice(self, stage: int) -> slice:
        """Contiguous token range holding the image tokens of one stage."""
        idx = np.flatnonzero((self.kinds == KIND_IMAGE) & (self.stages == stage))
        if idx.size == 0:
            raise ModelError(f"No image tokens for stage {stage}")
        return slice(int(idx[0]), int(idx[-1]) + 1)

    def with_embeddings(self, embeddings: Tensor) -> "TokenSet":
        return TokenSet(embeddings, self.stages, self.kinds, self.views, self.positions)


@dataclass(frozen=True, eq=False)
class StageMask:
    """Additive (T, T) mask: 0 where the query may attend to the key, MASK_BLOCKED otherwise."""
    values: np.ndarray

    @classmethod
    def build(cls, tokens: TokenSet, cross_stage: bool = True) -> "StageMask":
        """
        With cross_stage, key k is visible to query q iff stage(k) <= stage(q).
        Without it, image tokens see only their own stage plus the language and
        proprioception tokens.
        """
        q_stage = tokens.stages[:, None]
        k_stage = tokens.stages[None, :]
        if cross_stage:
            allowed = k_stage <= q_stage
        else:
            allowed = (k_stage == q_stage) | (tokens.kinds[None, :] != KIND_IMAGE)
        return cls(np.where(allowed, 0.0, MASK_BLOCKED).astype(np.float32))

    @property
    def shape(self):
        return self.values.shape


def patch_positions(stage: RenderedStage, patch: int) -> np.ndarray:
    """
    World position of every patch: mean world xyz over its hit pixels, or the
    rig anchor when the patch has no hit.

    Returns:
        (views * patches, 3) in view-major, row-major patch order
    """
    res = stage.resolution
    grid = res // patch
    xyz = np.stack([view.xyz for view in stage.views])
    hits = np.stack([view.hit_mask for view in stage.views]).astype(np.float64)
    views = xyz.shape[0]
    xyz_blocks = (xyz * hits[..., None]).reshape(views, grid, patch, grid, patch, 3).sum(axis=(2, 4))
    counts = hits.reshape(views, grid, patch, grid, patch).sum(axis=(2, 4))
    anchor = stage.rig.anchor.translation
    with np.errstate(invalid='ignore', divide='ignore'):
        mean = xyz_blocks / counts[..., None]
    positions = np.where(counts[..., None] > 0, mean, anchor)
    return positions.reshape(views * grid * grid, 3)


class TokenEmbedder(Module):
    """Learned embeddings turning raw inputs into the token sequence."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        d = config.model_dim
        self.config = config
        self.word_embedding = Embedding(config.vocab_buckets, d, rng)
        self.language_position = Parameter(init_normal(rng, (config.language_tokens, d), 0.02))
        self.proprio_mlp = MLP(PROPRIO_FEATURES, d, d, rng)
        fan_in = config.patch * config.patch * CHANNELS
        self.patch_weight = Parameter(init_normal(rng, (fan_in, d), 1.0 / np.sqrt(fan_in)))
        self.patch_bias = Parameter(np.zeros(d, dtype=np.float32))
        self.view_embedding = Parameter(init_normal(rng, (config.views, 1, d), 0.02))
        self.patch_embedding = Parameter(init_normal(rng, (config.tokens_per_image, d), 0.02))
        self.stage_embedding = Parameter(init_normal(rng, (config.stages, d), 0.02))

    def language(self, ids: np.ndarray) -> Tensor:
        return self.word_embedding(ids) + self.language_position

    def proprioception(self, proprio: Proprioception) -> Tensor:
        features = Tensor(proprio.features()[None, :], dtype=self.patch_weight.dtype)
        return self.proprio_mlp(features)

    def images(self, stage: RenderedStage, stage_index: int) -> Tensor:
        config = self.config
        if stage.resolution != config.image_resolution:
            raise ModelError(f"Stage {stage_index} renders are {stage.resolution} px, "
                             f"model expects {config.image_resolution}")
        if len(stage.views) != config.views:
            raise ModelError(f"Stage {stage_index} has {len(stage.views)} views, expected {config.views}")
        pixels = Tensor(stage.network_input(), dtype=self.patch_weight.dtype)
        patches = F.conv2d_patchify(pixels, self.patch_weight, self.patch_bias, config.patch)
        stage_emb = take(self.stage_embedding, np.array([stage_index]), axis=0)
        out = patches + self.view_embedding + self.patch_embedding + stage_emb
        return out.reshape(config.views * config.tokens_per_image, config.model_dim)


def assemble_tokens(embedder: TokenEmbedder, stages: Sequence[RenderedStage], language_ids: np.ndarray,
                    proprio: Proprioception) -> TokenSet:
    """
    Build the token sequence [language, proprioception, stage 0 images, stage 1 images, ...].

    Args:
        embedder: Learned embeddings
        stages: One to config.stages rendered stages, in stage order
        language_ids: (language_tokens,) ids from tokenize_language
        proprio: Proprioceptive state

    Returns:
        TokenSet

    Raises:
        ModelError: On an empty or oversized stage list, or renders of the wrong size
    """
    config = embedder.config
    if not 1 <= len(stages) <= config.stages:
        raise ModelError(f"Expected 1 to {config.stages} stages, got {len(stages)}")
    if language_ids.shape != (config.language_tokens,):
        raise ModelError(f"Expected {config.language_tokens} language ids, got {language_ids.shape}")

    parts: List[Tensor] = [embedder.language(language_ids), embedder.proprioception(proprio)]
    k_lang = config.language_tokens
    stage_ids = [np.zeros(k_lang + 1, dtype=np.int64)]
    kinds = [np.full(k_lang, KIND_LANGUAGE), np.array([KIND_PROPRIO])]
    views = [np.full(k_lang + 1, -1)]
    positions = [np.full((k_lang + 1, 3), np.nan)]
    n_img = config.tokens_per_image
    for i, stage in enumerate(stages):
        parts.append(embedder.images(stage, i))
        count = config.views * n_img
        stage_ids.append(np.full(count, i))
        kinds.append(np.full(count, KIND_IMAGE))
        views.append(np.repeat(np.arange(config.views), n_img))
        positions.append(patch_positions(stage, config.patch))

    return TokenSet(
        embeddings=concat(parts, axis=0),
        stages=np.concatenate(stage_ids).astype(np.int64),
        kinds=np.concatenate(kinds).astype(np.int64),
        views=np.concatenate(views).astype(np.int64),
        positions=np.concatenate(positions).astype(np.float64),
    )
