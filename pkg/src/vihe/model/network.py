"""
The multi-stage network: tokens in, per-stage heatmaps and rotation,
gripper and collision logits out.
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Union

import numpy as np

from vihe.config import config_hash
from vihe.core.geometry import CameraRig, EulerBins
from vihe.core.renderer import RenderedStage
from vihe.diffcore import functional as F
from vihe.diffcore.checkpoint import load_checkpoint, read_header, save_checkpoint
from vihe.diffcore.nn import MLP, LayerNorm, Linear, Module
from vihe.diffcore.tensor import Tensor, matmul, take
from vihe.exceptions import ConfigMismatchError
from vihe.model.attention import AttentionBlock, RotaryEmbedding, attention_layer
from vihe.model.config import ModelConfig
from vihe.model.tokens import (Proprioception, StageMask, TokenEmbedder, TokenSet, assemble_tokens,
                               tokenize_language)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class ActionPrediction:
    """
    Outputs of one stage.

    Attributes:
        stage: Stage index
        rig: Camera rig the stage was rendered from
        heatmap_logits: (views, H * W) tensor; softmax per row gives the view heatmap
        rotation_logits: (3, bins) tensor
        open_logit: (1, 1) tensor
        collision_logit: (1, 1) tensor
    """
    stage: int
    rig: CameraRig
    heatmap_logits: Tensor
    rotation_logits: Tensor
    open_logit: Tensor
    collision_logit: Tensor

    @property
    def resolution(self) -> int:
        return self.rig.resolution

    def heatmaps(self) -> np.ndarray:
        """(views, H, W) float64 probabilities, each view summing to 1."""
        logits = self.heatmap_logits.data.astype(np.float64)
        logits = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        res = self.resolution
        return probs.reshape(-1, res, res)

    def rotation_bins(self) -> EulerBins:
        bins = self.rotation_logits.shape[1]
        return EulerBins(tuple(int(i) for i in np.argmax(self.rotation_logits.data, axis=1)), bins)

    @property
    def gripper_open(self) -> bool:
        return bool(self.open_logit.item() > 0.0)

    @property
    def collision_allowed(self) -> bool:
        return bool(self.collision_logit.item() > 0.0)


class VIHENetwork(Module):
    """
    Masked multi-stage transformer.

    Each stage's image tokens attend to tokens of the same or earlier stages,
    so earlier-stage outputs never depend on later-stage inputs.
    """

    def __init__(self, config: ModelConfig, seed: Optional[int] = None):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed if seed is None else seed)
        d = config.model_dim
        self.embedder = TokenEmbedder(config, rng)
        self.rope = RotaryEmbedding(config, rng)
        self.blocks = [AttentionBlock(config, rng) for _ in range(config.layers)]
        self.final_norm = LayerNorm(d)
        self.heatmap_head = Linear(d, config.patch * config.patch, rng)
        head_count = 1 if config.share_stage_heads else config.stages
        outputs = 3 * config.rotation_bins + 2
        self.action_heads = [MLP(config.views * d, d, outputs, rng) for _ in range(head_count)]
        logger.info(f"Initialized network with {self.num_parameters()} parameters "
                    f"({config.layers} layers, d={d}, {config.stages} stages)")

    # -- encoding ---------------------------------------------------------

    def language_ids(self, instruction: Union[str, np.ndarray]) -> np.ndarray:
        if isinstance(instruction, str):
            return tokenize_language(instruction, self.config.language_tokens, self.config.vocab_buckets)
        return np.asarray(instruction, dtype=np.int64)

    def encode(self, stages: Sequence[RenderedStage], instruction: Union[str, np.ndarray],
               proprio: Proprioception) -> TokenSet:
        """Assemble tokens and run them through every attention block."""
        tokens = assemble_tokens(self.embedder, stages, self.language_ids(instruction), proprio)
        mask = StageMask.build(tokens, cross_stage=self.config.cross_stage_attention)
        angles = self.rope.angles(tokens) if self.config.use_rope else None
        for block in self.blocks:
            tokens = attention_layer(block, tokens, mask, angles)
        return tokens.with_embeddings(self.final_norm(tokens.embeddings))

    # -- heads ------------------------------------------------------------

    def _heatmap_logits(self, features: Tensor) -> Tensor:
        config = self.config
        g, p = config.grid, config.patch
        logits = self.heatmap_head(features)
        logits = logits.reshape(config.views, g, g, p, p).transpose(0, 1, 3, 2, 4)
        return logits.reshape(config.views, config.image_resolution ** 2)

    def _pool(self, features: Tensor, heatmap_logits: Tensor) -> Tensor:
        """Image features weighted by the heatmap mass falling in each patch."""
        config = self.config
        g, p = config.grid, config.patch
        probs = F.softmax(heatmap_logits, axis=-1).reshape(config.views, g, p, g, p)
        weights = probs.sum(axis=(2, 4)).reshape(config.views, 1, config.tokens_per_image)
        tokens = features.reshape(config.views, config.tokens_per_image, config.model_dim)
        return matmul(weights, tokens).reshape(1, config.views * config.model_dim)

    def _stage_head(self, stage: int) -> MLP:
        return self.action_heads[0 if self.config.share_stage_heads else stage]

    def forward(self, stages: Sequence[RenderedStage], instruction: Union[str, np.ndarray],
                proprio: Proprioception) -> List[ActionPrediction]:
        """
        Predict every stage present in the input.

        Args:
            stages: Rendered stages 0..k-1 (k >= 1)
            instruction: Text or language token ids
            proprio: Proprioceptive state

        Returns:
            One ActionPrediction per input stage
        """
        tokens = self.encode(stages, instruction, proprio)
        bins = self.config.rotation_bins
        rotation_idx = np.arange(3 * bins)
        predictions = []
        for i, stage in enumerate(stages):
            span = tokens.image_slice(i)
            features = take(tokens.embeddings, np.arange(span.start, span.stop), axis=0)
            heatmap_logits = self._heatmap_logits(features)
            outputs = self._stage_head(i)(self._pool(features, heatmap_logits))
            predictions.append(ActionPrediction(
                stage=i,
                rig=stage.rig,
                heatmap_logits=heatmap_logits,
                rotation_logits=take(outputs, rotation_idx, axis=1).reshape(3, bins),
                open_logit=take(outputs, np.array([3 * bins]), axis=1),
                collision_logit=take(outputs, np.array([3 * bins + 1]), axis=1),
            ))
        return predictions

    __call__ = forward

    # -- persistence ------------------------------------------------------

    def save(self, path: Union[str, Path], extra: Optional[dict] = None) -> None:
        model_section = self.config.to_dict()
        metadata = {'model_config': model_section, 'config_hash': config_hash(model_section)}
        metadata.update(extra or {})
        save_checkpoint(path, self.state_dict(), metadata)

    @classmethod
    def load(cls, path: Union[str, Path], expected: Optional[ModelConfig] = None) -> "VIHENetwork":
        """
        Load a checkpoint; when expected is given, refuse a different configuration.

        Raises:
            ConfigMismatchError: If the stored configuration differs from expected
        """
        tensors, metadata = load_checkpoint(path)
        stored = ModelConfig.from_dict(metadata['model_config'])
        if expected is not None and stored != expected:
            diff = {k: (v, expected.to_dict()[k]) for k, v in stored.to_dict().items()
                    if expected.to_dict()[k] != v}
            logger.error(f"Checkpoint {path} was trained with a different configuration: {diff}")
            raise ConfigMismatchError(f"Checkpoint configuration differs (stored, requested): {diff}")
        model = cls(stored)
        model.load_state_dict(tensors)
        logger.info(f"Loaded checkpoint {path}")
        return model


def checkpoint_summary(path: Union[str, Path]) -> dict:
    """Header metadata and tensor table of a checkpoint, without loading weights."""
    header = read_header(path)
    tensors = header.get('tensors', [])
    return {
        'version': header['version'],
        'metadata': header.get('metadata', {}),
        'tensor_count': len(tensors),
        'parameter_count': int(sum(int(np.prod(t['shape'])) for t in tensors)),
        'tensors': [{'name': t['name'], 'shape': t['shape']} for t in tensors],
    }
