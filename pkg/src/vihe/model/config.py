"""
Model configuration: sizes, token arithmetic and ablation switches.
"""

import logging
from dataclasses import asdict, dataclass, fields, replace
from typing import Any, Dict

from vihe.exceptions import ModelError

logger = logging.getLogger(__name__)

CHANNELS = 7
PROPRIO_FEATURES = 9


@dataclass(frozen=True)
class ModelConfig:
    """
    Network hyper-parameters.

    Toy defaults run on a desktop core; full_scale() returns the full-size
    setting (110 px renders, 11 px patches, 77 language tokens, 8 layers) and
    decodes translation on every fifth pixel footprint, about 10^4 candidates.
    """
    stages: int = 3
    views: int = 5
    image_resolution: int = 64
    patch: int = 8
    language_tokens: int = 8
    layers: int = 4
    model_dim: int = 128
    heads: int = 4
    mlp_ratio: int = 2
    rotation_bins: int = 72
    vocab_buckets: int = 1024
    rope_base: float = 10000.0
    rope_scale: float = 100.0
    cross_stage_attention: bool = True
    relative_refinement: bool = True
    use_rope: bool = True
    zoom_in: bool = True
    follow_rotation: bool = True
    look_inward: bool = True
    share_stage_heads: bool = False
    candidate_stride: int = 1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.image_resolution % self.patch:
            raise ModelError(f"image_resolution {self.image_resolution} is not divisible by patch {self.patch}")
        if self.model_dim % self.heads:
            raise ModelError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.head_dim % 2:
            raise ModelError(f"head dimension {self.head_dim} must be even for rotary embeddings")
        if self.use_rope and self.head_dim < 6:
            raise ModelError(f"head dimension {self.head_dim} is too small for 3-axis rotary embeddings")
        if not 1 <= self.stages:
            raise ModelError(f"stages must be >= 1, got {self.stages}")
        if self.views != 5:
            raise ModelError(f"the camera rig has 5 views, got {self.views}")
        if 360 % self.rotation_bins:
            raise ModelError(f"rotation_bins {self.rotation_bins} must divide 360")
        if self.vocab_buckets < 2 or self.language_tokens < 1:
            raise ModelError("vocab_buckets must be >= 2 and language_tokens >= 1")
        if self.candidate_stride < 1:
            raise ModelError(f"candidate_stride must be >= 1, got {self.candidate_stride}")

    @property
    def grid(self) -> int:
        return self.image_resolution // self.patch

    @property
    def tokens_per_image(self) -> int:
        return self.grid * self.grid

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def total_tokens(self) -> int:
        """Language plus image tokens over all stages (the proprioception token is extra)."""
        return self.language_tokens + self.stages * self.views * self.tokens_per_image

    def tokens_for(self, stage_count: int) -> int:
        """Sequence length fed to the transformer for stage_count stages, proprioception included."""
        return self.language_tokens + 1 + stage_count * self.views * self.tokens_per_image

    @property
    def bin_width_deg(self) -> float:
        return 360.0 / self.rotation_bins

    @classmethod
    def from_dict(cls, values: Dict[str, Any]) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ModelError(f"Unknown model configuration keys: {unknown}")
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def replace(self, **changes) -> "ModelConfig":
        return replace(self, **changes)

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        values = dict(image_resolution=110, patch=11, language_tokens=77, layers=8,
                      model_dim=192, heads=4, candidate_stride=5)
        values.update(overrides)
        return cls(**values)
