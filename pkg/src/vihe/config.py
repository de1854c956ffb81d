import copy
import hashlib
import json
import logging
import os
from typing import Any, Optional

import yaml

logger = logging.getLogger(__name__)


DEFAULT_CONFIG = {
    'model': {
        'stages': 3,
        'views': 5,
        'image_resolution': 64,
        'patch': 8,
        'language_tokens': 8,
        'layers': 4,
        'model_dim': 128,
        'heads': 4,
        'mlp_ratio': 2,
        'rotation_bins': 72,
        'vocab_buckets': 1024,
        'rope_base': 10000.0,
        'rope_scale': 100.0,
        'cross_stage_attention': True,
        'relative_refinement': True,
        'use_rope': True,
        'zoom_in': True,
        'follow_rotation': True,
        'look_inward': True,
        'share_stage_heads': False,
        'candidate_stride': 1,
        'seed': 0,
    },
    'workspace': {
        'min': [-0.5, -0.5, 0.0],
        'max': [0.5, 0.5, 1.0],
        'inflation': 0.5,
    },
    'rendering': {
        'splat_radius': 1,
        'workers': 1,
    },
    'perturbation': {
        'translation_fraction': 0.15,
        'max_rotation_deg': 10.0,
        'stage_scale': [0.0, 1.0, 1.0],
    },
    'training': {
        'lr': 1e-3,
        'warmup_steps': 100,
        'batch_size': 4,
        'sigma_px': 1.5,
        'v_eps': 1e-3,
        'workers': 1,
        'seed': 0,
    },
    'evaluation': {
        'episodes': 25,
        'workers': 1,
        'stages': [0, 1, 2],
    },
    'logging': {
        'level': 'INFO',
        'file': None,
    },
}


class ConfigManager:
    """
    Manages run configuration using a YAML file with environment variable overrides.
    """
    def __init__(self, config_path: Optional[str] = "config.yaml", create_missing: bool = True) -> None:
        """
        Initialize the ConfigManager and load configuration from a YAML file.
        :param config_path: Path to the YAML configuration file, or None for defaults only.
        :param create_missing: Write the defaults to config_path when the file does not exist.
        """
        self.config_path = config_path
        self.create_missing = create_missing
        self._config = self._load_config()

    def _load_config(self) -> dict:
        """
        Load configuration from the YAML file.
        :return: Configuration dictionary.
        """
        default_config = copy.deepcopy(DEFAULT_CONFIG)

        if self.config_path is None:
            return default_config

        if not os.path.exists(self.config_path):
            if not self.create_missing:
                raise FileNotFoundError(f"Configuration file not found: {self.config_path}")
            self._config = default_config
            self.save()
            logger.info(f"Wrote default configuration to {self.config_path}")
            return default_config

        with open(self.config_path, 'r', encoding='utf-8') as f:
            loaded_config = yaml.safe_load(f) or {}

        # Merge with defaults to ensure all keys exist
        return self._merge_configs(default_config, loaded_config)

    def get(self, key: str, default: Optional[Any] = None) -> Any:
        """
        Get a configuration value, checking environment variables first.
        :param key: Configuration key (dot notation supported for nested keys).
        :param default: Default value if key is not found.
        :return: Configuration value.
        """
        env_key = key.upper().replace('.', '_')
        if env_key in os.environ:
            return yaml.safe_load(os.environ[env_key])
        return self._get_nested(self._config, key.split('.'), default)

    def section(self, name: str) -> dict:
        """
        Return a copy of a top-level section with environment overrides applied.
        :param name: Section name, e.g. 'model'.
        :return: Section dictionary.
        """
        raw = self._config.get(name, {})
        if not isinstance(raw, dict):
            return raw
        return {key: self.get(f"{name}.{key}", value) for key, value in raw.items()}

    def set(self, key: str, value: Any) -> None:
        """
        Set a configuration value at runtime.
        :param key: Configuration key (dot notation supported for nested keys).
        :param value: Value to set.
        """
        self._set_nested(self._config, key.split('.'), value)

    def as_dict(self) -> dict:
        return copy.deepcopy(self._config)

    def resolved(self) -> dict:
        """
        Return every top-level section with environment overrides applied.
        :return: Configuration dictionary.
        """
        return copy.deepcopy({name: self.section(name) for name in self._config})

    def save(self, path: Optional[str] = None) -> None:
        """
        Save the current configuration back to the YAML file.
        """
        target = path or self.config_path
        if target is None:
            raise ValueError("No configuration path to save to")
        with open(target, 'w', encoding='utf-8') as f:
            yaml.safe_dump(self._config, f)

    @staticmethod
    def _get_nested(config: dict, keys: list, default: Any) -> Any:
        d = config
        for k in keys:
            if isinstance(d, dict) and k in d:
                d = d[k]
            else:
                return default
        return d

    @staticmethod
    def _set_nested(config: dict, keys: list, value: Any) -> None:
        d = config
        for k in keys[:-1]:
            if k not in d or not isinstance(d[k], dict):
                d[k] = {}
            d = d[k]
        d[keys[-1]] = value

    @staticmethod
    def _merge_configs(default: dict, loaded: dict) -> dict:
        """
        Merge loaded configuration with defaults, ensuring all default keys exist.
        """
        result = default.copy()
        for key, value in loaded.items():
            if key in result and isinstance(result[key], dict) and isinstance(value, dict):
                result[key] = ConfigManager._merge_configs(result[key], value)
            else:
                result[key] = value
        return result


def config_hash(section: dict) -> str:
    """Stable sha256 of a configuration section (canonical JSON)."""
    payload = json.dumps(section, sort_keys=True, separators=(',', ':'), default=list)
    return hashlib.sha256(payload.encode('utf-8')).hexdigest()
