"""Multi-stage transformer with virtual in-hand views."""

from vihe.model.config import ModelConfig
from vihe.model.decode import Action, decode_action, decode_translation
from vihe.model.network import ActionPrediction, VIHENetwork
from vihe.model.tokens import Proprioception, StageMask, TokenSet, tokenize_language

__all__ = ['ModelConfig', 'Action', 'decode_action', 'decode_translation', 'ActionPrediction',
           'VIHENetwork', 'Proprioception', 'StageMask', 'TokenSet', 'tokenize_language']
