"""
Target models: the p(x | context) oracles speculative decoding must preserve
"""

from app.models.base import ModelConfig, TargetModel
from app.models.markov import MarkovModel, MarkovModelSpec, Pattern, load_model_spec, save_model_spec
from app.models.corpus import CorpusReplayModel

__all__ = [
    "ModelConfig",
    "TargetModel",
    "MarkovModel",
    "MarkovModelSpec",
    "Pattern",
    "load_model_spec",
    "save_model_spec",
    "CorpusReplayModel",
]
