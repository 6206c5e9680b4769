"""
Target Model Sources
Resolves a model source string (spec file, synthetic family, recorded corpus, remote endpoint)
"""

from pathlib import Path
from typing import Optional
import logging

from app.core.config import settings
from app.core.exceptions import ConfigError
from app.models import CorpusReplayModel, MarkovModel, ModelConfig, TargetModel, load_model_spec
from app.services.analysis import read_trajectories
from app.services.synthetic import build_task_model, parse_synthetic_source

logger = logging.getLogger(__name__)

CORPUS_PREFIX = "corpus:"
SYNTHETIC_PREFIX = "synthetic:"


def source_path(source: str) -> Optional[Path]:
    """File a source refers to, or None for synthetic sources"""
    if source.startswith(SYNTHETIC_PREFIX):
        return None
    return Path(source[len(CORPUS_PREFIX):] if source.startswith(CORPUS_PREFIX) else source)


def load_target(source: str, temperature: Optional[float] = None) -> TargetModel:
    """
    synthetic:<family>[:<seed>] | corpus:<trajectory file> | <model spec JSON>
    """
    temperature = temperature or settings.TEMPERATURE
    if source.startswith(SYNTHETIC_PREFIX):
        family, seed = parse_synthetic_source(source)
        return build_task_model(family, seed=seed, temperature=temperature)

    path = source_path(source)
    if not path.is_file():
        raise ConfigError(f"model file not found: {path}")
    if source.startswith(CORPUS_PREFIX):
        trajectories = read_trajectories(path)
        vocab = max((max(t) for t in trajectories if t), default=0) + 1
        return CorpusReplayModel(trajectories, config=ModelConfig(vocab_size=max(vocab, 2), temperature=temperature))

    spec = load_model_spec(path)
    logger.info(f"Loaded Markov target from {path} (vocab {spec.vocab_size}, order {spec.order})")
    return MarkovModel(spec, ModelConfig(vocab_size=spec.vocab_size, temperature=temperature))


def load_remote_target(endpoint: str, temperature: Optional[float] = None) -> TargetModel:
    from app.ai.client import RemoteTargetModel

    remote = RemoteTargetModel(endpoint)
    if temperature is not None and temperature != remote.temperature:
        remote.config = ModelConfig(vocab_size=remote.vocab_size, temperature=temperature)
    return remote
