"""
Target Model Interface
Abstract next-token distribution provider used for verification and benchmarking
"""

from abc import ABC, abstractmethod
from typing import Sequence
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from app.core.config import settings
from app.core.exceptions import InputError
from app.utils.sampling import sample_index


class ModelConfig(BaseModel):
    """Sampling configuration shared by every target model"""
    model_config = ConfigDict(frozen=True)

    vocab_size: int = Field(..., ge=2)
    temperature: float = Field(settings.TEMPERATURE, gt=0)
    seed: int = 0


class TargetModel(ABC):
    """
    Next-token distribution oracle p(x | context).

    Distributions are post-temperature: the n-gram store and the verifier
    see exactly what the sampler uses. Implementations are immutable after
    construction and safe for concurrent reads.
    """

    config: ModelConfig

    @property
    def vocab_size(self) -> int:
        return self.config.vocab_size

    @property
    def temperature(self) -> float:
        return self.config.temperature

    def validate_context(self, context: Sequence[int]) -> None:
        """Raise InputError on out-of-vocab tokens"""
        if len(context) == 0:
            return
        tokens = np.asarray(context)
        if tokens.min() < 0 or tokens.max() >= self.vocab_size:
            bad = int(tokens[(tokens < 0) | (tokens >= self.vocab_size)][0])
            raise InputError(f"token {bad} outside vocab [0, {self.vocab_size})")

    @abstractmethod
    def base_distribution(self, context: Sequence[int]) -> np.ndarray:
        """Pre-temperature distribution (temperature 1.0)"""

    @abstractmethod
    def next_distribution(self, context: Sequence[int]) -> np.ndarray:
        """Temperature-adjusted next-token probabilities, read-only array of vocab_size"""

    def sample_next(self, context: Sequence[int], rng: np.random.Generator) -> int:
        """Autoregressive reference step: one draw from next_distribution"""
        return sample_index(self.next_distribution(context), rng)
