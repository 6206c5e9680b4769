"""
Corpus-Replay Target Model
Next-token distribution estimated from recorded trajectories with suffix backoff
"""

from collections import Counter, defaultdict
from typing import Dict, Iterable, Optional, Sequence, Tuple
import logging
import numpy as np

from app.core.exceptions import InputError
from app.models.base import ModelConfig, TargetModel
from app.utils.sampling import apply_temperature

logger = logging.getLogger(__name__)


class CorpusReplayModel(TargetModel):
    """
    Replays a token corpus as a language model.

    The distribution after a context is the empirical next-token histogram
    of the longest context suffix (up to `order` tokens) seen in the corpus,
    plus `smoothing` pseudo-counts on every token so no entry is zero.
    """

    def __init__(
        self,
        trajectories: Iterable[Sequence[int]],
        vocab_size: Optional[int] = None,
        order: int = 4,
        smoothing: float = 0.01,
        config: Optional[ModelConfig] = None,
    ):
        trajectories = [list(map(int, t)) for t in trajectories]
        if not any(trajectories):
            raise InputError("corpus-replay model needs at least one non-empty trajectory")
        if vocab_size is None:
            vocab_size = config.vocab_size if config else max(max(t) for t in trajectories if t) + 1
        self.config = config or ModelConfig(vocab_size=max(vocab_size, 2))
        self.order = order
        self.smoothing = smoothing
        for t in trajectories:
            self.validate_context(t)

        self._counts: Dict[Tuple[int, ...], Counter] = defaultdict(Counter)
        for tokens in trajectories:
            for i, token in enumerate(tokens):
                for n in range(0, min(order, i) + 1):
                    self._counts[tuple(tokens[i - n:i])][token] += 1
        self._cache: Dict[Tuple[int, ...], np.ndarray] = {}
        logger.info(f"Corpus-replay model: {len(trajectories)} trajectories, {len(self._counts)} contexts")

    def _longest_suffix(self, context: Sequence[int]) -> Tuple[int, ...]:
        for n in range(min(self.order, len(context)), 0, -1):
            key = tuple(int(t) for t in context[len(context) - n:])
            if key in self._counts:
                return key
        return ()

    def base_distribution(self, context: Sequence[int]) -> np.ndarray:
        counts = self._counts[self._longest_suffix(context)]
        probs = np.full(self.vocab_size, self.smoothing, dtype=np.float64)
        for token, c in counts.items():
            probs[token] += c
        return probs / probs.sum()

    def next_distribution(self, context: Sequence[int]) -> np.ndarray:
        self.validate_context(context)
        key = self._longest_suffix(context)
        cached = self._cache.get(key)
        if cached is None:
            cached = apply_temperature(self.base_distribution(context), self.temperature)
            cached.setflags(write=False)
            self._cache[key] = cached
        return cached
