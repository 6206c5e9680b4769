"""
Gumbel-Top-K Sampling Without Replacement
Parallel Plackett-Luce sampling over a candidate set, fed by a pre-drawn noise cache
"""

from typing import List, Optional, Protocol, Sequence, Tuple
import logging
import numpy as np

from app.core.config import settings
from app.utils.sampling import make_rng

logger = logging.getLogger(__name__)


class NoiseSource(Protocol):
    """Supplies one noise value per positive-probability candidate"""

    def take(self, n: int) -> np.ndarray: ...


class GumbelNoiseCache:
    """
    Queue of standard Gumbel variates -log(-log U), drawn R at a time.

    Variates are handed out once each, in draw order. The cache is filled
    on construction; running dry triggers an automatic refill.
    """

    def __init__(
        self,
        seed: int = 0,
        refill_size: Optional[int] = None,
        epsilon: Optional[float] = None,
        rng: Optional[np.random.Generator] = None,
    ):
        self.refill_size = refill_size or settings.GUMBEL_REFILL_SIZE
        self.epsilon = settings.GUMBEL_EPSILON if epsilon is None else epsilon
        self.rng = rng if rng is not None else make_rng(seed)
        self.auto_refills = 0
        self.consumed = 0
        self._buffer = np.empty(0)
        self._pos = 0
        self.refill()

    @property
    def available(self) -> int:
        return len(self._buffer) - self._pos

    def refill(self) -> None:
        """Replace the contents with R fresh variates"""
        u = self.rng.random(self.refill_size)
        np.clip(u, self.epsilon, 1.0 - self.epsilon, out=u)
        self._buffer = -np.log(-np.log(u))
        self._pos = 0

    def take(self, n: int) -> np.ndarray:
        out = np.empty(n)
        filled = 0
        while filled < n:
            if self._pos == len(self._buffer):
                self.refill()
                self.auto_refills += 1
                logger.debug(f"Gumbel cache refilled ({self.auto_refills} automatic refills)")
            chunk = min(n - filled, len(self._buffer) - self._pos)
            out[filled:filled + chunk] = self._buffer[self._pos:self._pos + chunk]
            self._pos += chunk
            filled += chunk
        self.consumed += n
        return out


class ZeroNoise:
    """Noise-free source: sampling degenerates to descending-probability order"""

    def take(self, n: int) -> np.ndarray:
        return np.zeros(n)


def sample_without_replacement(
    candidates: Sequence[Tuple[int, float]],
    k: int,
    noise: NoiseSource,
) -> List[int]:
    """
    Draw min(k, #positive candidates) distinct tokens by Gumbel-Top-K.

    Scores are log(p / sum p) over the positive candidates plus one noise
    value each; tokens come back by descending score (ties: ascending id).
    An all-zero candidate set returns [].
    """
    if k < 1:
        raise ValueError("k must be at least 1")
    tokens = np.fromiter((t for t, _ in candidates), dtype=np.int64, count=len(candidates))
    probs = np.fromiter((p for _, p in candidates), dtype=np.float64, count=len(candidates))
    return sample_tokens(tokens, probs, k, noise)


def sample_tokens(tokens: np.ndarray, probs: np.ndarray, k: int, noise: NoiseSource) -> List[int]:
    """Array form of sample_without_replacement used on the drafting hot path"""
    positive = probs > 0
    if not positive.all():
        tokens, probs = tokens[positive], probs[positive]
    if len(tokens) == 0:
        return []
    scores = np.log(probs / probs.sum()) + noise.take(len(tokens))
    order = np.lexsort((tokens, -scores))[:k]
    return tokens[order].tolist()
