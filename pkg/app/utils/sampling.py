"""
Seeded randomness and small probability helpers shared by models, drafter and verifier
"""

from typing import Sequence, Union
import numpy as np


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent, reproducible generator for (seed, stream...)"""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


def sample_index(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw of one index; consumes exactly one uniform"""
    cdf = np.cumsum(probs)
    u = rng.random() * cdf[-1]
    idx = min(int(np.searchsorted(cdf, u, side="right")), len(probs) - 1)
    # round-off can land on a trailing zero entry
    while probs[idx] <= 0 and idx > 0:
        idx -= 1
    return idx


def apply_temperature(probs: np.ndarray, temperature: float) -> np.ndarray:
    """
    Rescale a distribution by temperature: p^(1/T) renormalized.

    Done in log space, so T -> 0 collapses onto the argmax (exact ties
    share the mass) and zero entries stay zero.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if temperature == 1.0:
        return probs / probs.sum()
    with np.errstate(divide="ignore"):
        logits = np.log(probs) / temperature
    logits -= logits.max()
    scaled = np.exp(logits)
    return scaled / scaled.sum()


def total_variation(p: Union[np.ndarray, Sequence[float]], q: Union[np.ndarray, Sequence[float]]) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=np.float64) - np.asarray(q, dtype=np.float64)).sum())
