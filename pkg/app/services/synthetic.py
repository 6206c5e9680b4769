"""
Synthetic Task Families
Seeded Markov targets with injected reasoning-like phrases, and problem prompts
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple
import logging
import numpy as np

from app.core.config import settings
from app.core.exceptions import ConfigError
from app.models import MarkovModel, MarkovModelSpec, ModelConfig, Pattern
from app.utils.sampling import make_rng

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TaskFamily:
    """Generator parameters for one family of synthetic targets"""
    name: str
    vocab_size: int
    order: int
    concentration: float  # Dirichlet alpha of the transition rows
    n_patterns: int
    pattern_length: Tuple[int, int]
    pattern_prob: float


# "reasoning" has long recurring phrases; "code" has many short, sharper ones.
# Tree optimization measures on one family and is evaluated on the other.
FAMILIES: Dict[str, TaskFamily] = {
    "reasoning": TaskFamily("reasoning", 64, 1, 0.3, 24, (4, 12), 0.85),
    "code": TaskFamily("code", 64, 1, 0.2, 40, (3, 8), 0.75),
}


def random_markov_spec(
    vocab_size: int,
    rng: np.random.Generator,
    order: int = 1,
    concentration: float = 0.5,
    n_patterns: int = 0,
    pattern_length: Tuple[int, int] = (3, 6),
    pattern_prob: float = 0.5,
) -> MarkovModelSpec:
    """Dirichlet transition rows for every context of length `order`, plus random phrases"""
    alpha = np.full(vocab_size, concentration)
    rows = {(): rng.dirichlet(alpha)}
    contexts = np.indices((vocab_size,) * order).reshape(order, -1).T
    for ctx in contexts:
        rows[tuple(int(t) for t in ctx)] = rng.dirichlet(alpha)
    patterns = []
    for _ in range(n_patterns):
        length = int(rng.integers(pattern_length[0], pattern_length[1] + 1))
        tokens = tuple(int(t) for t in rng.integers(0, vocab_size, size=length))
        patterns.append(Pattern(tokens, pattern_prob))
    return MarkovModelSpec(vocab_size=vocab_size, order=order, rows=rows, patterns=patterns)


def get_family(name: str) -> TaskFamily:
    try:
        return FAMILIES[name]
    except KeyError:
        raise ConfigError(f"unknown synthetic task family {name!r}; choose from {sorted(FAMILIES)}")


def build_task_model(family: str, seed: int = 0, temperature: Optional[float] = None) -> MarkovModel:
    """Target model of a synthetic family; same (family, seed) gives the same model"""
    fam = get_family(family)
    rng = make_rng(seed, 0x7A5C)
    spec = random_markov_spec(
        fam.vocab_size,
        rng,
        order=fam.order,
        concentration=fam.concentration,
        n_patterns=fam.n_patterns,
        pattern_length=fam.pattern_length,
        pattern_prob=fam.pattern_prob,
    )
    config = ModelConfig(vocab_size=fam.vocab_size, temperature=temperature or settings.TEMPERATURE, seed=seed)
    logger.debug(f"Built synthetic {family} task (seed={seed}, {len(spec.patterns)} patterns)")
    return MarkovModel(spec, config)


def parse_synthetic_source(source: str) -> Tuple[str, int]:
    """'synthetic:<family>[:<seed>]' -> (family, seed)"""
    parts = source.split(":")
    if parts[0] != "synthetic" or len(parts) not in (2, 3):
        raise ConfigError(f"bad synthetic model source {source!r}")
    try:
        seed = int(parts[2]) if len(parts) == 3 else 0
    except ValueError:
        raise ConfigError(f"bad synthetic seed in {source!r}")
    get_family(parts[1])
    return parts[1], seed


def task_prompts(vocab_size: int, n: int, prompt_length: int, seed: int) -> List[List[int]]:
    """Random prompts for n problems"""
    rng = make_rng(seed, 0x9B0B)
    return [rng.integers(0, vocab_size, size=prompt_length).tolist() for _ in range(n)]
