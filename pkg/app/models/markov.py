"""
Synthetic Markov Target Model
Order-k transition table plus injected repeated phrases (desk-scale oracle target)
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import json
import logging
import numpy as np
from pydantic import ValidationError

from app.core.exceptions import FormatError, InputError
from app.models.base import ModelConfig, TargetModel
from app.schemas import ModelSpecFile, PatternSpec
from app.utils.sampling import apply_temperature

logger = logging.getLogger(__name__)

ROW_SUM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Pattern:
    """Phrase continued with probability `prob` whenever its prefix ends the context"""
    tokens: Tuple[int, ...]
    prob: float


@dataclass
class MarkovModelSpec:
    """
    Transition table keyed by the last `order` tokens.

    A row keyed by () is the start distribution used for contexts shorter
    than `order`. Missing rows fall back to the uniform distribution.
    """
    vocab_size: int
    order: int = 1
    rows: Dict[Tuple[int, ...], np.ndarray] = field(default_factory=dict)
    patterns: List[Pattern] = field(default_factory=list)

    def __post_init__(self):
        if self.vocab_size < 2:
            raise FormatError("vocab_size must be at least 2")
        if self.order < 1:
            raise FormatError("order must be at least 1")
        for key, row in self.rows.items():
            row = np.asarray(row, dtype=np.float64)
            if row.shape != (self.vocab_size,) or (row < 0).any():
                raise FormatError(f"row {key} is not a distribution over {self.vocab_size} tokens")
            if abs(row.sum() - 1.0) > ROW_SUM_TOLERANCE:
                raise FormatError(f"row {key} sums to {row.sum():.9f}")
            if any(not 0 <= t < self.vocab_size for t in key):
                raise FormatError(f"row key {key} outside vocab")
            self.rows[key] = row / row.sum()
        for pattern in self.patterns:
            if any(not 0 <= t < self.vocab_size for t in pattern.tokens):
                raise FormatError(f"pattern {pattern.tokens} outside vocab")

    @property
    def context_window(self) -> int:
        """Tokens of context the model can depend on"""
        longest = max((len(p.tokens) - 1 for p in self.patterns), default=0)
        return max(self.order, longest)

    # ========================================================================
    # FILE FORMAT
    # ========================================================================

    @classmethod
    def from_file_schema(cls, data: ModelSpecFile) -> "MarkovModelSpec":
        rows = {}
        for ctx, row in data.rows.items():
            key = tuple(int(t) for t in ctx.split(",")) if ctx.strip() else ()
            rows[key] = np.asarray(row, dtype=np.float64)
        patterns = [Pattern(tuple(p.tokens), p.prob) for p in data.patterns]
        return cls(vocab_size=data.vocab_size, order=data.order, rows=rows, patterns=patterns)

    def to_file_schema(self) -> ModelSpecFile:
        return ModelSpecFile(
            vocab_size=self.vocab_size,
            order=self.order,
            rows={",".join(str(t) for t in key): row.tolist() for key, row in self.rows.items()},
            patterns=[PatternSpec(tokens=list(p.tokens), prob=p.prob) for p in self.patterns],
        )


def load_model_spec(path: Union[str, Path]) -> MarkovModelSpec:
    """Read a JSON model spec file"""
    try:
        data = ModelSpecFile.model_validate_json(Path(path).read_text())
    except (ValidationError, ValueError) as e:
        raise FormatError(f"invalid model spec {path}: {e}") from e
    if data.format is not None and data.format != "stand-model":
        raise FormatError(f"unknown model spec format {data.format!r}")
    if data.version is not None and data.version != 1:
        raise FormatError(f"unsupported model spec version {data.version}")
    return MarkovModelSpec.from_file_schema(data)


def save_model_spec(spec: MarkovModelSpec, path: Union[str, Path]) -> None:
    Path(path).write_text(json.dumps(spec.to_file_schema().model_dump(exclude_none=True)))


class MarkovModel(TargetModel):
    """Markov language model with pattern injection"""

    def __init__(self, spec: MarkovModelSpec, config: Optional[ModelConfig] = None):
        self.spec = spec
        self.config = config or ModelConfig(vocab_size=spec.vocab_size)
        if self.config.vocab_size != spec.vocab_size:
            raise FormatError("ModelConfig.vocab_size does not match MarkovModelSpec.vocab_size")
        self._uniform = np.full(spec.vocab_size, 1.0 / spec.vocab_size)
        self._cache: Dict[Tuple[int, ...], np.ndarray] = {}

    def _row(self, context: Sequence[int]) -> np.ndarray:
        order = self.spec.order
        if len(context) >= order:
            key = tuple(context[len(context) - order:])
        else:
            key = ()
            if key not in self.spec.rows and len(context) == 0:
                raise InputError("empty context and no start distribution")
        return self.spec.rows.get(key, self._uniform)

    def base_distribution(self, context: Sequence[int]) -> np.ndarray:
        row = self._row(context)
        boosts: Dict[int, float] = {}
        for pattern in self.spec.patterns:
            tokens = pattern.tokens
            for j in range(min(len(tokens) - 1, len(context)), 0, -1):
                if tuple(context[len(context) - j:]) == tokens[:j]:
                    boosts[tokens[j]] = boosts.get(tokens[j], 0.0) + pattern.prob
                    break
        if not boosts:
            return row
        weight = sum(boosts.values())
        scale = 1.0 / weight if weight > 1.0 else 1.0
        mixed = row * (1.0 - min(weight, 1.0))
        for token, prob in boosts.items():
            mixed[token] += prob * scale
        return mixed / mixed.sum()

    def next_distribution(self, context: Sequence[int]) -> np.ndarray:
        self.validate_context(context)
        window = self.spec.context_window
        cacheable = len(context) >= window
        key = tuple(int(t) for t in context[len(context) - window:]) if cacheable else None
        if cacheable and key in self._cache:
            return self._cache[key]
        probs = apply_temperature(self.base_distribution(context), self.temperature)
        probs.setflags(write=False)
        if cacheable:
            self._cache[key] = probs
        return probs
