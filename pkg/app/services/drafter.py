"""
Stochastic Tree Drafter
Fills a static topology each step from n-gram store lookups (4-gram down to unigram)
"""

from collections import deque
from dataclasses import dataclass, field
from enum import Enum as PyEnum
from typing import Deque, Dict, List, Optional, Sequence, Tuple, Union
import logging
import numpy as np

from app.core.exceptions import InputError
from app.services.draft_tree import TreeTopology
from app.services.gumbel_sampler import NoiseSource, sample_tokens
from app.services.ngram_store import CompressedDistribution, NGramStore
from app.utils.sampling import sample_index

logger = logging.getLogger(__name__)

UNFILLED = -1


class DraftMode(str, PyEnum):
    STOCHASTIC = "stochastic"        # Gumbel-Top-K over the stored distribution
    MULTINOMIAL = "multinomial"      # sequential categorical draws, same distribution
    DETERMINISTIC = "deterministic"  # top tokens by probability, one-hot q


@dataclass
class SiblingGroup:
    """Children drafted from one store lookup"""
    parent: Optional[int]  # None = root position
    level: int             # gram length of the matching key
    candidate_ids: np.ndarray
    candidate_probs: np.ndarray  # renormalized over the candidates
    nodes: List[int] = field(default_factory=list)
    tokens: List[int] = field(default_factory=list)


@dataclass
class DraftTree:
    """
    One step's instantiation of a topology.

    tokens[i] is UNFILLED for nodes beyond a miss or an exhausted
    candidate set; q_values[i] is the probability the token had within its
    sibling group when drawn; source_levels[i] is the gram length used (0 =
    unfilled).
    """
    topology: TreeTopology
    mode: DraftMode
    context_length: int
    context_tail: Tuple[int, ...]
    tokens: np.ndarray
    q_values: np.ndarray
    source_levels: np.ndarray
    groups: Dict[Optional[int], SiblingGroup]

    @property
    def filled_nodes(self) -> List[int]:
        return np.flatnonzero(self.tokens != UNFILLED).tolist()

    @property
    def filled_count(self) -> int:
        return int((self.tokens != UNFILLED).sum())

    @property
    def is_empty(self) -> bool:
        return None not in self.groups

    def siblings(self, parent: Optional[int]) -> List[Tuple[int, Tuple[np.ndarray, np.ndarray]]]:
        """(token, q) for each drafted child of `parent`, in draft order"""
        group = self.groups.get(parent)
        if group is None:
            return []
        return [
            (token, q_distribution_at(token, (group.candidate_ids, group.candidate_probs), group.tokens[:i], self.mode))
            for i, token in enumerate(group.tokens)
        ]


def q_distribution_at(
    token: int,
    entry: Union[CompressedDistribution, Tuple[np.ndarray, np.ndarray]],
    already_drawn: Sequence[int],
    mode: DraftMode = DraftMode.STOCHASTIC,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Draft distribution a sibling was drawn under, as (ids, probs).

    Without-replacement conditioning: the candidates minus the elder
    siblings, renormalized. Deterministic drafting is one-hot at the token.
    """
    if mode == DraftMode.DETERMINISTIC:
        return np.array([token], dtype=np.int64), np.array([1.0])
    if isinstance(entry, CompressedDistribution):
        ids, probs = entry.ids, entry.probs
    else:
        ids, probs = entry
    keep = probs > 0
    if len(already_drawn):
        keep &= ~np.isin(ids, np.asarray(already_drawn, dtype=np.int64))
    ids, probs = ids[keep], probs[keep]
    return ids, probs / probs.sum()


def _sequential_sample(ids: np.ndarray, probs: np.ndarray, k: int, rng: np.random.Generator) -> List[int]:
    """Sampling without replacement by repeated categorical draws"""
    remaining = probs.copy()
    drawn = []
    for _ in range(min(k, len(ids))):
        idx = sample_index(remaining, rng)
        drawn.append(int(ids[idx]))
        remaining[idx] = 0.0
    return drawn


def build_draft(
    context: Sequence[int],
    topology: TreeTopology,
    store: NGramStore,
    noise: NoiseSource,
    mode: DraftMode = DraftMode.STOCHASTIC,
    rng: Optional[np.random.Generator] = None,
) -> DraftTree:
    """
    Breadth-first fill of the topology.

    Each filled position (the root, then every filled node with child
    slots) looks up the committed context extended by the drafted path and
    draws as many distinct tokens as it has slots. A miss leaves that
    subtree unfilled; a miss at the root yields an empty draft.
    """
    if len(context) == 0:
        raise InputError("drafting needs a context of at least one token")
    mode = DraftMode(mode)
    if mode == DraftMode.MULTINOMIAL and rng is None:
        raise InputError("multinomial drafting needs an rng")

    n = len(topology)
    tokens = np.full(n, UNFILLED, dtype=np.int64)
    q_values = np.zeros(n, dtype=np.float64)
    levels = np.zeros(n, dtype=np.int8)
    groups: Dict[Optional[int], SiblingGroup] = {}

    window = store.max_ngram
    root_tail = tuple(int(t) for t in context[max(0, len(context) - window):])
    queue: Deque[Tuple[Optional[int], Tuple[int, ...]]] = deque([(None, root_tail)])
    while queue:
        parent, tail = queue.popleft()
        slots = topology.child_slots(parent)
        if not slots:
            continue
        entry, level = store.lookup_with_level(tail)
        if entry is None:
            continue
        positive = entry.probs > 0
        ids, probs = entry.ids[positive], entry.probs[positive]
        if len(ids) == 0:
            continue
        probs = probs / probs.sum()

        if mode == DraftMode.DETERMINISTIC:
            drawn = ids[:len(slots)].tolist()
        elif mode == DraftMode.STOCHASTIC:
            drawn = sample_tokens(ids, probs, len(slots), noise)
        else:
            drawn = _sequential_sample(ids, probs, len(slots), rng)

        group = SiblingGroup(parent, level, ids, probs)
        remaining = 1.0
        for slot, token in zip(slots, drawn):
            p_token = float(probs[ids == token][0])
            tokens[slot] = token
            levels[slot] = level
            if mode == DraftMode.DETERMINISTIC:
                q_values[slot] = 1.0
            else:
                q_values[slot] = min(1.0, p_token / remaining)
                remaining -= p_token
            group.nodes.append(slot)
            group.tokens.append(token)
            queue.append((slot, (tail + (token,))[-window:]))
        groups[parent] = group

    return DraftTree(
        topology=topology,
        mode=mode,
        context_length=len(context),
        context_tail=root_tail,
        tokens=tokens,
        q_values=q_values,
        source_levels=levels,
        groups=groups,
    )
