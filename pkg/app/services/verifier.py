"""
Lossless Tree Verification
Speculative sampling with residual adjustment, extended to sibling groups by sequential rejection
"""

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple
import logging
import numpy as np

from app.core.exceptions import DraftContractError, InputError
from app.models.base import TargetModel
from app.services.drafter import DraftTree
from app.utils.sampling import sample_index

logger = logging.getLogger(__name__)

RESIDUAL_EPSILON = 1e-12

SparseQ = Tuple[np.ndarray, np.ndarray]


@dataclass
class ResidualState:
    """Target distribution at a position after some siblings were rejected"""
    probs: np.ndarray
    rejected: List[int] = field(default_factory=list)
    degenerate: bool = False


@dataclass
class PositionResult:
    """Outcome of verify_position: an accepted sibling, or the residual for the bonus draw"""
    accepted_index: Optional[int]
    accepted_token: Optional[int]
    residual: ResidualState


@dataclass
class NodeVerdict:
    node: int
    token: int
    accepted: bool


@dataclass
class VerificationOutcome:
    """One round: accepted root-down path plus the bonus token"""
    accepted_nodes: List[int]
    accepted_tokens: List[int]
    bonus_token: int
    distributions: List[np.ndarray]  # untouched target p at each emitted position
    trace: List[NodeVerdict]
    target_positions: int  # filled draft nodes + 1
    target_evaluations: int  # positions actually evaluated by the walk

    @property
    def tokens(self) -> List[int]:
        return self.accepted_tokens + [self.bonus_token]

    @property
    def accepted_length(self) -> int:
        return len(self.accepted_tokens) + 1


def _restrict(q_ids: np.ndarray, q_probs: np.ndarray, rejected: Sequence[int]) -> SparseQ:
    """q over non-rejected tokens, renormalized"""
    if rejected:
        keep = ~np.isin(q_ids, np.asarray(rejected, dtype=np.int64))
        q_ids, q_probs = q_ids[keep], q_probs[keep]
    mass = q_probs.sum()
    return q_ids, (q_probs / mass if mass > 0 else q_probs)


def _reject(state: ResidualState, original: np.ndarray, token: int, q_ids: np.ndarray, q_probs: np.ndarray) -> None:
    """p_cur <- norm(max(0, p_cur - q)); falls back to p minus rejected tokens when nothing is left"""
    state.rejected.append(token)
    residual = state.probs.copy()
    residual[q_ids] -= q_probs
    np.maximum(residual, 0.0, out=residual)
    total = residual.sum()
    if total > RESIDUAL_EPSILON:
        state.probs = residual / total
        return
    logger.warning("Residual mass vanished; falling back to target minus rejected tokens")
    state.degenerate = True
    fallback = np.array(original, dtype=np.float64)
    fallback[np.asarray(state.rejected, dtype=np.int64)] = 0.0
    total = fallback.sum()
    state.probs = fallback / total if total > RESIDUAL_EPSILON else np.array(original, dtype=np.float64)


def _draft_prob(token: int, q_ids: np.ndarray, q_probs: np.ndarray) -> float:
    match = q_probs[q_ids == token]
    if match.size == 0 or match[0] <= 0:
        raise DraftContractError(f"drafted token {token} has zero draft probability")
    return float(match[0])


def verify_position(
    p: np.ndarray,
    siblings: Sequence[Tuple[int, SparseQ]],
    rng: np.random.Generator,
) -> PositionResult:
    """
    Verify drafted siblings in draft order against target p.

    Sibling x with draft distribution q is accepted with probability
    min(1, p_cur(x) / q(x)), one uniform per sibling. On rejection p_cur
    becomes the normalized residual and later q's drop rejected tokens.
    If every sibling is rejected the residual is returned for the bonus draw.
    """
    tokens = [t for t, _ in siblings]
    if len(set(tokens)) != len(tokens):
        raise InputError("sibling tokens must be distinct")
    state = ResidualState(np.array(p, dtype=np.float64))
    for index, (token, (q_ids, q_probs)) in enumerate(siblings):
        if state.degenerate:
            state.rejected.append(token)
            continue
        q_ids, q_probs = _restrict(q_ids, q_probs, state.rejected)
        qx = _draft_prob(token, q_ids, q_probs)
        ratio = state.probs[token] / qx
        if rng.random() < ratio:
            return PositionResult(index, token, state)
        _reject(state, p, token, q_ids, q_probs)
    return PositionResult(None, None, state)


def acceptance_probability(p: np.ndarray, siblings: Sequence[Tuple[int, SparseQ]]) -> float:
    """
    Probability that verify_position accepts some sibling, with the
    acceptance coins marginalized analytically (drafted tokens fixed).
    """
    state = ResidualState(np.array(p, dtype=np.float64))
    reach = 1.0
    total = 0.0
    for token, (q_ids, q_probs) in siblings:
        if state.degenerate:
            break
        q_ids, q_probs = _restrict(q_ids, q_probs, state.rejected)
        accept = min(1.0, state.probs[token] / _draft_prob(token, q_ids, q_probs))
        total += reach * accept
        reach *= 1.0 - accept
        if reach <= 0.0:
            break
        _reject(state, p, token, q_ids, q_probs)
    return total


def verify_tree(
    context: Sequence[int],
    draft: DraftTree,
    target: TargetModel,
    rng: np.random.Generator,
) -> VerificationOutcome:
    """
    Walk the draft from the committed position.

    At each accepted position its drafted children are verified; the first
    position with no accepted child (or no children) emits the bonus token
    from the residual, or from the untouched p when nothing was drafted
    there. RNG order: one uniform per verified sibling, then one for the bonus.
    """
    tail = tuple(int(t) for t in context[max(0, len(context) - len(draft.context_tail)):])
    if draft.context_length != len(context) or draft.context_tail != tail:
        raise InputError("draft was built for a different context")

    ctx = list(context)
    p = target.next_distribution(ctx)
    distributions = [p]
    accepted_nodes: List[int] = []
    accepted_tokens: List[int] = []
    trace: List[NodeVerdict] = []
    parent: Optional[int] = None

    while True:
        siblings = draft.siblings(parent)
        if not siblings:
            bonus = sample_index(p, rng)
            break
        result = verify_position(p, siblings, rng)
        group_nodes = draft.groups[parent].nodes
        for i, node in enumerate(group_nodes):
            if i < len(result.residual.rejected) or i == result.accepted_index:
                trace.append(NodeVerdict(node, int(draft.tokens[node]), i == result.accepted_index))
        if result.accepted_index is None:
            bonus = sample_index(result.residual.probs, rng)
            break
        node = group_nodes[result.accepted_index]
        accepted_nodes.append(node)
        accepted_tokens.append(result.accepted_token)
        ctx.append(result.accepted_token)
        p = target.next_distribution(ctx)
        distributions.append(p)
        parent = node

    return VerificationOutcome(
        accepted_nodes=accepted_nodes,
        accepted_tokens=accepted_tokens,
        bonus_token=bonus,
        distributions=distributions,
        trace=trace,
        target_positions=draft.filled_count + 1,
        target_evaluations=len(distributions),
    )


@dataclass
class TargetCallSummary:
    rounds: int
    tokens: int
    target_positions: int
    calls_per_token: float      # one batched call per round
    positions_per_token: float  # every drafted position evaluated


def count_target_calls(outcomes: Sequence[VerificationOutcome]) -> TargetCallSummary:
    """Aggregate verification cost over rounds"""
    rounds = len(outcomes)
    tokens = sum(o.accepted_length for o in outcomes)
    positions = sum(o.target_positions for o in outcomes)
    return TargetCallSummary(
        rounds=rounds,
        tokens=tokens,
        target_positions=positions,
        calls_per_token=rounds / tokens if tokens else 0.0,
        positions_per_token=positions / tokens if tokens else 0.0,
    )
