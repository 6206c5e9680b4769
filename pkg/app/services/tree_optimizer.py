"""
Draft Tree Optimization
Measure per-node acceptance on a large initial tree, prune to a compact tree, compare against random subtrees
"""

from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence
import logging
import numpy as np

from app.core.config import settings
from app.core.exceptions import InputError
from app.models.base import TargetModel
from app.services.draft_tree import (
    NodeStats,
    TreeTopology,
    build_initial_tree,
    depth_histogram,
    prune_with_mapping,
    random_subtree,
    remap_stats,
)
from app.services.drafter import DraftMode
from app.services.engine import DecodeSession, StoreScope, TrajectoryResult
from app.utils.sampling import make_rng

logger = logging.getLogger(__name__)

RANDOM_TREE_STREAM = 0x5EED


@dataclass
class OptimizedTree:
    topology: TreeTopology
    stats: NodeStats            # measured counts, relabeled to the pruned tree
    initial_stats: NodeStats    # counts on the initial tree
    depth_histogram: Dict[int, int]


def _decode_problems(
    target: TargetModel,
    topology: TreeTopology,
    prompts: Sequence[Sequence[int]],
    trajectories: int,
    max_tokens: int,
    seed: int,
    mode: DraftMode,
    node_stats: Optional[NodeStats] = None,
) -> List[TrajectoryResult]:
    session = DecodeSession(
        target, topology, mode=mode, seed=seed, scope=StoreScope.PER_PROBLEM,
        node_stats=node_stats, record_wall_time=False,
    )
    results: List[TrajectoryResult] = []
    for i, prompt in enumerate(prompts):
        results.extend(session.run_problem(prompt, trajectories, max_tokens, problem=i))
    return results


def measure_node_stats(
    target: TargetModel,
    topology: TreeTopology,
    prompts: Sequence[Sequence[int]],
    trajectories: int = 1,
    max_tokens: Optional[int] = None,
    seed: int = 0,
    mode: DraftMode = DraftMode.STOCHASTIC,
) -> NodeStats:
    """Decode the measurement problems with `topology`, counting accepts and visits per node"""
    if not prompts:
        raise InputError("tree optimization needs at least one measurement problem")
    stats = NodeStats.zeros(len(topology))
    _decode_problems(target, topology, prompts, trajectories, max_tokens or settings.MAX_TOKENS, seed, mode, stats)
    logger.info(
        f"Measured {len(topology)}-node tree on {len(prompts)} problems: "
        f"{int(stats.accept.sum())} accepts, {int(stats.visit.sum())} visits"
    )
    return stats


def optimize_tree(
    target: TargetModel,
    prompts: Sequence[Sequence[int]],
    target_nodes: Optional[int] = None,
    trajectories: int = 1,
    max_tokens: Optional[int] = None,
    seed: int = 0,
    mode: DraftMode = DraftMode.STOCHASTIC,
    initial: Optional[TreeTopology] = None,
) -> OptimizedTree:
    """Initial tree -> measurement decodes -> top-k ancestor-closed pruning"""
    initial = initial or build_initial_tree()
    k = target_nodes or settings.TREE_TARGET_NODES
    stats = measure_node_stats(target, initial, prompts, trajectories, max_tokens, seed, mode)
    pruned, old_of_new = prune_with_mapping(initial, stats, k)
    logger.info(f"Pruned {len(initial)} -> {len(pruned)} nodes, max depth {pruned.max_depth}")
    return OptimizedTree(pruned, remap_stats(stats, old_of_new), stats, depth_histogram(pruned))


def mean_accept_length(results: Sequence[TrajectoryResult]) -> float:
    """Emitted tokens per round, pooled over every round"""
    tokens = sum(r.metrics.tokens for r in results)
    rounds = sum(r.metrics.rounds for r in results)
    return tokens / rounds if rounds else 0.0


def evaluate_topology(
    target: TargetModel,
    topology: TreeTopology,
    prompts: Sequence[Sequence[int]],
    trajectories: int = 1,
    max_tokens: Optional[int] = None,
    seed: int = 0,
    mode: DraftMode = DraftMode.STOCHASTIC,
) -> float:
    results = _decode_problems(target, topology, prompts, trajectories, max_tokens or settings.MAX_TOKENS, seed, mode)
    return mean_accept_length(results)


def random_baseline(topology: TreeTopology, k: int, seed: int) -> TreeTopology:
    """Random ancestor-closed subtree of the initial tree, seeded"""
    return random_subtree(topology, k, make_rng(seed, RANDOM_TREE_STREAM))


def compare_with_random(
    target: TargetModel,
    optimized: TreeTopology,
    prompts: Sequence[Sequence[int]],
    seed: int = 0,
    trajectories: int = 1,
    max_tokens: Optional[int] = None,
    initial: Optional[TreeTopology] = None,
) -> Dict[str, float]:
    """Mean accept length of the optimized tree and a same-size random subtree on the same problems"""
    baseline = random_baseline(initial or build_initial_tree(), len(optimized), seed)
    scores = {
        "optimized_accept_len": evaluate_topology(target, optimized, prompts, trajectories, max_tokens, seed),
        "random_accept_len": evaluate_topology(target, baseline, prompts, trajectories, max_tokens, seed),
    }
    logger.info(f"Optimized A={scores['optimized_accept_len']:.3f} vs random A={scores['random_accept_len']:.3f}")
    return scores


def tree_summary(tree: OptimizedTree) -> Dict[str, object]:
    accept = tree.stats.accept
    return {
        "nodes": len(tree.topology),
        "max_depth": tree.topology.max_depth,
        "depth_histogram": {str(d): c for d, c in tree.depth_histogram.items()},
        "accepts_kept": int(accept.sum()),
        "accepts_total": int(tree.initial_stats.accept.sum()),
        "top_node_accept_rate": float(accept_rate(tree.stats)[0]) if len(accept) else 0.0,
    }


def accept_rate(stats: NodeStats) -> np.ndarray:
    """accept / visit per node, 0 where never visited"""
    return np.divide(stats.accept, stats.visit, out=np.zeros(len(stats)), where=stats.visit > 0)
