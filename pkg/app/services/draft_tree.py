"""
Static Draft Tree Topologies
Tree shapes, per-node acceptance statistics and data-driven pruning to a compact tree
"""

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union
import logging
import numpy as np
from pydantic import ValidationError

from app.core.exceptions import ConfigError, FormatError, InputError
from app.schemas import (
    FORMAT_VERSION,
    TREE_FORMAT,
    TREE_STATS_FORMAT,
    NodeStatsRecord,
    TreeFile,
    TreeNodeRecord,
    TreeStatsFile,
)

logger = logging.getLogger(__name__)


# Nodes per depth (1..20) of the large initialization tree: wide through
# depth 4, then a long narrowing tail. Approximates the published shape;
# totals exactly 625.
INITIAL_TREE_PROFILE: Tuple[int, ...] = (
    10, 40, 80, 100, 90, 75, 60, 45, 35, 25,
    18, 12, 9, 7, 5, 4, 3, 3, 2, 2,
)

# Default compact tree: 80 nodes, 13 levels, single nodes at depths 8-13.
OPTIMIZED_TREE_PROFILE: Tuple[int, ...] = (9, 15, 16, 13, 10, 8, 3, 1, 1, 1, 1, 1, 1)


@dataclass(frozen=True)
class TreeTopology:
    """
    Ancestor-closed draft tree. The root (committed position, depth 0) is
    implicit; nodes are 0..N-1, level-1 nodes have parent None, and child
    order is the drafting slot order.
    """
    parents: Tuple[Optional[int], ...]
    children: Tuple[Tuple[int, ...], ...]
    root_children: Tuple[int, ...]
    depths: Tuple[int, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "depths", validate_topology(self.parents, self.children, self.root_children))

    @classmethod
    def from_parents(cls, parents: Sequence[Optional[int]]) -> "TreeTopology":
        """Children ordered by ascending id"""
        children: List[List[int]] = [[] for _ in parents]
        root: List[int] = []
        for node, parent in enumerate(parents):
            if parent is None:
                root.append(node)
            elif not 0 <= parent < len(parents):
                raise InputError(f"node {node} has unknown parent {parent}")
            else:
                children[parent].append(node)
        return cls(tuple(parents), tuple(tuple(c) for c in children), tuple(root))

    def __len__(self) -> int:
        return len(self.parents)

    @property
    def max_depth(self) -> int:
        return max(self.depths, default=0)

    def child_slots(self, node: Optional[int]) -> Tuple[int, ...]:
        """Children of a node; None means the root"""
        return self.root_children if node is None else self.children[node]

    def bfs_order(self) -> List[int]:
        order: List[int] = []
        queue = deque(self.root_children)
        while queue:
            node = queue.popleft()
            order.append(node)
            queue.extend(self.children[node])
        return order

    def path_to(self, node: int) -> List[int]:
        """Level-1 node down to `node`"""
        path = []
        cur: Optional[int] = node
        while cur is not None:
            path.append(cur)
            cur = self.parents[cur]
        return path[::-1]


def validate_topology(
    parents: Sequence[Optional[int]],
    children: Sequence[Sequence[int]],
    root_children: Sequence[int],
) -> Tuple[int, ...]:
    """
    Check connectivity, acyclicity, ancestor closure and parent/child
    consistency; returns per-node depths.
    """
    n = len(parents)
    if len(children) != n:
        raise InputError("children table length does not match node count")
    expected_root = [i for i, p in enumerate(parents) if p is None]
    if sorted(root_children) != expected_root or len(set(root_children)) != len(root_children):
        raise InputError("root children must be exactly the nodes without a parent")
    seen = [0] * n
    for node, p in enumerate(parents):
        if p is not None and not 0 <= p < n:
            raise InputError(f"node {node}: parent {p} is not in the tree")
    for node, kids in enumerate(children):
        for child in kids:
            if not 0 <= child < n or parents[child] != node:
                raise InputError(f"node {node} lists {child} as child but it is not its parent")
            seen[child] += 1
    for node, p in enumerate(parents):
        if p is not None and seen[node] != 1:
            raise InputError(f"node {node} must appear exactly once in its parent's children")

    depths = [0] * n
    visited = 0
    queue = deque((node, 1) for node in root_children)
    while queue:
        node, depth = queue.popleft()
        depths[node] = depth
        visited += 1
        queue.extend((c, depth + 1) for c in children[node])
    if visited != n:
        raise InputError("tree is not connected to the root (cycle or orphan nodes)")
    return tuple(depths)


# ============================================================================
# BUILDERS
# ============================================================================

def _allocate(total: int, n_parents: int) -> List[int]:
    """Split `total` children over ranked parents with 1/(rank+1) weights, largest remainder"""
    weights = 1.0 / np.arange(1, n_parents + 1)
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(int)
    remainder = total - counts.sum()
    order = sorted(range(n_parents), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts.tolist()


def build_from_profile(profile: Sequence[int]) -> TreeTopology:
    """Tree with profile[d-1] nodes at depth d, ids in breadth-first order"""
    if not profile or any(c < 1 for c in profile):
        raise InputError("every level of a profile needs at least one node")
    parents: List[Optional[int]] = [None] * profile[0]
    level = list(range(profile[0]))
    for count in profile[1:]:
        next_level = []
        for parent, n_children in zip(level, _allocate(count, len(level))):
            for _ in range(n_children):
                next_level.append(len(parents))
                parents.append(parent)
        level = next_level
    return TreeTopology.from_parents(parents)


def build_initial_tree() -> TreeTopology:
    """625-node, depth-20 initialization tree for optimization"""
    return build_from_profile(INITIAL_TREE_PROFILE)


def build_chain(length: int) -> TreeTopology:
    if length < 1:
        raise InputError("chain length must be at least 1")
    return TreeTopology.from_parents([None] + list(range(length - 1)))


def resolve_topology(source: str) -> TreeTopology:
    """builtin:initial-625 | builtin:optimized-80 | builtin:chain-N | path to a tree file"""
    if source == "builtin:initial-625":
        return build_initial_tree()
    if source == "builtin:optimized-80":
        return build_from_profile(OPTIMIZED_TREE_PROFILE)
    if source.startswith("builtin:chain-"):
        try:
            return build_chain(int(source.rsplit("-", 1)[1]))
        except ValueError:
            raise ConfigError(f"bad chain topology {source!r}")
    if source.startswith("builtin:"):
        raise ConfigError(f"unknown builtin topology {source!r}")
    if not Path(source).is_file():
        raise ConfigError(f"topology file not found: {source}")
    return load_tree(source)


# ============================================================================
# STATS
# ============================================================================

@dataclass
class NodeStats:
    """Per-node acceptance and visit counters for one measurement run"""
    accept: np.ndarray
    visit: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "NodeStats":
        return cls(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.accept)


def record_acceptance(
    topology: TreeTopology,
    stats: NodeStats,
    accepted_path: Sequence[int],
    drafted: Optional[Iterable[int]] = None,
) -> None:
    """
    Count one verification round: +1 accept along the accepted path,
    +1 visit for every node drafted that round (defaults to the path).
    """
    if len(stats) != len(topology):
        raise InputError("stats do not match the topology")
    path = [int(n) for n in accepted_path]
    for i, node in enumerate(path):
        if not 0 <= node < len(topology):
            raise InputError(f"node {node} is not in the tree")
        expected = None if i == 0 else path[i - 1]
        if topology.parents[node] != expected:
            raise InputError(f"accepted path {path} is not connected from level 1")
    drafted_nodes = set(path if drafted is None else (int(n) for n in drafted))
    if not set(path) <= drafted_nodes:
        raise InputError("accepted nodes must be among the drafted nodes")
    if any(not 0 <= node < len(topology) for node in drafted_nodes):
        raise InputError("drafted node outside the tree")
    for node in drafted_nodes:
        stats.visit[node] += 1
    for node in path:
        stats.accept[node] += 1


def depth_histogram(topology: TreeTopology) -> Dict[int, int]:
    """Nodes per depth, depths 1..max"""
    hist: Dict[int, int] = {}
    for depth in topology.depths:
        hist[depth] = hist.get(depth, 0) + 1
    return dict(sorted(hist.items()))


# ============================================================================
# PRUNING
# ============================================================================

def _subtree(topology: TreeTopology, selected: Set[int], key: Callable[[int], tuple]) -> Tuple[TreeTopology, List[int]]:
    """Relabel an ancestor-closed node set breadth-first with children sorted by `key`"""
    new_id: Dict[int, int] = {}
    old_of_new: List[int] = []
    parents: List[Optional[int]] = []
    queue = deque((c, None) for c in sorted((c for c in topology.root_children if c in selected), key=key))
    while queue:
        old, parent = queue.popleft()
        new_id[old] = len(old_of_new)
        old_of_new.append(old)
        parents.append(parent)
        kids = sorted((c for c in topology.children[old] if c in selected), key=key)
        queue.extend((c, new_id[old]) for c in kids)
    if len(old_of_new) != len(selected):
        raise InputError("selected node set is not ancestor-closed")
    return TreeTopology.from_parents(parents), old_of_new


def prune_with_mapping(topology: TreeTopology, stats: NodeStats, k: int) -> Tuple[TreeTopology, List[int]]:
    """prune_to_top_k plus the original id of every new node"""
    if k < 1:
        raise InputError("k must be at least 1")
    if len(stats) != len(topology):
        raise InputError("stats must cover every node")
    n = len(topology)
    k = min(k, n)
    bfs = topology.bfs_order()
    rank = {node: i for i, node in enumerate(bfs)}
    accept = stats.accept

    selected: Set[int] = set()
    for node in sorted(range(n), key=lambda i: (-accept[i], rank[i])):
        if len(selected) >= k:
            break
        chain = []
        cur: Optional[int] = node
        while cur is not None and cur not in selected:
            chain.append(cur)
            cur = topology.parents[cur]
        if chain and len(selected) + len(chain) <= k:
            selected.update(chain)
    # skipped chains can leave slots open; fill with the shallowest attachable nodes
    for node in bfs:
        if len(selected) >= k:
            break
        parent = topology.parents[node]
        if node not in selected and (parent is None or parent in selected):
            selected.add(node)

    return _subtree(topology, selected, key=lambda i: (-accept[i], rank[i]))


def prune_to_top_k(topology: TreeTopology, stats: NodeStats, k: int) -> TreeTopology:
    """
    Greedy ancestor-closed selection of the k most-accepted nodes.

    Nodes are taken by descending acceptance count (ties: breadth-first
    order) together with any missing ancestors while the budget allows.
    The result is relabeled breadth-first with children sorted by
    descending count, so the first drafted slot is the historically best.
    """
    return prune_with_mapping(topology, stats, k)[0]


def remap_stats(stats: NodeStats, old_of_new: Sequence[int]) -> NodeStats:
    idx = np.asarray(old_of_new, dtype=np.int64)
    return NodeStats(stats.accept[idx].copy(), stats.visit[idx].copy())


def random_subtree(topology: TreeTopology, k: int, rng: np.random.Generator) -> TreeTopology:
    """Uniformly grown random ancestor-closed subtree of k nodes (baseline for optimization)"""
    k = min(k, len(topology))
    rank = {node: i for i, node in enumerate(topology.bfs_order())}
    frontier = list(topology.root_children)
    selected: Set[int] = set()
    while len(selected) < k:
        node = frontier.pop(int(rng.integers(len(frontier))))
        selected.add(node)
        frontier.extend(topology.children[node])
    return _subtree(topology, selected, key=lambda i: (rank[i],))[0]


# ============================================================================
# FILES
# ============================================================================

def save_tree(topology: TreeTopology, path: Union[str, Path]) -> None:
    nodes = [
        TreeNodeRecord(id=i, parent=topology.parents[i], children=list(topology.children[i]))
        for i in range(len(topology))
    ]
    Path(path).write_text(TreeFile(nodes=nodes).model_dump_json())


def load_tree(path: Union[str, Path]) -> TreeTopology:
    try:
        data = TreeFile.model_validate_json(Path(path).read_text())
    except (ValidationError, ValueError) as e:
        raise FormatError(f"{path}: not a tree file: {e}") from e
    if data.format != TREE_FORMAT:
        raise FormatError(f"{path}: unknown format {data.format!r}")
    if data.version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported tree version {data.version}")
    ids = [node.id for node in data.nodes]
    if ids != list(range(len(ids))):
        raise FormatError(f"{path}: node ids must be 0..N-1 in order")
    parents = tuple(node.parent for node in data.nodes)
    try:
        return TreeTopology(
            parents,
            tuple(tuple(node.children) for node in data.nodes),
            tuple(i for i, p in enumerate(parents) if p is None),
        )
    except InputError as e:
        raise FormatError(f"{path}: invalid tree: {e}") from e


def save_stats(stats: NodeStats, path: Union[str, Path]) -> None:
    nodes = {
        str(i): NodeStatsRecord(accept=int(a), visit=int(v))
        for i, (a, v) in enumerate(zip(stats.accept, stats.visit))
    }
    Path(path).write_text(TreeStatsFile(nodes=nodes).model_dump_json())


def load_stats(path: Union[str, Path]) -> NodeStats:
    try:
        data = TreeStatsFile.model_validate_json(Path(path).read_text())
    except (ValidationError, ValueError) as e:
        raise FormatError(f"{path}: not a stats file: {e}") from e
    if data.format != TREE_STATS_FORMAT or data.version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported stats format {data.format!r} v{data.version}")
    n = len(data.nodes)
    stats = NodeStats.zeros(n)
    for key, record in data.nodes.items():
        i = int(key)
        if not 0 <= i < n:
            raise FormatError(f"{path}: node id {key} out of range")
        stats.accept[i], stats.visit[i] = record.accept, record.visit
    return stats
