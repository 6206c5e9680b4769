"""
Decode Engine
Prefill, draft, verify, commit and store update, run over one or many trajectories per problem
"""

from dataclasses import dataclass, field
from enum import Enum as PyEnum
from typing import List, Optional, Sequence
import logging
import time
import numpy as np

from app.core.config import settings
from app.core.exceptions import InputError
from app.models.base import TargetModel
from app.services.draft_tree import NodeStats, TreeTopology, record_acceptance
from app.services.drafter import DraftMode, build_draft
from app.services.gumbel_sampler import GumbelNoiseCache
from app.services.ngram_store import NGramStore
from app.services.verifier import verify_tree
from app.utils.sampling import make_rng

logger = logging.getLogger(__name__)

# rng stream tags under (seed, problem, trajectory)
VERIFY_STREAM = 0
NOISE_STREAM = 1
DRAFT_STREAM = 2


class StoreScope(str, PyEnum):
    PER_TRAJECTORY = "per_trajectory"
    PER_PROBLEM = "per_problem"
    GLOBAL = "global"


@dataclass
class RoundTrace:
    """One speculation round"""
    accepted_len: int  # tokens emitted this round, bonus included
    filled: int        # draft nodes filled
    target_positions: int
    accepted_nodes: List[int] = field(default_factory=list)


@dataclass
class DecodeMetrics:
    tokens: int
    rounds: int
    target_positions: int
    accept_len_mean: float
    wall_seconds: float
    throughput_tps: float

    @property
    def target_calls(self) -> int:
        """One batched target round trip per round"""
        return self.rounds

    @property
    def calls_per_token(self) -> float:
        return self.rounds / self.tokens if self.tokens else 0.0

    @property
    def target_positions_per_token(self) -> float:
        return self.target_positions / self.tokens if self.tokens else 0.0

    @classmethod
    def empty(cls) -> "DecodeMetrics":
        return cls(0, 0, 0, 0.0, 0.0, 0.0)


@dataclass
class TrajectoryResult:
    tokens: List[int]
    traces: List[RoundTrace]
    metrics: DecodeMetrics
    problem: int = 0
    trajectory: int = 0
    store_entries: int = 0  # store size when the trajectory finished


def compute_metrics(traces: Sequence[RoundTrace], wall_seconds: float = 0.0) -> DecodeMetrics:
    """
    A = emitted tokens / rounds; throughput = tokens per second of decode wall time.
    """
    if not traces:
        raise InputError("no rounds to summarize")
    tokens = sum(t.accepted_len for t in traces)
    rounds = len(traces)
    return DecodeMetrics(
        tokens=tokens,
        rounds=rounds,
        target_positions=sum(t.target_positions for t in traces),
        accept_len_mean=tokens / rounds,
        wall_seconds=wall_seconds,
        throughput_tps=tokens / wall_seconds if wall_seconds > 0 else 0.0,
    )


class DecodeSession:
    """
    Owns the n-gram store for a run of trajectories.

    Scope decides when the store is cleared: per_trajectory before every
    trajectory, per_problem at the start of each run_problem, global never.
    Not thread-safe; parallel problems use one session each.
    """

    def __init__(
        self,
        target: TargetModel,
        topology: TreeTopology,
        mode: DraftMode = DraftMode.STOCHASTIC,
        seed: int = 0,
        scope: StoreScope = StoreScope.PER_PROBLEM,
        prefill_seeding: Optional[bool] = None,
        store: Optional[NGramStore] = None,
        node_stats: Optional[NodeStats] = None,
        record_wall_time: bool = True,
    ):
        self.target = target
        self.topology = topology
        self.mode = DraftMode(mode)
        self.seed = seed
        self.scope = StoreScope(scope)
        self.prefill_seeding = settings.PREFILL_SEEDING if prefill_seeding is None else prefill_seeding
        self.base_store = store
        self.store = store.copy() if store is not None else self._new_store()
        self.node_stats = node_stats
        self.record_wall_time = record_wall_time
        if node_stats is not None and len(node_stats) != len(topology):
            raise InputError("node stats do not match the topology")

    def _new_store(self) -> NGramStore:
        if self.base_store is not None:
            return self.base_store.copy()
        return NGramStore(self.target.vocab_size)

    def reset_store(self) -> None:
        self.store = self._new_store()

    # ========================================================================
    # DECODING
    # ========================================================================

    def _prefill(self, prompt: Sequence[int]) -> None:
        """Seed the store with target distributions over the prompt's own prefixes"""
        for i in range(1, len(prompt)):
            self.store.update(prompt[:i], self.target.next_distribution(prompt[:i]))

    def decode_trajectory(
        self,
        prompt: Sequence[int],
        max_tokens: Optional[int] = None,
        stop_tokens: Sequence[int] = (),
        problem: int = 0,
        trajectory: int = 0,
    ) -> TrajectoryResult:
        """
        Generate one trajectory with speculative decoding.

        Each round drafts from the store, verifies against the target and
        commits the accepted path plus the bonus token. The store is then
        updated at every emitted position with the untouched target
        distribution there. A stop token is emitted and ends generation;
        later tokens of that round are dropped.
        """
        max_tokens = settings.MAX_TOKENS if max_tokens is None else max_tokens
        if max_tokens < 0:
            raise InputError("max_tokens must be non-negative")
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise InputError("prompt must contain at least one token")
        self.target.validate_context(prompt)
        if self.scope == StoreScope.PER_TRAJECTORY:
            self.reset_store()
        if max_tokens == 0:
            return TrajectoryResult([], [], DecodeMetrics.empty(), problem, trajectory, len(self.store))

        rng = make_rng(self.seed, problem, trajectory, VERIFY_STREAM)
        draft_rng = make_rng(self.seed, problem, trajectory, DRAFT_STREAM)
        noise = GumbelNoiseCache(rng=make_rng(self.seed, problem, trajectory, NOISE_STREAM))
        stops = set(int(t) for t in stop_tokens)

        start = time.perf_counter()
        if self.prefill_seeding:
            self._prefill(prompt)

        context = list(prompt)
        generated: List[int] = []
        traces: List[RoundTrace] = []
        stopped = False
        while len(generated) < max_tokens and not stopped:
            draft = build_draft(context, self.topology, self.store, noise, self.mode, draft_rng)
            outcome = verify_tree(context, draft, self.target, rng)

            emitted = 0
            for token, dist in zip(outcome.tokens, outcome.distributions):
                self.store.update(context, dist)
                context.append(token)
                generated.append(token)
                emitted += 1
                if token in stops:
                    stopped = True
                    break
                if len(generated) >= max_tokens:
                    break

            if self.node_stats is not None:
                record_acceptance(self.topology, self.node_stats, outcome.accepted_nodes, draft.filled_nodes)
            traces.append(RoundTrace(emitted, draft.filled_count, outcome.target_positions, outcome.accepted_nodes))
            logger.debug(
                f"round {len(traces)}: filled={draft.filled_count} accepted={outcome.accepted_length} emitted={emitted}"
            )

        wall = time.perf_counter() - start if self.record_wall_time else 0.0
        metrics = compute_metrics(traces, wall)
        logger.debug(
            f"problem {problem} trajectory {trajectory}: {metrics.tokens} tokens, "
            f"A={metrics.accept_len_mean:.3f}, store={len(self.store)} entries"
        )
        return TrajectoryResult(generated, traces, metrics, problem, trajectory, len(self.store))

    def run_problem(
        self,
        prompt: Sequence[int],
        n_trajectories: Optional[int] = None,
        max_tokens: Optional[int] = None,
        stop_tokens: Sequence[int] = (),
        problem: int = 0,
    ) -> List[TrajectoryResult]:
        """Sequential trajectories for one problem, sharing the store per the session's scope"""
        n_trajectories = settings.TRAJECTORIES if n_trajectories is None else n_trajectories
        if n_trajectories < 1:
            raise InputError("n_trajectories must be at least 1")
        if self.scope == StoreScope.PER_PROBLEM:
            self.reset_store()
        results = [
            self.decode_trajectory(prompt, max_tokens, stop_tokens, problem=problem, trajectory=t)
            for t in range(n_trajectories)
        ]
        mean_a = np.mean([r.metrics.accept_len_mean for r in results if r.traces] or [0.0])
        logger.info(f"Problem {problem}: {n_trajectories} trajectories, mean A={mean_a:.3f}")
        return results

    def plain_decode(
        self,
        prompt: Sequence[int],
        max_tokens: Optional[int] = None,
        stop_tokens: Sequence[int] = (),
        problem: int = 0,
        trajectory: int = 0,
    ) -> TrajectoryResult:
        """Autoregressive baseline: one target evaluation per token, no drafting"""
        max_tokens = settings.MAX_TOKENS if max_tokens is None else max_tokens
        prompt = [int(t) for t in prompt]
        if not prompt:
            raise InputError("prompt must contain at least one token")
        self.target.validate_context(prompt)
        if max_tokens <= 0:
            return TrajectoryResult([], [], DecodeMetrics.empty(), problem, trajectory, len(self.store))
        rng = make_rng(self.seed, problem, trajectory, VERIFY_STREAM)
        stops = set(int(t) for t in stop_tokens)

        start = time.perf_counter()
        context = list(prompt)
        generated: List[int] = []
        traces: List[RoundTrace] = []
        while len(generated) < max_tokens:
            token = self.target.sample_next(context, rng)
            context.append(token)
            generated.append(token)
            traces.append(RoundTrace(1, 0, 1))
            if token in stops:
                break
        wall = time.perf_counter() - start if self.record_wall_time else 0.0
        return TrajectoryResult(generated, traces, compute_metrics(traces, wall), problem, trajectory, len(self.store))
