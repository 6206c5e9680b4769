"""
Redundancy and Acceptance Analysis
N-gram overlap across trajectories and analytic draft acceptance probes per drafting mode
"""

from collections import Counter
from dataclasses import dataclass
from itertools import permutations
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union
import json
import logging
import numpy as np
from pydantic import ValidationError
from scipy import stats as sps

from app.core.exceptions import FormatError, InputError
from app.models.base import TargetModel
from app.schemas import (
    FORMAT_VERSION,
    TRAJECTORY_FORMAT,
    OverlapReportFile,
    OverlapRow,
    ProbeModeResult,
    ProbeReportFile,
    TrajectoryHeader,
    TrajectoryRecord,
)
from app.services.drafter import DraftMode, q_distribution_at
from app.services.ngram_store import NGramStore
from app.services.verifier import acceptance_probability

logger = logging.getLogger(__name__)

OVERLAP_GRAM_LENGTHS = (2, 3, 4, 5)
PROBE_WIDTH = 3


# ============================================================================
# N-GRAM OVERLAP
# ============================================================================

def ngram_counts(trajectories: Iterable[Sequence[int]], n: int) -> Counter:
    """Pooled multiset of n-gram occurrences"""
    if n < 1:
        raise InputError("n must be positive")
    counts: Counter = Counter()
    for seq in trajectories:
        seq = tuple(int(t) for t in seq)
        counts.update(seq[i:i + n] for i in range(len(seq) - n + 1))
    return counts


@dataclass
class OverlapStats:
    occurrences: int
    repeated_occurrences: int
    types: int
    repeated_types: int

    @property
    def overlap_pct(self) -> float:
        return 100.0 * self.repeated_occurrences / self.occurrences

    @property
    def distinct_overlap_pct(self) -> float:
        return 100.0 * self.repeated_types / self.types


def overlap_stats(trajectories: Sequence[Sequence[int]], n: int) -> OverlapStats:
    if n < 2:
        raise InputError("overlap needs n >= 2")
    counts = ngram_counts(trajectories, n)
    if not counts:
        raise InputError(f"no {n}-grams in the given trajectories")
    repeated = [c for c in counts.values() if c >= 2]
    return OverlapStats(
        occurrences=sum(counts.values()),
        repeated_occurrences=sum(repeated),
        types=len(counts),
        repeated_types=len(repeated),
    )


def overlap(trajectories: Sequence[Sequence[int]], n: int) -> float:
    """
    Percentage of pooled n-gram occurrences whose n-gram occurs at least
    twice in the pool (duplicates counted every time).
    """
    return overlap_stats(trajectories, n).overlap_pct


def overlap_report(
    trajectories: Sequence[Sequence[int]],
    gram_lengths: Sequence[int] = OVERLAP_GRAM_LENGTHS,
) -> OverlapReportFile:
    """Overlap of the first k trajectories for every k and n; pairs without n-grams are skipped"""
    if not trajectories:
        raise InputError("at least one trajectory is required")
    rows: List[OverlapRow] = []
    for k in range(1, len(trajectories) + 1):
        for n in gram_lengths:
            try:
                s = overlap_stats(trajectories[:k], n)
            except InputError:
                continue
            rows.append(OverlapRow(
                k=k,
                n=n,
                overlap_pct=s.overlap_pct,
                distinct_overlap_pct=s.distinct_overlap_pct,
                occurrences=s.occurrences,
                repeated_occurrences=s.repeated_occurrences,
            ))
    if not rows:
        raise InputError("no n-grams in the given trajectories")
    return OverlapReportFile(
        trajectories=len(trajectories),
        token_counts=[len(t) for t in trajectories],
        rows=rows,
    )


# ============================================================================
# TRAJECTORY FILES
# ============================================================================

def write_trajectories(trajectories: Sequence[Sequence[int]], path: Union[str, Path]) -> None:
    lines = [TrajectoryHeader().model_dump_json()]
    lines += [TrajectoryRecord(tokens=[int(t) for t in seq]).model_dump_json() for seq in trajectories]
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectories(path: Union[str, Path]) -> List[List[int]]:
    """JSON lines of {"tokens": [...]}, optionally preceded by a format header"""
    path = Path(path)
    if not path.is_file():
        raise InputError(f"trajectory file not found: {path}")
    out: List[List[int]] = []
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            raw = json.loads(line)
        except ValueError as e:
            raise FormatError(f"{path}:{lineno}: invalid JSON: {e}") from e
        if lineno == 1 and isinstance(raw, dict) and "format" in raw:
            if raw.get("format") != TRAJECTORY_FORMAT or raw.get("version") != FORMAT_VERSION:
                raise FormatError(f"{path}: unsupported trajectory format {raw.get('format')!r} v{raw.get('version')}")
            continue
        try:
            out.append(TrajectoryRecord.model_validate(raw).tokens)
        except ValidationError as e:
            raise FormatError(f"{path}:{lineno}: bad trajectory record: {e}") from e
    return out


# ============================================================================
# ACCEPTANCE PROBE
# ============================================================================

def expected_acceptance(
    p: np.ndarray,
    ids: np.ndarray,
    probs: np.ndarray,
    mode: DraftMode,
    width: int = PROBE_WIDTH,
) -> float:
    """
    Probability that a depth-1 draft of `width` siblings drawn from
    (ids, probs) gets one sibling accepted against target p.

    Deterministic drafting is a single draft. Sampled modes are averaged
    exactly over every ordered draw with its Plackett-Luce probability.
    """
    keep = probs > 0
    ids, probs = ids[keep], probs[keep]
    if len(ids) == 0:
        return 0.0
    probs = probs / probs.sum()
    entry = (ids, probs)
    mode = DraftMode(mode)
    k = min(width, len(ids))

    def accept_for(order: Sequence[int]) -> float:
        tokens = [int(ids[i]) for i in order]
        siblings = [(t, q_distribution_at(t, entry, tokens[:j], mode)) for j, t in enumerate(tokens)]
        return acceptance_probability(p, siblings)

    if mode == DraftMode.DETERMINISTIC:
        return accept_for(range(k))
    total = 0.0
    for order in permutations(range(len(ids)), k):
        weight, remaining = 1.0, 1.0
        for i in order:
            weight *= probs[i] / remaining
            remaining -= probs[i]
        total += weight * accept_for(order)
    return total


@dataclass
class ProbeResult:
    mode: DraftMode
    values: np.ndarray  # per-context acceptance probability

    @property
    def mean(self) -> float:
        return float(self.values.mean()) if len(self.values) else 0.0


def acceptance_probe(
    target: TargetModel,
    store: NGramStore,
    mode: DraftMode,
    contexts: Sequence[Sequence[int]],
    width: int = PROBE_WIDTH,
) -> ProbeResult:
    """
    Expected acceptance at a depth-1, width-3 draft over fixed contexts.
    A store miss counts as zero acceptance.
    """
    if not contexts:
        raise InputError("acceptance probe needs at least one context")
    values = np.zeros(len(contexts))
    for i, ctx in enumerate(contexts):
        entry = store.lookup(ctx)
        if entry is None:
            continue
        values[i] = expected_acceptance(target.next_distribution(ctx), entry.ids, entry.probs, mode, width)
    return ProbeResult(DraftMode(mode), values)


def probe_contexts(
    prompts: Sequence[Sequence[int]],
    trajectories: Sequence[Sequence[int]],
    limit: int,
    rng: np.random.Generator,
) -> List[List[int]]:
    """Up to `limit` contexts sampled from the prefixes of prompt + trajectory"""
    pool: List[Tuple[int, int]] = [
        (i, j) for i, traj in enumerate(trajectories) for j in range(len(traj))
    ]
    if not pool:
        return []
    picks = rng.choice(len(pool), size=min(limit, len(pool)), replace=False)
    contexts = []
    for pick in sorted(int(x) for x in picks):
        i, j = pool[pick]
        contexts.append(list(prompts[i]) + list(trajectories[i][:j]))
    return contexts


def compare_modes(
    target: TargetModel,
    store: NGramStore,
    contexts: Sequence[Sequence[int]],
    modes: Sequence[DraftMode] = tuple(DraftMode),
    confidence: float = 0.95,
) -> ProbeReportFile:
    """Probe every mode on the same contexts; paired stochastic minus deterministic gap with a t interval"""
    results: Dict[DraftMode, ProbeResult] = {
        DraftMode(m): acceptance_probe(target, store, m, contexts) for m in modes
    }
    gap_mean = gap_low = gap_high = 0.0
    if DraftMode.STOCHASTIC in results and DraftMode.DETERMINISTIC in results:
        diff = results[DraftMode.STOCHASTIC].values - results[DraftMode.DETERMINISTIC].values
        gap_mean = float(diff.mean())
        sem = float(sps.sem(diff)) if len(diff) > 1 else 0.0
        if sem > 0:
            gap_low, gap_high = (float(x) for x in sps.t.interval(confidence, len(diff) - 1, loc=gap_mean, scale=sem))
        else:
            gap_low = gap_high = gap_mean
    for r in results.values():
        logger.info(f"Probe {r.mode.value}: mean acceptance {r.mean:.4f} over {len(r.values)} contexts")
    return ProbeReportFile(
        results=[ProbeModeResult(mode=r.mode.value, mean_acceptance=r.mean, contexts=len(r.values)) for r in results.values()],
        gap_mean=gap_mean,
        gap_ci_low=gap_low,
        gap_ci_high=gap_high,
    )
