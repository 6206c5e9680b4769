"""
Logit-Based Adaptive N-gram Store
Lookup tables keyed by the last 1-4 tokens, each holding a compressed next-token distribution
"""

from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union
import json
import logging
import numpy as np
from pydantic import ValidationError

from app.core.config import settings
from app.core.exceptions import FormatError, InputError
from app.schemas import FORMAT_VERSION, STORE_FORMAT, StoreHeader, StoreRecord

logger = logging.getLogger(__name__)

# memory estimate: int64 id + float64 prob per stored pair, int64 per key token
PAIR_BYTES = 16
KEY_TOKEN_BYTES = 8
ENTRY_OVERHEAD_BYTES = 64


@dataclass
class CompressedDistribution:
    """
    Top-K (token, probability) pairs and the number of merged observations.

    Sorted by descending probability, ties by ascending token id. Not
    renormalized after truncation: the stored mass is the coverage.
    """
    ids: np.ndarray
    probs: np.ndarray
    count: int = 1

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def mass(self) -> float:
        return float(self.probs.sum())

    def as_dict(self) -> Dict[int, float]:
        return {int(i): float(p) for i, p in zip(self.ids, self.probs)}

    @property
    def nbytes(self) -> int:
        return ENTRY_OVERHEAD_BYTES + PAIR_BYTES * len(self.ids)


def top_k_entries(values: np.ndarray, k: int, ids: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Largest k strictly positive entries, descending, ties by ascending id.

    `values` is dense over the vocabulary unless `ids` labels it.
    """
    if ids is None:
        ids = np.flatnonzero(values > 0)
        values = values[ids]
    else:
        keep = values > 0
        ids, values = ids[keep], values[keep]
    order = np.lexsort((ids, -values))[:k]
    return ids[order].astype(np.int64), values[order].astype(np.float64)


def entry_violation(entry: CompressedDistribution, top_k: int) -> Optional[str]:
    """Reason `entry` breaks the stored-distribution rules, or None"""
    if len(entry) == 0:
        return "entry has no tokens"
    if len(entry) > top_k:
        return f"entry has {len(entry)} tokens, more than top_k={top_k}"
    if len(np.unique(entry.ids)) != len(entry):
        return "duplicate token ids"
    if (entry.probs <= 0).any():
        return "probabilities must be positive"
    if entry.mass > 1.0 + 1e-9:
        return f"probabilities sum to {entry.mass:.12g} > 1"
    ids, _ = top_k_entries(entry.probs, len(entry), ids=entry.ids)
    if not np.array_equal(ids, entry.ids):
        return "tokens not sorted by descending probability (ties by ascending id)"
    return None


@dataclass
class StoreStats:
    """Read-only summary returned by snapshot_stats"""
    entries_per_level: Dict[int, int]
    memory_bytes: int
    hits_per_level: Dict[int, int]
    misses: int
    updates: int

    @property
    def total_entries(self) -> int:
        return sum(self.entries_per_level.values())

    def to_dict(self) -> dict:
        return {
            "entries_per_level": {str(n): c for n, c in self.entries_per_level.items()},
            "total_entries": self.total_entries,
            "memory_bytes": self.memory_bytes,
            "hits_per_level": {str(n): c for n, c in self.hits_per_level.items()},
            "misses": self.misses,
            "updates": self.updates,
        }


class NGramStore:
    """
    Four lookup tables (context lengths 1..4) of CompressedDistributions.

    Single writer: the owning decode session calls update; lookups are
    plain reads apart from the hit/miss counters.
    """

    def __init__(
        self,
        vocab_size: int,
        top_k: Optional[int] = None,
        max_ngram: Optional[int] = None,
        max_entries_per_table: Optional[int] = None,
    ):
        if vocab_size < 2:
            raise InputError("vocab_size must be at least 2")
        self.vocab_size = vocab_size
        self.top_k = top_k or settings.STORE_TOP_K
        self.max_ngram = max_ngram or settings.STORE_MAX_NGRAM
        self.max_entries_per_table = (
            max_entries_per_table if max_entries_per_table is not None else settings.STORE_MAX_ENTRIES_PER_TABLE
        )
        # tables[n - 1] holds keys of length n; order is least recently used first
        self.tables: List["OrderedDict[Tuple[int, ...], CompressedDistribution]"] = [
            OrderedDict() for _ in range(self.max_ngram)
        ]
        self.hits = {n: 0 for n in range(1, self.max_ngram + 1)}
        self.misses = 0
        self.updates = 0

    # ========================================================================
    # UPDATE
    # ========================================================================

    def update(self, context: Sequence[int], observed: np.ndarray) -> None:
        """
        Merge a target distribution observed after `context` into every level.

        First observation stores the top-k of `observed`. Later ones average:
        old * k/(k+1) + new * 1/(k+1), with ids missing from the old entry
        counted as zero, then truncate to top-k again.
        """
        if len(context) == 0:
            raise InputError("update needs a context of at least one token")
        observed = np.asarray(observed, dtype=np.float64)
        if observed.shape != (self.vocab_size,):
            raise InputError(f"observed distribution has shape {observed.shape}, expected ({self.vocab_size},)")
        self.updates += 1
        first_ids = first_probs = None

        for n in range(1, min(self.max_ngram, len(context)) + 1):
            key = tuple(int(t) for t in context[len(context) - n:])
            table = self.tables[n - 1]
            entry = table.get(key)
            if entry is None:
                if first_ids is None:
                    first_ids, first_probs = top_k_entries(observed, self.top_k)
                table[key] = CompressedDistribution(first_ids.copy(), first_probs.copy(), 1)
                self._evict(table)
                continue
            k = entry.count
            merged = observed * (1.0 / (k + 1))
            merged[entry.ids] += entry.probs * (k / (k + 1))
            entry.ids, entry.probs = top_k_entries(merged, self.top_k)
            entry.count = k + 1
            table.move_to_end(key)

    def _evict(self, table: "OrderedDict") -> None:
        cap = self.max_entries_per_table
        while cap is not None and len(table) > cap:
            table.popitem(last=False)

    # ========================================================================
    # LOOKUP
    # ========================================================================

    def lookup_with_level(self, context: Sequence[int]) -> Tuple[Optional[CompressedDistribution], int]:
        """Longest matching suffix entry (4 -> 1) and its gram length; (None, 0) on a miss"""
        if len(context) == 0:
            raise InputError("lookup needs a context of at least one token")
        for n in range(min(self.max_ngram, len(context)), 0, -1):
            key = tuple(int(t) for t in context[len(context) - n:])
            table = self.tables[n - 1]
            entry = table.get(key)
            if entry is not None:
                self.hits[n] += 1
                table.move_to_end(key)
                return entry, n
        self.misses += 1
        return None, 0

    def lookup(self, context: Sequence[int]) -> Optional[CompressedDistribution]:
        return self.lookup_with_level(context)[0]

    # ========================================================================
    # STATS
    # ========================================================================

    def snapshot_stats(self) -> StoreStats:
        memory = 0
        for n, table in enumerate(self.tables, start=1):
            for entry in table.values():
                memory += entry.nbytes + KEY_TOKEN_BYTES * n
        return StoreStats(
            entries_per_level={n: len(t) for n, t in enumerate(self.tables, start=1)},
            memory_bytes=memory,
            hits_per_level=dict(self.hits),
            misses=self.misses,
            updates=self.updates,
        )

    def __len__(self) -> int:
        return sum(len(t) for t in self.tables)

    def items(self) -> Iterator[Tuple[int, Tuple[int, ...], CompressedDistribution]]:
        for n, table in enumerate(self.tables, start=1):
            for key, entry in table.items():
                yield n, key, entry

    def copy(self) -> "NGramStore":
        """Independent snapshot for concurrent readers"""
        clone = NGramStore(self.vocab_size, self.top_k, self.max_ngram, self.max_entries_per_table)
        for n, key, entry in self.items():
            clone.tables[n - 1][key] = CompressedDistribution(entry.ids.copy(), entry.probs.copy(), entry.count)
        return clone


# ============================================================================
# PERSISTENCE (JSON lines)
# ============================================================================

def export_store(store: NGramStore, path: Union[str, Path]) -> int:
    """Write header + one record per key; returns the record count"""
    header = StoreHeader(vocab_size=store.vocab_size)
    lines = [header.model_dump_json()]
    for n, key, entry in store.items():
        record = StoreRecord(
            n=n,
            key=list(key),
            count=entry.count,
            ids=entry.ids.tolist(),
            probs=entry.probs.tolist(),
        )
        lines.append(record.model_dump_json())
    Path(path).write_text("\n".join(lines) + "\n")
    logger.info(f"Exported {len(lines) - 1} store entries to {path}")
    return len(lines) - 1


def import_store(path: Union[str, Path], vocab_size: Optional[int] = None) -> NGramStore:
    """
    Read a store export.

    Rejects unknown formats/versions and, when `vocab_size` is given,
    stores built for another vocabulary.
    """
    lines = [line for line in Path(path).read_text().splitlines() if line.strip()]
    if not lines:
        raise FormatError(f"{path} is empty")
    try:
        raw_header = json.loads(lines[0])
        header = StoreHeader.model_validate(raw_header)
    except (ValueError, ValidationError) as e:
        raise FormatError(f"{path}: bad store header: {e}") from e
    if header.format != STORE_FORMAT:
        raise FormatError(f"{path}: unknown format {header.format!r}")
    if header.version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported store version {header.version}")
    if vocab_size is not None and header.vocab_size != vocab_size:
        raise FormatError(f"{path}: store vocab_size {header.vocab_size} does not match model vocab_size {vocab_size}")

    store = NGramStore(header.vocab_size)
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            record = StoreRecord.model_validate_json(line)
        except ValidationError as e:
            raise FormatError(f"{path}:{lineno}: bad record: {e}") from e
        if record.n > store.max_ngram:
            raise FormatError(f"{path}:{lineno}: gram length {record.n} exceeds {store.max_ngram}")
        if any(not 0 <= t < header.vocab_size for t in record.key + record.ids):
            raise FormatError(f"{path}:{lineno}: token id outside vocab")
        entry = CompressedDistribution(
            np.asarray(record.ids, dtype=np.int64),
            np.asarray(record.probs, dtype=np.float64),
            record.count,
        )
        problem = entry_violation(entry, store.top_k)
        if problem:
            raise FormatError(f"{path}:{lineno}: {problem}")
        store.tables[record.n - 1][tuple(record.key)] = entry
    logger.info(f"Imported {len(store)} store entries from {path}")
    return store
