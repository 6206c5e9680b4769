"""
Tests for the adaptive n-gram store
"""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from app.core.exceptions import FormatError, InputError
from app.services.ngram_store import NGramStore, export_store, import_store, top_k_entries
from app.utils.sampling import make_rng


def dist(vocab_size, entries):
    p = np.zeros(vocab_size)
    for token, prob in entries.items():
        p[token] = prob
    return p


class TestUpdate:
    def test_first_observation_is_stored_verbatim(self):
        store = NGramStore(10)
        store.update([5], dist(10, {3: 0.7, 9: 0.3}))
        entry = store.lookup([5])
        assert entry.as_dict() == pytest.approx({3: 0.7, 9: 0.3})
        assert entry.count == 1

    def test_merge_weights_by_count(self):
        store = NGramStore(10)
        old = dist(10, {3: 0.6, 9: 0.4})
        store.update([5], old)
        store.update([5], old)
        store.update([5], dist(10, {3: 0.3, 2: 0.7}))
        entry = store.lookup([5])
        assert entry.count == 3
        assert entry.as_dict() == pytest.approx({3: 0.5, 9: 0.4 * 2 / 3, 2: 0.7 / 3})
        assert_array_equal(entry.ids, [3, 9, 2])

    def test_truncates_to_top_k(self):
        store = NGramStore(16)
        p = np.linspace(1, 12, 12)
        observed = np.zeros(16)
        observed[2:14] = p / p.sum()
        store.update([0], observed)
        entry = store.lookup([0])
        assert len(entry) == 10
        assert_array_equal(entry.ids, np.arange(13, 3, -1))
        assert entry.mass < 1.0
        assert (np.diff(entry.probs) <= 0).all()

    def test_ties_break_by_ascending_id(self):
        store = NGramStore(16)
        observed = np.zeros(16)
        observed[[15, 1, 7, 3, 11, 0, 9, 5, 13, 2, 14, 4]] = 1 / 12
        store.update([6], observed)
        assert_array_equal(store.lookup([6]).ids, [0, 1, 2, 3, 4, 5, 7, 9, 11, 13])

    def test_running_average_when_support_fits(self):
        rng = make_rng(7)
        support = np.array([1, 4, 6, 8, 10, 12, 15, 17])
        store = NGramStore(20)
        seen = []
        for _ in range(25):
            p = np.zeros(20)
            p[support] = rng.dirichlet(np.ones(len(support)))
            seen.append(p)
            store.update([3, 4], p)
        mean = np.mean(seen, axis=0)
        for context in ([4], [3, 4]):
            entry = store.lookup_with_level(context)[0]
            assert entry.count == 25
            assert_allclose(dist(20, entry.as_dict()), mean, atol=1e-12)

    def test_every_level_updated(self):
        store = NGramStore(8)
        store.update([1, 2, 3, 4], np.full(8, 1 / 8))
        stats = store.snapshot_stats()
        assert stats.entries_per_level == {1: 1, 2: 1, 3: 1, 4: 1}
        assert stats.total_entries == 4
        assert stats.memory_bytes > 0
        assert stats.updates == 1

    def test_short_context_updates_available_levels(self, store8):
        store8.update([1, 2], np.full(8, 1 / 8))
        assert store8.snapshot_stats().entries_per_level == {1: 1, 2: 1, 3: 0, 4: 0}

    def test_bad_input(self, store8):
        with pytest.raises(InputError):
            store8.update([], np.full(8, 1 / 8))
        with pytest.raises(InputError):
            store8.update([1], np.full(4, 1 / 4))


class TestMergeOracle:
    CONTEXTS = ([0, 1], [2, 1], [3])

    def run_sequence(self, rng, vocab_size, support=None, alpha=0.5):
        """Interleaved updates to several keys; returns the store and exact running means"""
        store = NGramStore(vocab_size)
        sums, counts = {}, {}
        for _ in range(int(rng.integers(1, 31))):
            context = self.CONTEXTS[int(rng.integers(len(self.CONTEXTS)))]
            p = np.zeros(vocab_size)
            if support is None:
                p[:] = rng.dirichlet(np.full(vocab_size, alpha))
            else:
                p[support] = rng.dirichlet(np.full(len(support), alpha))
            store.update(context, p)
            for n in range(1, len(context) + 1):
                key = tuple(context[-n:])
                sums[key] = sums.get(key, 0.0) + p
                counts[key] = counts.get(key, 0) + 1
        return store, {key: sums[key] / counts[key] for key in sums}, counts

    def test_matches_running_average_when_support_fits(self):
        rng = make_rng(11)
        for _ in range(1000):
            support = rng.choice(20, size=int(rng.integers(1, 11)), replace=False)
            store, means, counts = self.run_sequence(rng, 20, support=support)
            for key, mean in means.items():
                entry = store.tables[len(key) - 1][key]
                assert entry.count == counts[key]
                assert_allclose(dist(20, entry.as_dict()), mean, atol=1e-12)

    def test_top_token_survives_truncation(self):
        rng = make_rng(12)
        checked = 0
        for _ in range(1000):
            store, means, _ = self.run_sequence(rng, 24)
            for key, mean in means.items():
                entry = store.tables[len(key) - 1][key]
                stored = dist(24, entry.as_dict())
                # truncation only ever drops mass
                assert (stored <= mean + 1e-12).all()
                first, second = np.sort(mean)[::-1][:2]
                if first - second > 0.05:
                    checked += 1
                    assert entry.ids[0] == int(np.argmax(mean))
        assert checked > 200


class TestLookup:
    def test_longest_suffix_wins(self, store8):
        store8.update([1, 2, 3, 4], dist(8, {5: 1.0}))
        store8.update([3, 4], dist(8, {6: 1.0}))
        entry, level = store8.lookup_with_level([7, 2, 3, 4])
        assert level == 3
        assert entry.as_dict() == pytest.approx({5: 1.0})
        entry, level = store8.lookup_with_level([1, 2, 3, 4])
        assert level == 4

    def test_falls_back_to_unigram(self, store8):
        store8.update([1, 2], dist(8, {5: 1.0}))
        entry, level = store8.lookup_with_level([6, 2])
        assert level == 1

    def test_miss(self, store8):
        store8.update([1], dist(8, {5: 1.0}))
        assert store8.lookup_with_level([2]) == (None, 0)
        assert store8.snapshot_stats().misses == 1

    def test_empty_context_rejected(self, store8):
        with pytest.raises(InputError):
            store8.lookup([])

    def test_hits_are_counted_per_level(self, store8):
        store8.update([1, 2], dist(8, {5: 1.0}))
        store8.lookup([1, 2])
        store8.lookup([3, 2])
        assert store8.snapshot_stats().hits_per_level == {1: 1, 2: 1, 3: 0, 4: 0}


class TestCapacity:
    def test_least_recently_updated_evicted(self):
        store = NGramStore(8, max_entries_per_table=2)
        for token in (1, 2, 1, 3):
            store.update([token], np.full(8, 1 / 8))
        assert set(store.tables[0]) == {(1,), (3,)}

    def test_lookup_hit_refreshes_recency(self):
        store = NGramStore(8, max_entries_per_table=2)
        store.update([1], np.full(8, 1 / 8))
        store.update([2], np.full(8, 1 / 8))
        assert store.lookup([1]) is not None
        store.update([3], np.full(8, 1 / 8))
        assert set(store.tables[0]) == {(1,), (3,)}

    def test_copy_is_independent(self, store8):
        store8.update([1], dist(8, {5: 1.0}))
        clone = store8.copy()
        clone.update([1], dist(8, {6: 1.0}))
        clone.update([2], dist(8, {6: 1.0}))
        assert store8.lookup([1]).count == 1
        assert len(store8) == 1
        assert len(clone) == 2


class TestPersistence:
    def test_round_trip(self, tmp_path):
        store = NGramStore(8)
        rng = make_rng(1)
        for _ in range(30):
            store.update(rng.integers(0, 8, size=4).tolist(), rng.dirichlet(np.ones(8)))
        path = tmp_path / "store.jsonl"
        assert export_store(store, path) == len(store)
        loaded = import_store(path, vocab_size=8)
        assert len(loaded) == len(store)
        for n, key, entry in store.items():
            other = loaded.tables[n - 1][key]
            assert other.count == entry.count
            assert_array_equal(other.ids, entry.ids)
            assert_allclose(other.probs, entry.probs)

    def test_vocab_mismatch_rejected(self, tmp_path, store8):
        store8.update([1], np.full(8, 1 / 8))
        path = tmp_path / "store.jsonl"
        export_store(store8, path)
        with pytest.raises(FormatError):
            import_store(path, vocab_size=16)

    def test_unknown_version_rejected(self, tmp_path):
        path = tmp_path / "store.jsonl"
        path.write_text(json.dumps({"format": "stand-store", "version": 99, "vocab_size": 8}) + "\n")
        with pytest.raises(FormatError):
            import_store(path)

    def test_out_of_vocab_record_rejected(self, tmp_path):
        path = tmp_path / "store.jsonl"
        lines = [
            {"format": "stand-store", "version": 1, "vocab_size": 8},
            {"n": 1, "key": [9], "count": 1, "ids": [0], "probs": [1.0]},
        ]
        path.write_text("\n".join(json.dumps(line) for line in lines) + "\n")
        with pytest.raises(FormatError):
            import_store(path)

    @pytest.mark.parametrize(
        "ids, probs",
        [
            ([3, 3, 4], [0.4, 0.4, 0.2]),
            ([4, 3], [0.1, 0.9]),
            ([1, 2], [0.5, -0.1]),
            ([1, 2], [0.5, 0.0]),
            ([1, 2], [0.7, 0.6]),
            ([2, 1], [0.5, 0.5]),
            (list(range(7, -1, -1)) + [0, 1, 2], [0.05] * 11),
            ([], []),
        ],
        ids=["duplicate", "unsorted", "negative", "zero", "over-one", "tie-order", "too-many", "empty"],
    )
    def test_malformed_entry_rejected(self, tmp_path, ids, probs):
        path = tmp_path / "store.jsonl"
        lines = [
            {"format": "stand-store", "version": 1, "vocab_size": 8},
            {"n": 1, "key": [1], "count": 1, "ids": ids, "probs": probs},
        ]
        path.write_text("\n".join(json.dumps(line) for line in lines) + "\n")
        with pytest.raises(FormatError):
            import_store(path)

    def test_well_formed_entry_imported(self, tmp_path):
        path = tmp_path / "store.jsonl"
        lines = [
            {"format": "stand-store", "version": 1, "vocab_size": 8},
            {"n": 1, "key": [1], "count": 2, "ids": [3, 4], "probs": [0.9, 0.1]},
        ]
        path.write_text("\n".join(json.dumps(line) for line in lines) + "\n")
        entry = import_store(path).lookup([1])
        assert_array_equal(entry.ids, [3, 4])
        assert entry.count == 2

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "store.jsonl"
        path.write_text("")
        with pytest.raises(FormatError):
            import_store(path)


class TestTopKEntries:
    def test_labelled_values(self):
        ids, probs = top_k_entries(np.array([0.1, 0.0, 0.5]), 2, ids=np.array([7, 8, 9]))
        assert_array_equal(ids, [9, 7])
        assert_allclose(probs, [0.5, 0.1])
