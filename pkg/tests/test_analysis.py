"""
Tests for overlap statistics, trajectory files and the acceptance probe
"""

import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.core.exceptions import FormatError, InputError
from app.services.analysis import (
    acceptance_probe,
    compare_modes,
    expected_acceptance,
    ngram_counts,
    overlap,
    overlap_report,
    overlap_stats,
    probe_contexts,
    read_trajectories,
    write_trajectories,
)
from app.services.draft_tree import resolve_topology
from app.services.drafter import DraftMode
from app.services.engine import DecodeSession, StoreScope
from app.services.ngram_store import NGramStore
from app.utils.sampling import make_rng

from tests.conftest import cycle_model, make_markov


def brute_force_overlap(trajectories, n):
    """Quadratic oracle: share of occurrences equal to some other occurrence"""
    grams = [tuple(seq[i:i + n]) for seq in trajectories for i in range(len(seq) - n + 1)]
    repeated = sum(any(g == h for j, h in enumerate(grams) if j != i) for i, g in enumerate(grams))
    return 100.0 * repeated / len(grams)


class TestOverlap:
    def test_alternating_sequence_fully_repeated(self):
        assert overlap([[0, 1, 0, 1, 0, 1]], 2) == 100.0
        counts = ngram_counts([[0, 1, 0, 1, 0, 1]], 2)
        assert counts == {(0, 1): 3, (1, 0): 2}

    def test_distinct_ngrams(self):
        assert overlap([[0, 1, 2, 3], [4, 5, 6, 7]], 2) == 0.0

    @pytest.mark.parametrize("n", [2, 3, 4, 5])
    def test_matches_brute_force(self, n):
        rng = make_rng(n)
        for _ in range(20):
            corpus = [rng.integers(0, 4, size=int(rng.integers(n, 30))).tolist() for _ in range(4)]
            assert overlap(corpus, n) == pytest.approx(brute_force_overlap(corpus, n))

    def test_permutation_invariant(self):
        rng = make_rng(3)
        corpus = [rng.integers(0, 5, size=20).tolist() for _ in range(5)]
        for n in (2, 3, 4):
            assert overlap(corpus, n) == overlap(corpus[::-1], n)

    def test_duplicate_trajectory_is_fully_repeated(self):
        traj = [0, 1, 2, 3, 4, 5, 6]
        assert overlap([traj, list(traj)], 3) == 100.0

    def test_distinct_type_reading(self):
        stats = overlap_stats([[0, 1, 0, 1, 2]], 2)
        # (0,1)x2, (1,0)x1, (1,2)x1
        assert stats.occurrences == 4
        assert stats.repeated_occurrences == 2
        assert stats.overlap_pct == 50.0
        assert stats.distinct_overlap_pct == pytest.approx(100 / 3)

    def test_errors(self):
        with pytest.raises(InputError):
            overlap([[0, 1]], 3)
        with pytest.raises(InputError):
            overlap([[0, 1, 2]], 1)

    def test_report_skips_empty_pairs(self):
        report = overlap_report([[0, 1, 0], [0, 1, 0, 1, 0]], gram_lengths=(2, 3, 4))
        assert [(r.k, r.n) for r in report.rows] == [(1, 2), (1, 3), (2, 2), (2, 3), (2, 4)]
        assert report.token_counts == [3, 5]
        repeated = [r.repeated_occurrences for r in report.rows if r.n == 2]
        assert repeated == sorted(repeated)

    def test_report_needs_trajectories(self):
        with pytest.raises(InputError):
            overlap_report([])


class TestTrajectoryFiles:
    def test_round_trip(self, tmp_path):
        path = tmp_path / "t.jsonl"
        write_trajectories([[1, 2, 3], [], [4]], path)
        assert json.loads(path.read_text().splitlines()[0])["format"] == "stand-trajectories"
        assert read_trajectories(path) == [[1, 2, 3], [], [4]]

    def test_headerless_file(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text('{"tokens": [5, 6]}\n\n{"tokens": [7]}\n')
        assert read_trajectories(path) == [[5, 6], [7]]

    def test_bad_line(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text('{"tokens": [5, 6]}\nnot json\n')
        with pytest.raises(FormatError):
            read_trajectories(path)

    def test_wrong_header(self, tmp_path):
        path = tmp_path / "t.jsonl"
        path.write_text('{"format": "stand-trajectories", "version": 7}\n{"tokens": [1]}\n')
        with pytest.raises(FormatError):
            read_trajectories(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(InputError):
            read_trajectories(tmp_path / "nope.jsonl")


class TestExpectedAcceptance:
    def test_one_hot_target_matching_top1(self):
        p = np.eye(8)[2]
        ids, probs = np.array([2, 5]), np.array([0.9, 0.1])
        for mode in DraftMode:
            assert expected_acceptance(p, ids, probs, mode) == pytest.approx(1.0)

    def test_exact_store_entry(self):
        p = make_rng(0).dirichlet(np.ones(8))
        ids = np.argsort(-p, kind="stable")
        probs = p[ids]
        top3 = probs[:3].sum()
        assert expected_acceptance(p, ids, probs, DraftMode.STOCHASTIC) == pytest.approx(1.0)
        assert expected_acceptance(p, ids, probs, DraftMode.MULTINOMIAL) == pytest.approx(1.0)
        assert expected_acceptance(p, ids, probs, DraftMode.DETERMINISTIC) == pytest.approx(top3)
        assert top3 < 1.0

    def test_width_one_deterministic_is_top1_mass(self):
        p = np.array([0.1, 0.6, 0.3])
        assert expected_acceptance(p, np.array([2, 1]), np.array([0.7, 0.3]), DraftMode.DETERMINISTIC, width=1) == (
            pytest.approx(0.3)
        )

    def test_empty_entry(self):
        assert expected_acceptance(np.full(4, 0.25), np.array([1]), np.array([0.0]), DraftMode.STOCHASTIC) == 0.0


class TestAcceptanceProbe:
    def test_miss_scores_zero(self, small_model, store8):
        result = acceptance_probe(small_model, store8, DraftMode.STOCHASTIC, [[1], [2, 3]])
        assert_allclose(result.values, [0.0, 0.0])
        assert result.mean == 0.0

    def test_needs_contexts(self, small_model, store8):
        with pytest.raises(InputError):
            acceptance_probe(small_model, store8, DraftMode.STOCHASTIC, [])

    def test_deterministic_probe_is_repeatable(self):
        model = cycle_model(16)
        store = NGramStore(16)
        store.update([3], np.eye(16)[4])
        a = acceptance_probe(model, store, DraftMode.DETERMINISTIC, [[3], [2, 3]])
        b = acceptance_probe(model, store, DraftMode.DETERMINISTIC, [[3], [2, 3]])
        assert_allclose(a.values, b.values)
        assert_allclose(a.values, [1.0, 1.0])

    def test_stochastic_beats_deterministic_on_learned_store(self):
        model = make_markov(vocab_size=8, seed=9, n_patterns=0)
        prompts = [[1, 2], [5, 6]]
        session = DecodeSession(model, resolve_topology("builtin:optimized-80"), seed=1, scope=StoreScope.GLOBAL)
        trajectories = []
        for i, prompt in enumerate(prompts):
            trajectories += [r.tokens for r in session.run_problem(prompt, 2, 40, problem=i)]
        owners = [prompts[0]] * 2 + [prompts[1]] * 2
        contexts = probe_contexts(owners, trajectories, 60, make_rng(2))
        assert len(contexts) == 60
        report = compare_modes(model, session.store, contexts, modes=(DraftMode.STOCHASTIC, DraftMode.DETERMINISTIC))
        means = {r.mode: r.mean_acceptance for r in report.results}
        assert means["stochastic"] > means["deterministic"]
        assert report.gap_mean == pytest.approx(means["stochastic"] - means["deterministic"])
        assert report.gap_ci_low > 0
        assert report.gap_ci_low <= report.gap_mean <= report.gap_ci_high

    def test_probe_contexts_are_prefixes(self):
        contexts = probe_contexts([[9]], [[1, 2, 3]], 10, make_rng(0))
        assert contexts == [[9], [9, 1], [9, 1, 2]]
        assert probe_contexts([[9]], [[]], 5, make_rng(0)) == []
