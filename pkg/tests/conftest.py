"""
Shared fixtures: small Markov targets, stores and trees
"""

import numpy as np
import pytest

from app.models import MarkovModel, MarkovModelSpec, ModelConfig, Pattern
from app.services.draft_tree import TreeTopology, validate_topology
from app.services.ngram_store import NGramStore
from app.services.synthetic import random_markov_spec
from app.utils.sampling import make_rng


def make_markov(vocab_size=8, seed=3, n_patterns=2, temperature=1.0, concentration=1.0):
    """Order-1 Markov target with a few injected phrases"""
    spec = random_markov_spec(
        vocab_size,
        make_rng(seed),
        order=1,
        concentration=concentration,
        n_patterns=n_patterns,
        pattern_length=(3, 4),
        pattern_prob=0.6,
    )
    return MarkovModel(spec, ModelConfig(vocab_size=vocab_size, temperature=temperature))


def cycle_model(vocab_size=64):
    """Deterministic target: token t is always followed by t + 1 (mod V)"""
    rows = {(): np.eye(vocab_size)[0]}
    for t in range(vocab_size):
        rows[(t,)] = np.eye(vocab_size)[(t + 1) % vocab_size]
    spec = MarkovModelSpec(vocab_size=vocab_size, order=1, rows=rows)
    return MarkovModel(spec, ModelConfig(vocab_size=vocab_size, temperature=1.0))


def assert_valid_topology(topology: TreeTopology):
    """Structural validator shared by every tree test"""
    depths = validate_topology(topology.parents, topology.children, topology.root_children)
    for node, parent in enumerate(topology.parents):
        expected = 1 if parent is None else depths[parent] + 1
        assert depths[node] == expected


@pytest.fixture
def small_model():
    return make_markov()


@pytest.fixture
def patterned_model():
    spec = MarkovModelSpec(
        vocab_size=8,
        order=1,
        rows={(): np.full(8, 1 / 8)},
        patterns=[Pattern((1, 2, 3), 1.0)],
    )
    return MarkovModel(spec, ModelConfig(vocab_size=8, temperature=1.0))


@pytest.fixture
def store8():
    return NGramStore(8)


@pytest.fixture
def rng():
    return make_rng(12345)
