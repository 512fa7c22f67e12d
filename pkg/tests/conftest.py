import pytest

from egl.core import Entity, EntityGraph, EntityLexicon, ScoredEdge
from egl.datagen import gen_world


@pytest.fixture(scope="session")
def small_world():
    """120 entities, 4 communities; fast enough for per-module tests."""
    return gen_world(
        n_entities=120,
        n_communities=4,
        intra_p=0.3,
        inter_p=0.01,
        n_users=60,
        walk_len=15,
        seed=11,
        walks_per_user=4,
        semantic_dim=16,
    )


@pytest.fixture
def tiny_lexicon():
    return EntityLexicon(
        [
            Entity(0, "nba", "topic"),
            Entity(1, "lakers", "brand"),
            Entity(2, "new york", "place"),
            Entity(3, "york", "place"),
        ]
    )


@pytest.fixture
def path_graph():
    """0 - 1 - 2 path used across expansion tests."""
    return EntityGraph.from_edges(
        3,
        [ScoredEdge(0, 1, 0.9, "ranked"), ScoredEdge(1, 2, 0.8, "ranked")],
    )
