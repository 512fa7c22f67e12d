"""User entity preference: user embeddings, affinity scores, top-K retrieval.

A user's embedding is the mean of the fused entity embeddings along their
entity sequence; affinity is a plain dot product; retrieval scans all users
exactly and averages per-entity scores over the query set.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import EmbeddingTable, UserEntitySequence, read_blocks, write_blocks

log = logging.getLogger(__name__)


def build_user_embedding(seq: UserEntitySequence, entity_embeddings: EmbeddingTable) -> np.ndarray:
    """Mean of the sequence's entity embeddings: sum of h_e over events, / l."""
    if len(seq) == 0:
        raise ValueError(f"user {seq.user_id} has an empty sequence")
    rows = entity_embeddings.vectors[np.asarray(seq.entity_ids, dtype=np.int64)]
    return rows.sum(axis=0) / len(seq)


def preference_score(user_vec: np.ndarray, entity_vec: np.ndarray) -> float:
    """Affinity of a user toward an entity: dot product of their embeddings."""
    if user_vec.shape != entity_vec.shape:
        raise ValueError(f"dimension mismatch: {user_vec.shape} vs {entity_vec.shape}")
    return float(np.dot(user_vec, entity_vec))


@dataclass
class PreferenceIndex:
    user_ids: np.ndarray          # (m,) int64
    user_matrix: np.ndarray       # (m, d) float64, row k is user_ids[k]
    entity_embeddings: EmbeddingTable

    def __post_init__(self) -> None:
        if self.user_matrix.ndim != 2 or self.user_matrix.shape[0] != self.user_ids.shape[0]:
            raise ValueError("user matrix and id list disagree")
        if self.user_matrix.shape[1] != self.entity_embeddings.dim:
            raise ValueError("user and entity embedding dimensions differ")
        if not np.all(np.isfinite(self.user_matrix)):
            raise ValueError("user matrix contains non-finite values")

    @property
    def n_users(self) -> int:
        return self.user_ids.shape[0]


def build_index(
    sequences: Sequence[UserEntitySequence],
    entity_embeddings: EmbeddingTable,
) -> PreferenceIndex:
    """Index every user with a non-empty sequence; empty users are skipped."""
    ids: list[int] = []
    rows: list[np.ndarray] = []
    for seq in sequences:
        if len(seq) == 0:
            log.warning("user %d has no events; excluded from the index", seq.user_id)
            continue
        ids.append(seq.user_id)
        rows.append(build_user_embedding(seq, entity_embeddings))
    matrix = np.vstack(rows) if rows else np.zeros((0, entity_embeddings.dim))
    return PreferenceIndex(np.asarray(ids, dtype=np.int64), matrix, entity_embeddings)


def target_users(
    index: PreferenceIndex,
    query_entities: Sequence[int],
    k: int,
) -> list[tuple[int, float]]:
    """Top-K users by average preference score over the query entity set.

    Exact full scan; ties broken by ascending user id.  Returns fewer than K
    only when the index holds fewer users.
    """
    if len(query_entities) == 0:
        raise ValueError("query entity set is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    n_ent = index.entity_embeddings.n
    for e in query_entities:
        if not (0 <= e < n_ent):
            raise KeyError(f"unknown entity {e}")
    # mean of per-entity dot products (column per entity, then averaged)
    cols = [index.user_matrix @ index.entity_embeddings.row(e) for e in query_entities]
    scores = np.mean(np.stack(cols, axis=1), axis=1) if cols else np.zeros(index.n_users)
    order = np.lexsort((index.user_ids, -scores))
    top = order[:k]
    return [(int(index.user_ids[i]), float(scores[i])) for i in top]


_INDEX_KIND = "preference-index"


def save_index(index: PreferenceIndex, path: str | Path) -> None:
    write_blocks(
        path,
        _INDEX_KIND,
        {"n_users": index.n_users, "dim": index.user_matrix.shape[1]},
        {
            "user_ids": index.user_ids.astype(np.float64),
            "user_matrix": index.user_matrix,
        },
    )


def load_index(path: str | Path, entity_embeddings: EmbeddingTable) -> PreferenceIndex:
    header, blocks = read_blocks(path, expect_kind=_INDEX_KIND)
    return PreferenceIndex(
        blocks["user_ids"].astype(np.int64),
        blocks["user_matrix"],
        entity_embeddings,
    )
