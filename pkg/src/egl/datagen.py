"""Synthetic worlds with planted ground truth, plus brute-force oracles.

A world is a planted-partition entity graph, user logs generated as random
walks on it, and semantic vectors clustered around community centroids, so
every downstream stage has recoverable signal and exact labels.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    EmbeddingTable,
    Entity,
    EntityGraph,
    EntityLexicon,
    ScoredEdge,
    UserEntitySequence,
    read_edges,
    read_embeddings,
    read_sequences,
    seeded_rng,
    write_edges,
    write_embeddings,
    write_lexicon,
    write_sequences,
    load_lexicon,
)

# Fixed epoch base for synthetic timestamps; walks step one second apart.
TS_BASE = 1_700_000_000

_ETYPES = ("brand", "topic", "person", "place")


@dataclass
class World:
    lexicon: EntityLexicon
    truth_graph: EntityGraph
    sequences: list[UserEntitySequence]
    semantic_vectors: EmbeddingTable
    communities: np.ndarray  # entity_id -> community index

    @property
    def n_entities(self) -> int:
        return len(self.lexicon)


@dataclass
class DataSplit:
    """Edge holdout for link prediction: labelled pairs plus the visible graph."""

    train_pos: list[tuple[int, int, int]]
    train_neg: list[tuple[int, int, int]]
    test_pos: list[tuple[int, int, int]]
    test_neg: list[tuple[int, int, int]]
    observed_graph: EntityGraph


def _community_sizes(n: int, k: int) -> list[int]:
    base, rem = divmod(n, k)
    return [base + (1 if i < rem else 0) for i in range(k)]


def gen_world(
    n_entities: int,
    n_communities: int,
    intra_p: float,
    inter_p: float,
    n_users: int,
    walk_len: int = 20,
    seed: int = 0,
    walks_per_user: int = 5,
    semantic_dim: int = 32,
    semantic_noise: float = 0.05,
) -> World:
    """Generate a planted-partition world.

    Entities are split into contiguous community blocks; edges are sampled
    with probability ``intra_p`` inside a block and ``inter_p`` across blocks.
    User sequences are random walks on the planted graph and semantic vectors
    are noisy copies of per-community centroids.
    """
    if not (0.0 <= inter_p < intra_p <= 1.0):
        raise ValueError(f"need 0 <= inter_p < intra_p <= 1, got intra_p={intra_p}, inter_p={inter_p}")
    if n_communities < 1 or n_communities > n_entities:
        raise ValueError("need 1 <= n_communities <= n_entities")
    rng = seeded_rng(seed)

    sizes = _community_sizes(n_entities, n_communities)
    communities = np.repeat(np.arange(n_communities), sizes)
    entities = []
    offset = 0
    for c, size in enumerate(sizes):
        for j in range(size):
            gid = offset + j
            entities.append(Entity(gid, f"e{c:02d}w{j:04d}", _ETYPES[gid % len(_ETYPES)]))
        offset += size
    lexicon = EntityLexicon(entities)

    edges: list[ScoredEdge] = []
    offset = 0
    for size in sizes:
        if size >= 2:
            iu, iv = np.triu_indices(size, k=1)
            mask = rng.random(iu.shape[0]) < intra_p
            for u, v in zip(iu[mask] + offset, iv[mask] + offset):
                edges.append(ScoredEdge(int(u), int(v), 1.0, "feedback"))
        offset += size

    total_pairs = n_entities * (n_entities - 1) // 2
    intra_pairs = sum(s * (s - 1) // 2 for s in sizes)
    inter_pairs = total_pairs - intra_pairs
    if inter_pairs > 0 and inter_p > 0.0:
        count = int(rng.binomial(inter_pairs, inter_p))
        chosen: set[tuple[int, int]] = set()
        while len(chosen) < count:
            us = rng.integers(0, n_entities, size=4 * (count - len(chosen)) + 16)
            vs = rng.integers(0, n_entities, size=us.shape[0])
            for u, v in zip(us, vs):
                if len(chosen) >= count:
                    break
                if u == v or communities[u] == communities[v]:
                    continue
                key = (int(min(u, v)), int(max(u, v)))
                if key not in chosen:
                    chosen.add(key)
        for u, v in sorted(chosen):
            edges.append(ScoredEdge(u, v, 1.0, "feedback"))

    truth = EntityGraph.from_edges(n_entities, edges)

    centroids = rng.normal(size=(n_communities, semantic_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    sem = centroids[communities] + semantic_noise * rng.normal(size=(n_entities, semantic_dim))
    sem /= np.linalg.norm(sem, axis=1, keepdims=True)
    semantic = EmbeddingTable(sem)

    sequences: list[UserEntitySequence] = []
    for uid in range(n_users):
        events: list[tuple[int, int]] = []
        t = TS_BASE + uid  # interleave users; chronology only matters per user
        for _ in range(walks_per_user):
            node = int(rng.integers(0, n_entities))
            for _ in range(walk_len):
                events.append((t, node))
                t += 1
                nbrs = truth.neighbors(node)
                if not nbrs:
                    break
                node = nbrs[int(rng.integers(0, len(nbrs)))].dst
        sequences.append(UserEntitySequence(uid, tuple(events)))

    return World(lexicon, truth, sequences, semantic, communities)


def save_world(world: World, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_lexicon(world.lexicon, out / "lexicon.tsv")
    write_edges(world.truth_graph, out / "truth.tsv")
    write_sequences(world.sequences, out / "sequences.jsonl")
    write_embeddings(world.semantic_vectors, out / "semantic.txt")
    with open(out / "communities.tsv", "w", encoding="utf-8") as fh:
        for eid, c in enumerate(world.communities):
            fh.write(f"{eid}\t{int(c)}\n")


def load_world(in_dir: str | Path) -> World:
    d = Path(in_dir)
    lexicon = load_lexicon(d / "lexicon.tsv")
    truth = read_edges(d / "truth.tsv", lexicon)
    sequences = read_sequences(d / "sequences.jsonl")
    semantic = read_embeddings(d / "semantic.txt")
    communities = load_communities(d / "communities.tsv", len(lexicon))
    return World(lexicon, truth, sequences, semantic, communities)


def load_communities(path: str | Path, n_entities: int) -> np.ndarray:
    communities = np.zeros(n_entities, dtype=np.int64)
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                eid, c = line.split("\t")
                communities[int(eid)] = int(c)
    return communities


def split_edges(
    truth_graph: EntityGraph,
    test_frac: float,
    train_neg_ratio: int = 3,
    seed: int = 0,
) -> DataSplit:
    """Hold out ``test_frac`` of edges as positive test pairs.

    Negative test pairs are the same count of uniformly sampled non-edges;
    training keeps the remaining edges plus ``train_neg_ratio`` times as many
    non-edges.  All sampled pair sets are disjoint.
    """
    if not (0.0 < test_frac < 1.0):
        raise ValueError(f"test_frac must be in (0, 1), got {test_frac}")
    if train_neg_ratio < 1:
        raise ValueError(f"train_neg_ratio must be >= 1, got {train_neg_ratio}")
    rng = seeded_rng(seed)
    n = truth_graph.n_entities
    edges = truth_graph.canonical_edges()
    m = len(edges)
    if m == 0:
        raise ValueError("cannot split an empty graph")

    n_test = int(math.floor(test_frac * m + 0.5))  # round half up
    test_idx = set(rng.choice(m, size=n_test, replace=False).tolist())
    test_pos = [(edges[i].src, edges[i].dst, 1) for i in sorted(test_idx)]
    train_edges = [edges[i] for i in range(m) if i not in test_idx]
    train_pos = [(e.src, e.dst, 1) for e in train_edges]

    n_train_neg = train_neg_ratio * len(train_pos)
    needed = n_test + n_train_neg
    n_non_edges = n * (n - 1) // 2 - m
    if needed > n_non_edges:
        raise ValueError(
            f"graph too dense: need {needed} distinct non-edges, only {n_non_edges} exist"
        )

    edge_keys = truth_graph.edge_keys()
    non_edges: list[tuple[int, int]] = []
    if n <= 2500:
        iu, iv = np.triu_indices(n, k=1)
        all_pairs = [(int(u), int(v)) for u, v in zip(iu, iv) if (int(u), int(v)) not in edge_keys]
        pick = rng.choice(len(all_pairs), size=needed, replace=False)
        non_edges = [all_pairs[i] for i in pick]
    else:
        chosen: set[tuple[int, int]] = set()
        while len(chosen) < needed:
            us = rng.integers(0, n, size=2 * (needed - len(chosen)) + 16)
            vs = rng.integers(0, n, size=us.shape[0])
            for u, v in zip(us, vs):
                if len(chosen) >= needed:
                    break
                if u == v:
                    continue
                key = (int(min(u, v)), int(max(u, v)))
                if key not in edge_keys and key not in chosen:
                    chosen.add(key)
        non_edges = list(chosen)

    test_neg = [(u, v, 0) for u, v in non_edges[:n_test]]
    train_neg = [(u, v, 0) for u, v in non_edges[n_test:]]

    observed = EntityGraph.from_edges(n, train_edges)
    return DataSplit(train_pos, train_neg, test_pos, test_neg, observed)


def save_split(split: DataSplit, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in ("train_pos", "train_neg", "test_pos", "test_neg"):
        with open(out / f"{name}.tsv", "w", encoding="utf-8") as fh:
            for u, v, y in getattr(split, name):
                fh.write(f"{u}\t{v}\t{y}\n")
    write_edges(split.observed_graph, out / "observed.tsv")


def load_split(in_dir: str | Path, n_entities: int) -> DataSplit:
    d = Path(in_dir)
    lists = {}
    for name in ("train_pos", "train_neg", "test_pos", "test_neg"):
        pairs: list[tuple[int, int, int]] = []
        with open(d / f"{name}.tsv", encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    u, v, y = line.split("\t")
                    pairs.append((int(u), int(v), int(y)))
        lists[name] = pairs
    observed = read_edges(d / "observed.tsv", n_entities)
    return DataSplit(observed_graph=observed, **lists)


def oracle_khop(graph: EntityGraph, seed_entity: int, k: int) -> dict[int, int]:
    """Exact BFS hop distances from one seed, truncated at ``k`` hops."""
    if not (0 <= seed_entity < graph.n_entities):
        raise ValueError(f"unknown seed entity {seed_entity}")
    if k < 0:
        raise ValueError("k must be >= 0")
    dist = {seed_entity: 0}
    queue = deque([seed_entity])
    while queue:
        u = queue.popleft()
        if dist[u] == k:
            continue
        for e in graph.neighbors(u):
            if e.dst not in dist:
                dist[e.dst] = dist[u] + 1
                queue.append(e.dst)
    return dist


def oracle_topk_users(
    user_embeddings: np.ndarray,
    entity_embeddings: EmbeddingTable,
    query_entities: Sequence[int],
    k: int,
    user_ids: Sequence[int] | None = None,
) -> list[tuple[int, float]]:
    """Exhaustive top-K user scan: average dot product against the query set.

    Deliberately naive (per-user, per-entity loop) so it can serve as the
    independent oracle for the indexed retrieval path.
    """
    if len(query_entities) == 0:
        raise ValueError("query entity set is empty")
    if k < 1:
        raise ValueError("k must be >= 1")
    m = user_embeddings.shape[0]
    ids = list(user_ids) if user_ids is not None else list(range(m))
    scored: list[tuple[int, float]] = []
    for i in range(m):
        total = 0.0
        for e in query_entities:
            total += float(np.dot(user_embeddings[i], entity_embeddings.row(e)))
        scored.append((ids[i], total / len(query_entities)))
    scored.sort(key=lambda t: (-t[1], t[0]))
    return scored[:k]


def edge_precision(graph: EntityGraph, truth: EntityGraph) -> float:
    """Fraction of the graph's undirected edges present in the planted truth."""
    if graph.num_edges == 0:
        return 0.0
    hits = sum(1 for e in graph.canonical_edges() if truth.has_edge(e.src, e.dst))
    return hits / graph.num_edges


def edge_recall(graph: EntityGraph, truth: EntityGraph) -> float:
    """Fraction of planted truth edges present in the graph."""
    if truth.num_edges == 0:
        return 0.0
    hits = sum(1 for e in truth.canonical_edges() if graph.has_edge(e.src, e.dst))
    return hits / truth.num_edges
