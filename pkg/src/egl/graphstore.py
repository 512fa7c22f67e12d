"""Persisted entity graph with k-hop expansion and graph-quality metrics.

The store is a directory (edges.tsv + manifest.json) loaded into an immutable
in-memory adjacency; expansion queries run breadth-first with per-node fanout
truncation so relevance and diversity stay balanced.
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import (
    EntityGraph,
    ScoredEdge,
    read_edges,
    write_edges,
)


@dataclass
class StoredGraph:
    graph: EntityGraph
    built_at: int
    source_hashes: dict = field(default_factory=dict)
    _ranked_adj: list | None = field(default=None, repr=False)

    @property
    def n_entities(self) -> int:
        return self.graph.n_entities

    def ranked_neighbors(self, entity_id: int) -> list[ScoredEdge]:
        """Neighbours by descending score, ties toward the lower id; cached."""
        if self._ranked_adj is None:
            self._ranked_adj = [
                sorted(self.graph.neighbors(u), key=lambda e: (-e.score, e.dst))
                for u in range(self.graph.n_entities)
            ]
        return self._ranked_adj[entity_id]


def build_store(
    filtered_edges: EntityGraph,
    feedback_edges: Iterable[tuple[int, int]] = (),
    built_at: int = 0,
    source_hashes: dict | None = None,
) -> StoredGraph:
    """Final graph: ranked edges plus operator feedback pairs.

    Feedback pairs are forced to score 1.0 with provenance ``feedback`` and
    win any conflict with a ranked edge for the same pair.
    """
    merged: dict[tuple[int, int], ScoredEdge] = {
        (e.src, e.dst): e for e in filtered_edges.canonical_edges()
    }
    n = filtered_edges.n_entities
    for src, dst in feedback_edges:
        if not (0 <= src < n and 0 <= dst < n):
            raise ValueError(f"feedback pair ({src}, {dst}) references unknown entity")
        key = (min(src, dst), max(src, dst))
        merged[key] = ScoredEdge(key[0], key[1], 1.0, "feedback")
    graph = EntityGraph.from_edges(n, merged.values())
    return StoredGraph(graph=graph, built_at=int(built_at), source_hashes=dict(source_hashes or {}))


def save_store(store: StoredGraph, out_dir: str | Path) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_edges(store.graph, out / "edges.tsv")
    manifest = {
        "built_at": store.built_at,
        "n_entities": store.n_entities,
        "n_edges": store.graph.num_edges,
        "source_hashes": store.source_hashes,
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_store(in_dir: str | Path) -> StoredGraph:
    d = Path(in_dir)
    with open(d / "manifest.json", encoding="utf-8") as fh:
        manifest = json.load(fh)
    graph = read_edges(d / "edges.tsv", int(manifest["n_entities"]))
    if graph.num_edges != manifest["n_edges"]:
        raise ValueError(
            f"store corrupt: manifest says {manifest['n_edges']} edges, file has {graph.num_edges}"
        )
    return StoredGraph(
        graph=graph,
        built_at=int(manifest["built_at"]),
        source_hashes=dict(manifest.get("source_hashes", {})),
    )


@dataclass(frozen=True)
class ExpansionNode:
    entity_id: int
    hop: int
    parent: int | None


@dataclass
class ExpansionResult:
    nodes: list[ExpansionNode]
    edges: list[ScoredEdge]  # store edges between expansion nodes, src < dst

    def node_ids(self) -> list[int]:
        return [n.entity_id for n in self.nodes]

    def hops(self) -> dict[int, int]:
        return {n.entity_id: n.hop for n in self.nodes}


def expand(
    store: StoredGraph,
    seeds: Sequence[int],
    hops: int,
    max_per_hop: int | None = 20,
    max_nodes: int | None = 500,
) -> ExpansionResult:
    """Iterative k-hop expansion from the seed set.

    Each frontier node contributes at most ``max_per_hop`` unvisited
    neighbours, taken by descending edge score (ties toward the lower id);
    traversal stops at ``hops`` levels or ``max_nodes`` nodes.  Pass ``None``
    for either cap to get exact truncation-free BFS.
    """
    if hops < 0:
        raise ValueError("hops must be >= 0")
    if not seeds:
        raise ValueError("seed set is empty")
    n = store.n_entities
    for s in seeds:
        if not (0 <= s < n):
            raise KeyError(f"unknown seed entity {s}")

    nodes: list[ExpansionNode] = []
    visited: set[int] = set()
    frontier: list[int] = []
    for s in sorted(set(int(s) for s in seeds)):
        if max_nodes is not None and len(visited) >= max_nodes:
            break
        visited.add(s)
        nodes.append(ExpansionNode(s, 0, None))
        frontier.append(s)

    for hop in range(1, hops + 1):
        if not frontier or (max_nodes is not None and len(visited) >= max_nodes):
            break
        next_frontier: list[int] = []
        for u in frontier:
            taken = 0
            for e in store.ranked_neighbors(u):
                if max_per_hop is not None and taken >= max_per_hop:
                    break
                if max_nodes is not None and len(visited) >= max_nodes:
                    break
                if e.dst in visited:
                    continue
                visited.add(e.dst)
                nodes.append(ExpansionNode(e.dst, hop, u))
                next_frontier.append(e.dst)
                taken += 1
        frontier = next_frontier

    in_set = {node.entity_id for node in nodes}
    edges = [
        e
        for u in sorted(in_set)
        for e in store.graph.neighbors(u)
        if e.src < e.dst and e.dst in in_set
    ]
    return ExpansionResult(nodes=nodes, edges=edges)


@dataclass(frozen=True)
class Judgment:
    src: int
    dst: int
    related: int      # T in {0, 1}: the system proposes this relation
    correlation: float  # C in {0, 0.5, 1}: graded quality of the proposal

    def __post_init__(self) -> None:
        if self.related not in (0, 1):
            raise ValueError("related flag must be 0 or 1")
        if self.correlation not in (0.0, 0.5, 1.0):
            raise ValueError("correlation grade must be 0, 0.5 or 1")
        if self.correlation > 0 and self.related != 1:
            raise ValueError("positive correlation grade requires a proposed relation")


@dataclass
class JudgmentTable:
    entries: list[Judgment]


def compute_cors(judgments: JudgmentTable) -> float:
    """Correlation score: sum of grades over the number of proposed relations."""
    total_t = sum(j.related for j in judgments.entries)
    if total_t == 0:
        raise ValueError("correlation score undefined: no proposed relations")
    total_c = sum(j.correlation for j in judgments.entries)
    return total_c / total_t


def compute_aeec(graph: EntityGraph, n_lexicon: int) -> float:
    """Average expansion entity count: directed relation count over lexicon
    size; every undirected edge counts once from each endpoint."""
    if n_lexicon <= 0:
        raise ValueError("lexicon size must be positive")
    return 2.0 * graph.num_edges / n_lexicon


def judge_against_truth(
    graph: EntityGraph,
    truth: EntityGraph,
    communities: np.ndarray | None = None,
    mode: str = "graded",
) -> JudgmentTable:
    """Judgment table from planted labels, standing in for human annotation.

    Every stored edge is a proposed relation (T=1).  Grades: 1.0 for a true
    planted relation; in ``graded`` mode 0.5 for a same-community non-edge
    (related in theme, wrong pair); 0 otherwise.
    """
    if mode not in ("graded", "strict"):
        raise ValueError(f"unknown judging mode {mode!r}")
    entries = []
    for e in graph.canonical_edges():
        if truth.has_edge(e.src, e.dst):
            grade = 1.0
        elif (
            mode == "graded"
            and communities is not None
            and communities[e.src] == communities[e.dst]
        ):
            grade = 0.5
        else:
            grade = 0.0
        entries.append(Judgment(e.src, e.dst, 1, grade))
    return JudgmentTable(entries)
