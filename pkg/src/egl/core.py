"""Shared domain types, deterministic RNG, and on-disk codecs.

Everything downstream builds on these types: a lexicon of dense-id entities,
per-user entity event sequences, embedding tables keyed by entity id, and
score-weighted undirected entity graphs.  All types are immutable after
construction and safe for concurrent reads.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

PROVENANCES = ("cooccurrence", "semantic", "ranked", "feedback")

# Scores are rounded to 6 decimals when a graph is built, so memory and disk
# agree bit-for-bit and codec round trips are exact.
SCORE_DECIMALS = 6


class CodecError(ValueError):
    """An on-disk artifact violates its format contract."""


def normalize_name(name: str) -> str:
    """Canonical entity-name form: lowercase, surrounding whitespace removed."""
    return name.strip().lower()


@dataclass(frozen=True)
class Entity:
    id: int
    name: str
    etype: str


class EntityLexicon:
    """Ordered entity vocabulary with a name -> id lookup.

    Ids must be contiguous 0..N-1 and normalized names unique.
    """

    def __init__(self, entities: Sequence[Entity]):
        by_name: dict[str, int] = {}
        for i, ent in enumerate(entities):
            if ent.id != i:
                raise ValueError(f"entity ids must be contiguous: expected {i}, got {ent.id}")
            if ent.name != normalize_name(ent.name):
                raise ValueError(f"entity name not normalized: {ent.name!r}")
            if ent.name in by_name:
                raise ValueError(f"duplicate entity name: {ent.name!r}")
            by_name[ent.name] = i
        self._entities = tuple(entities)
        self._by_name = by_name

    def __len__(self) -> int:
        return len(self._entities)

    def __iter__(self) -> Iterator[Entity]:
        return iter(self._entities)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, EntityLexicon) and self._entities == other._entities

    def entity(self, entity_id: int) -> Entity:
        return self._entities[entity_id]

    def id_of(self, name: str) -> int:
        return self._by_name[normalize_name(name)]

    def get(self, name: str) -> int | None:
        return self._by_name.get(normalize_name(name))

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self._entities)


def load_lexicon(path: str | Path) -> EntityLexicon:
    """Parse a lexicon TSV (``id \\t name \\t etype``, one entity per line)."""
    entities: list[Entity] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise CodecError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
            try:
                eid = int(parts[0])
            except ValueError:
                raise CodecError(f"{path}:{lineno}: bad entity id {parts[0]!r}") from None
            name = normalize_name(parts[1])
            if not name:
                raise CodecError(f"{path}:{lineno}: empty entity name")
            if name in seen:
                raise CodecError(f"{path}:{lineno}: duplicate entity name {name!r}")
            if eid != len(entities):
                raise CodecError(f"{path}:{lineno}: non-contiguous id {eid} (expected {len(entities)})")
            seen.add(name)
            entities.append(Entity(eid, name, parts[2]))
    return EntityLexicon(entities)


def write_lexicon(lexicon: EntityLexicon, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ent in lexicon:
            fh.write(f"{ent.id}\t{ent.name}\t{ent.etype}\n")


@dataclass(frozen=True)
class UserEntitySequence:
    """Chronological entity events for one user."""

    user_id: int
    events: tuple[tuple[int, int], ...]  # (timestamp seconds, entity_id)

    def __post_init__(self) -> None:
        ts = [t for t, _ in self.events]
        if any(a > b for a, b in zip(ts, ts[1:])):
            raise ValueError(f"user {self.user_id}: events not sorted by timestamp")

    @property
    def entity_ids(self) -> list[int]:
        return [eid for _, eid in self.events]

    def __len__(self) -> int:
        return len(self.events)


def read_sequences(path: str | Path) -> list[UserEntitySequence]:
    """Parse JSON Lines ``{"user_id": int, "events": [[ts, entity_id], ...]}``."""
    out: list[UserEntitySequence] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
                out.append(
                    UserEntitySequence(
                        user_id=int(rec["user_id"]),
                        events=tuple((int(t), int(e)) for t, e in rec["events"]),
                    )
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise CodecError(f"{path}:{lineno}: bad sequence record: {exc}") from None
    return out


def write_sequences(sequences: Iterable[UserEntitySequence], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            rec = {"user_id": seq.user_id, "events": [[t, e] for t, e in seq.events]}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


class EmbeddingTable:
    """Dense vectors keyed by entity id (row index)."""

    def __init__(self, vectors: np.ndarray):
        vectors = np.ascontiguousarray(vectors, dtype=np.float64)
        if vectors.ndim != 2:
            raise ValueError(f"embedding table must be 2-D, got shape {vectors.shape}")
        if not np.all(np.isfinite(vectors)):
            raise ValueError("embedding table contains non-finite values")
        self._vectors = vectors
        self._vectors.setflags(write=False)

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    @property
    def n(self) -> int:
        return self._vectors.shape[0]

    def row(self, entity_id: int) -> np.ndarray:
        return self._vectors[entity_id]


def read_embeddings(path: str | Path) -> EmbeddingTable:
    """Parse the embedding format: ``dim d`` header, then ``id v1 .. vd`` rows.

    Rows must cover ids 0..N-1 where N is the largest id plus one.
    """
    rows: dict[int, np.ndarray] = {}
    dim: int | None = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.split()
            if not parts:
                continue
            if lineno == 1:
                if len(parts) != 2 or parts[0] != "dim":
                    raise CodecError(f"{path}:1: expected header 'dim d'")
                dim = int(parts[1])
                continue
            if dim is None or len(parts) != dim + 1:
                raise CodecError(f"{path}:{lineno}: expected {1 + (dim or 0)} fields")
            eid = int(parts[0])
            if eid in rows:
                raise CodecError(f"{path}:{lineno}: duplicate embedding for entity {eid}")
            rows[eid] = np.array([float(x) for x in parts[1:]], dtype=np.float64)
    if dim is None:
        raise CodecError(f"{path}: missing 'dim d' header")
    n = (max(rows) + 1) if rows else 0
    missing = [i for i in range(n) if i not in rows]
    if missing:
        raise CodecError(f"{path}: missing embeddings for entity ids {missing[:10]}")
    mat = np.zeros((n, dim), dtype=np.float64)
    for eid, vec in rows.items():
        mat[eid] = vec
    return EmbeddingTable(mat)


def write_embeddings(table: EmbeddingTable, path: str | Path) -> None:
    # %.17g round-trips float64 exactly.
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"dim {table.dim}\n")
        for eid in range(table.n):
            vals = " ".join(f"{v:.17g}" for v in table.row(eid))
            fh.write(f"{eid} {vals}\n")


def quantize_score(score: float) -> float:
    return round(float(score), SCORE_DECIMALS)


@dataclass(frozen=True)
class ScoredEdge:
    src: int
    dst: int
    score: float
    provenance: str

    def __post_init__(self) -> None:
        if self.src == self.dst:
            raise ValueError(f"self-loop edge on entity {self.src}")
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"edge score {self.score} outside [0, 1]")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance {self.provenance!r}")


class EntityGraph:
    """Undirected entity graph with per-edge confidence scores.

    Each undirected edge is stored once under the canonical key (min, max);
    adjacency views expose it from both endpoints with the same score.
    """

    def __init__(self, n_entities: int, canonical: dict[tuple[int, int], tuple[float, str]]):
        self._n = int(n_entities)
        self._edges = canonical
        adj: list[list[ScoredEdge]] = [[] for _ in range(self._n)]
        for (u, v), (score, prov) in canonical.items():
            adj[u].append(ScoredEdge(u, v, score, prov))
            adj[v].append(ScoredEdge(v, u, score, prov))
        for lst in adj:
            lst.sort(key=lambda e: e.dst)
        self._adj = tuple(tuple(lst) for lst in adj)

    @classmethod
    def from_edges(
        cls,
        n_entities: int,
        edges: Iterable[ScoredEdge],
        on_conflict: str = "error",
    ) -> "EntityGraph":
        """Build a graph from (possibly directed, possibly duplicated) edges.

        ``on_conflict`` resolves multiple scores for one pair: ``error`` rejects,
        ``max`` keeps the highest (provenance order breaks exact ties).
        """
        if on_conflict not in ("error", "max"):
            raise ValueError(f"bad on_conflict mode {on_conflict!r}")
        canonical: dict[tuple[int, int], tuple[float, str]] = {}
        for e in edges:
            if not (0 <= e.src < n_entities and 0 <= e.dst < n_entities):
                raise ValueError(f"edge ({e.src}, {e.dst}) references unknown entity (n={n_entities})")
            key = (min(e.src, e.dst), max(e.src, e.dst))
            val = (quantize_score(e.score), e.provenance)
            old = canonical.get(key)
            if old is None:
                canonical[key] = val
            elif old != val:
                if on_conflict == "error":
                    raise ValueError(f"conflicting scores for edge {key}: {old} vs {val}")
                old_rank = (old[0], PROVENANCES.index(old[1]))
                new_rank = (val[0], PROVENANCES.index(val[1]))
                if new_rank > old_rank:
                    canonical[key] = val
        return cls(n_entities, canonical)

    @property
    def n_entities(self) -> int:
        return self._n

    @property
    def num_edges(self) -> int:
        return len(self._edges)

    def neighbors(self, entity_id: int) -> tuple[ScoredEdge, ...]:
        return self._adj[entity_id]

    def degree(self, entity_id: int) -> int:
        return len(self._adj[entity_id])

    def has_edge(self, u: int, v: int) -> bool:
        return (min(u, v), max(u, v)) in self._edges

    def edge_score(self, u: int, v: int) -> float:
        return self._edges[(min(u, v), max(u, v))][0]

    def canonical_edges(self) -> list[ScoredEdge]:
        """All undirected edges once, src < dst, sorted by (src, dst)."""
        return [
            ScoredEdge(u, v, score, prov)
            for (u, v), (score, prov) in sorted(self._edges.items())
        ]

    def edge_keys(self) -> set[tuple[int, int]]:
        return set(self._edges)

    def __eq__(self, other: object) -> bool:
        return (
            isinstance(other, EntityGraph)
            and self._n == other._n
            and self._edges == other._edges
        )


def validate_graph(graph: EntityGraph) -> None:
    """Full invariant sweep: symmetric closure, score range, no self loops.

    Construction already guarantees these; tests run this on every graph any
    stage produces.
    """
    seen: set[tuple[int, int]] = set()
    for u in range(graph.n_entities):
        prev_dst = -1
        for e in graph.neighbors(u):
            if e.src != u:
                raise AssertionError(f"adjacency of {u} holds edge with src {e.src}")
            if e.dst == u:
                raise AssertionError(f"self loop at {u}")
            if e.dst <= prev_dst:
                raise AssertionError(f"neighbors of {u} not sorted by dst")
            prev_dst = e.dst
            if not (0.0 <= e.score <= 1.0):
                raise AssertionError(f"edge ({u},{e.dst}) score {e.score} out of range")
            back = [b for b in graph.neighbors(e.dst) if b.dst == u]
            if len(back) != 1 or back[0].score != e.score:
                raise AssertionError(f"edge ({u},{e.dst}) missing symmetric counterpart")
            seen.add((min(u, e.dst), max(u, e.dst)))
    if len(seen) != graph.num_edges:
        raise AssertionError("edge count mismatch between adjacency and canonical store")


def write_edges(graph: EntityGraph, path: str | Path) -> None:
    """Write ``src \\t dst \\t score \\t provenance``; one line per undirected edge."""
    with open(path, "w", encoding="utf-8") as fh:
        for e in graph.canonical_edges():
            fh.write(f"{e.src}\t{e.dst}\t{e.score:.6f}\t{e.provenance}\n")


def read_edges(path: str | Path, lexicon: EntityLexicon | int) -> EntityGraph:
    n = len(lexicon) if isinstance(lexicon, EntityLexicon) else int(lexicon)
    edges: list[ScoredEdge] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise CodecError(f"{path}:{lineno}: expected 4 tab-separated fields")
            try:
                src, dst, score, prov = int(parts[0]), int(parts[1]), float(parts[2]), parts[3]
                if not (0 <= src < n and 0 <= dst < n):
                    raise ValueError(f"entity id out of range (n={n})")
                edges.append(ScoredEdge(src, dst, score, prov))
            except ValueError as exc:
                raise CodecError(f"{path}:{lineno}: {exc}") from None
    try:
        return EntityGraph.from_edges(n, edges, on_conflict="error")
    except ValueError as exc:
        raise CodecError(f"{path}: {exc}") from None


def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic random stream: identical seed, identical draws."""
    return np.random.default_rng(np.random.PCG64(seed))


# --------------------------------------------------------------------------
# Run configuration
# --------------------------------------------------------------------------


@dataclass
class RunConfig:
    """Flat key=value configuration covering every tunable in the pipeline.

    Defaults are the benchmark values; ``validate`` enforces the legal range
    of each numeric field.
    """

    seed: int = 7

    # synthetic world generation
    n_entities: int = 1000
    n_communities: int = 10
    intra_p: float = 0.1
    inter_p: float = 0.001
    n_users: int = 500
    walks_per_user: int = 5
    walk_len: int = 20
    semantic_dim: int = 32
    semantic_noise: float = 0.05

    # sequence extraction
    window_days: int = 30

    # co-occurrence embeddings / candidate generation
    sgns_dim: int = 64
    sgns_window: int = 5
    sgns_kneg: int = 5
    sgns_epochs: int = 3
    sgns_lr: float = 0.025
    unigram_power: float = 0.75
    semantic_mode: str = "file"
    ngram_n: int = 3
    ngram_buckets: int = 256
    cand_topk: int = 50
    cand_min_sim: float = 0.5

    # edge split
    test_frac: float = 0.1
    train_neg_ratio: int = 3

    # ranking model
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.2
    anchor_sim_threshold: float = 0.8
    gnn_layers: int = 2
    hidden_dim: int = 32
    neighbor_cap: int = 10
    batch_size: int = 4096
    contrastive_batch: int = 256
    learning_rate: float = 0.05
    epochs: int = 30
    patience: int = 5
    val_frac: float = 0.1
    encoder: str = "geniepath"

    # snapshot ensemble
    snapshots: int = 3
    ensemble_heads: int = 4
    ensemble_dim: int = 32
    ensemble_epochs: int = 60
    ensemble_lr: float = 0.02

    # online serving
    default_hops: int = 2
    max_per_hop: int = 20
    expand_max_nodes: int = 500
    export_k: int = 100

    # pipeline bookkeeping
    built_at: int = 0
    resume: bool = False

    def validate(self) -> None:
        checks = [
            (self.n_entities >= 1, "n_entities >= 1"),
            (self.n_communities >= 1, "n_communities >= 1"),
            (0.0 <= self.inter_p < self.intra_p <= 1.0, "0 <= inter_p < intra_p <= 1"),
            (self.n_users >= 1, "n_users >= 1"),
            (self.walk_len >= 1, "walk_len >= 1"),
            (self.window_days >= 1, "window_days >= 1"),
            (self.sgns_dim >= 1, "sgns_dim >= 1"),
            (self.sgns_window >= 1, "sgns_window >= 1"),
            (self.sgns_kneg >= 1, "sgns_kneg >= 1"),
            (self.sgns_epochs >= 0, "sgns_epochs >= 0"),
            (self.semantic_mode in ("file", "hash"), "semantic_mode in {file, hash}"),
            (self.cand_topk >= 1, "cand_topk >= 1"),
            (0.0 < self.test_frac < 1.0, "0 < test_frac < 1"),
            (self.train_neg_ratio >= 1, "train_neg_ratio >= 1"),
            (self.alpha >= 0.0, "alpha >= 0"),
            (self.beta >= 0.0, "beta >= 0"),
            (self.tau > 0.0, "tau > 0"),
            (self.gnn_layers >= 1, "gnn_layers >= 1"),
            (self.hidden_dim >= 1, "hidden_dim >= 1"),
            (self.neighbor_cap >= 1, "neighbor_cap >= 1"),
            (self.encoder in ("geniepath", "mean"), "encoder in {geniepath, mean}"),
            (self.snapshots >= 2, "snapshots >= 2"),
            (self.ensemble_dim % self.ensemble_heads == 0, "ensemble_dim divisible by ensemble_heads"),
            (self.default_hops >= 0, "default_hops >= 0"),
            (self.max_per_hop >= 1, "max_per_hop >= 1"),
            (self.export_k >= 1, "export_k >= 1"),
        ]
        bad = [msg for ok, msg in checks if not ok]
        if bad:
            raise ValueError("invalid config: " + "; ".join(bad))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        cfg = dataclasses.replace(self)
        for key, raw in overrides.items():
            cfg = _apply_config_value(cfg, key, raw)
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        """Parse flat ``key = value`` text; '#' starts a comment."""
        cfg = cls()
        with open(path, encoding="utf-8") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise CodecError(f"{path}:{lineno}: expected 'key = value'")
                key, val = (s.strip() for s in line.split("=", 1))
                try:
                    cfg = _apply_config_value(cfg, key, val)
                except ValueError as exc:
                    raise CodecError(f"{path}:{lineno}: {exc}") from None
        return cfg


def _apply_config_value(cfg: RunConfig, key: str, raw: str) -> RunConfig:
    fields_by_name = {f.name: f for f in dataclasses.fields(RunConfig)}
    if key not in fields_by_name:
        raise ValueError(f"unknown config key {key!r}")
    ftype = fields_by_name[key].type
    value: object
    if ftype == "bool":
        if raw.lower() not in ("true", "false", "1", "0"):
            raise ValueError(f"bad boolean for {key}: {raw!r}")
        value = raw.lower() in ("true", "1")
    elif ftype == "int":
        value = int(raw)
    elif ftype == "float":
        value = float(raw)
    else:
        value = raw
    return dataclasses.replace(cfg, **{key: value})


# --------------------------------------------------------------------------
# Versioned binary parameter blocks (model / index files)
# --------------------------------------------------------------------------

_BLOCK_MAGIC = b"EGLBLK1\n"


def write_blocks(path: str | Path, kind: str, header: dict, blocks: dict[str, np.ndarray]) -> None:
    """Write a versioned binary file: magic, JSON header, named float64 blocks.

    Layout: 8-byte magic, uint32 header length, UTF-8 JSON header (carries
    ``kind`` plus callers' metadata plus the block name/shape directory),
    then each block's float64 little-endian C-order bytes in directory order.
    """
    directory = [{"name": name, "shape": list(arr.shape)} for name, arr in blocks.items()]
    head = dict(header)
    head["kind"] = kind
    head["blocks"] = directory
    payload = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_BLOCK_MAGIC)
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        for name, arr in blocks.items():
            fh.write(np.ascontiguousarray(arr, dtype=np.float64).tobytes())


def read_blocks(path: str | Path, expect_kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        magic = fh.read(len(_BLOCK_MAGIC))
        if magic != _BLOCK_MAGIC:
            raise CodecError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if expect_kind is not None and header.get("kind") != expect_kind:
            raise CodecError(f"{path}: expected kind {expect_kind!r}, got {header.get('kind')!r}")
        blocks: dict[str, np.ndarray] = {}
        for entry in header["blocks"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise CodecError(f"{path}: truncated block {entry['name']!r}")
            blocks[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    return header, blocks


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
