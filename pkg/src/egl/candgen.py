"""Candidate relation generation: co-occurrence and semantic embedding spaces.

Co-occurrence vectors come from a skip-gram-with-negative-sampling trainer
over user entity sequences; semantic vectors come from a pluggable provider
(embedding file or hashed character n-grams).  Nearest neighbours in either
space, filtered by a cosine floor, form the initial candidate graph.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    EmbeddingTable,
    EntityGraph,
    EntityLexicon,
    ScoredEdge,
    UserEntitySequence,
    read_embeddings,
    seeded_rng,
)


@dataclass
class SgnsConfig:
    dim: int = 64
    window: int = 5
    k_neg: int = 5
    epochs: int = 5
    lr: float = 1.0  # per-row step: chunk gradients are averaged per touched row
    unigram_power: float = 0.75
    chunk: int = 8192

    def __post_init__(self) -> None:
        if self.dim < 1 or self.window < 1 or self.k_neg < 1:
            raise ValueError("dim, window and k_neg must all be >= 1")


@dataclass
class SemanticProvider:
    """Semantic vector source: ``file`` (embedding file) or ``char_ngram_hash``."""

    mode: str = "char_ngram_hash"
    path: str | None = None
    ngram_n: int = 3
    buckets: int = 256

    def __post_init__(self) -> None:
        if self.mode not in ("file", "char_ngram_hash"):
            raise ValueError(f"unknown semantic provider mode {self.mode!r}")
        if self.mode == "file" and not self.path:
            raise ValueError("file mode needs a path")


def sgns_pair_loss(w_vec: np.ndarray, c_vec: np.ndarray, neg_vecs: np.ndarray) -> float:
    """Negated skip-gram objective for one (center, context, negatives) triple:

        -log sigma(w.c) - sum_j log sigma(-w.c_j)

    Always >= 0 and strictly decreasing in w.c.
    """
    w_vec, c_vec, neg_vecs = np.asarray(w_vec), np.asarray(c_vec), np.atleast_2d(neg_vecs)
    if w_vec.shape != c_vec.shape or neg_vecs.shape[1] != w_vec.shape[0]:
        raise ValueError("dimension mismatch between center, context and negatives")
    pos = float(w_vec @ c_vec)
    negs = neg_vecs @ w_vec
    return float(_softplus(-pos) + np.sum(_softplus(negs)))


def sgns_pair_grads(
    w_vec: np.ndarray, c_vec: np.ndarray, neg_vecs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Analytic gradients of ``sgns_pair_loss`` wrt (w, c, negatives)."""
    neg_vecs = np.atleast_2d(neg_vecs)
    p = _sigmoid(float(w_vec @ c_vec))
    q = _sigmoid(neg_vecs @ w_vec)  # sigma(w.c_j)
    grad_w = -(1.0 - p) * c_vec + q @ neg_vecs
    grad_c = -(1.0 - p) * w_vec
    grad_negs = q[:, None] * w_vec[None, :]
    return grad_w, grad_c, grad_negs


def _sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def _softplus(x):
    # log(1 + e^x) without overflow; equals -log sigma(-x)
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x > 0
    out[pos] = x[pos] + np.log1p(np.exp(-x[pos]))
    out[~pos] = np.log1p(np.exp(x[~pos]))
    return out


def _build_pairs(sequences: Sequence[UserEntitySequence], window: int) -> tuple[np.ndarray, np.ndarray]:
    centers: list[int] = []
    contexts: list[int] = []
    for seq in sequences:
        ids = seq.entity_ids
        n = len(ids)
        for i, w in enumerate(ids):
            lo = max(0, i - window)
            hi = min(n, i + window + 1)
            for j in range(lo, hi):
                if j != i:
                    centers.append(w)
                    contexts.append(ids[j])
    return np.asarray(centers, dtype=np.int64), np.asarray(contexts, dtype=np.int64)


def train_sgns(
    sequences: Sequence[UserEntitySequence],
    lexicon: EntityLexicon,
    config: SgnsConfig,
    seed: int = 0,
    n_workers: int = 1,
) -> EmbeddingTable:
    """SGD on summed pair losses over all in-window (center, context) pairs.

    Negatives are drawn from the unigram distribution raised to
    ``unigram_power``.  Entities that never occur keep their initialization.
    Deterministic for ``n_workers=1``; more workers update the shared tables
    lock-free and trade determinism for speed.
    """
    if not sequences:
        raise ValueError("no sequences to train on")
    n = len(lexicon)
    rng = seeded_rng(seed)
    center_vecs = rng.uniform(-0.5 / config.dim, 0.5 / config.dim, size=(n, config.dim))
    context_vecs = np.zeros((n, config.dim))

    centers, contexts = _build_pairs(sequences, config.window)
    if centers.size == 0:
        return EmbeddingTable(center_vecs)

    counts = np.bincount(contexts, minlength=n).astype(np.float64)
    weights = counts**config.unigram_power
    cdf = np.cumsum(weights / weights.sum())

    total_steps = config.epochs * centers.size

    def run_pairs(order: np.ndarray, local_rng: np.random.Generator, step_base: int) -> None:
        done = 0
        for start in range(0, order.size, config.chunk):
            sel = order[start : start + config.chunk]
            lr = config.lr * max(1e-4, 1.0 - (step_base + done) / total_steps)
            done += sel.size
            c_idx = centers[sel]
            x_idx = contexts[sel]
            negs = np.searchsorted(cdf, local_rng.random((sel.size, config.k_neg)))
            w = center_vecs[c_idx]
            ctx = context_vecs[x_idx]
            nv = context_vecs[negs]

            p = _sigmoid(np.einsum("bd,bd->b", w, ctx))
            q = _sigmoid(np.einsum("bd,bkd->bk", w, nv))

            grad_w = -(1.0 - p)[:, None] * ctx + np.einsum("bk,bkd->bd", q, nv)
            grad_ctx = -(1.0 - p)[:, None] * w
            grad_neg = q[:, :, None] * w[:, None, :]

            # average accumulated gradients per row so the step size stays
            # bounded no matter how often an entity repeats inside one chunk
            g_center = np.zeros_like(center_vecs)
            n_center = np.zeros(n)
            np.add.at(g_center, c_idx, grad_w)
            np.add.at(n_center, c_idx, 1.0)
            g_context = np.zeros_like(context_vecs)
            n_context = np.zeros(n)
            np.add.at(g_context, x_idx, grad_ctx)
            np.add.at(n_context, x_idx, 1.0)
            np.add.at(g_context, negs.reshape(-1), grad_neg.reshape(-1, config.dim))
            np.add.at(n_context, negs.reshape(-1), 1.0)
            center_vecs[...] -= lr * g_center / np.maximum(n_center, 1.0)[:, None]
            context_vecs[...] -= lr * g_context / np.maximum(n_context, 1.0)[:, None]

    for epoch in range(config.epochs):
        order = rng.permutation(centers.size)
        if n_workers <= 1:
            run_pairs(order, rng, epoch * centers.size)
        else:
            slices = np.array_split(order, n_workers)
            child_rngs = rng.spawn(n_workers)
            with ThreadPoolExecutor(max_workers=n_workers) as pool:
                futs = [
                    pool.submit(run_pairs, sl, r, epoch * centers.size)
                    for sl, r in zip(slices, child_rngs)
                ]
                for f in futs:
                    f.result()

    return EmbeddingTable(center_vecs)


def semantic_embed(lexicon: EntityLexicon, provider: SemanticProvider) -> EmbeddingTable:
    """One L2-normalized semantic vector per lexicon entity."""
    if provider.mode == "file":
        table = read_embeddings(provider.path)
        if table.n < len(lexicon):
            missing = [lexicon.entity(i).name for i in range(table.n, len(lexicon))]
            raise ValueError(f"semantic file missing entities: {missing[:10]}")
        if table.n > len(lexicon):
            raise ValueError(f"semantic file covers {table.n} entities, lexicon has {len(lexicon)}")
        return EmbeddingTable(_l2_normalize(table.vectors))

    mat = np.zeros((len(lexicon), provider.buckets))
    for ent in lexicon:
        padded = f"^{ent.name}$"
        for i in range(max(1, len(padded) - provider.ngram_n + 1)):
            gram = padded[i : i + provider.ngram_n]
            bucket = zlib.crc32(gram.encode("utf-8")) % provider.buckets
            mat[ent.id, bucket] += 1.0
    return EmbeddingTable(_l2_normalize(mat))


def _l2_normalize(mat: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(mat, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return mat / norms


def _top_neighbors(vectors: np.ndarray, top_k: int, min_sim: float, chunk: int = 512):
    """Yield (src, dst, cosine) picks: per row, the top_k most-similar others
    with cosine >= min_sim; exact ties resolved toward the lower entity id."""
    unit = _l2_normalize(vectors)
    n = unit.shape[0]
    for lo in range(0, n, chunk):
        hi = min(n, lo + chunk)
        sims = unit[lo:hi] @ unit.T
        for r in range(hi - lo):
            row = sims[r].copy()
            row[lo + r] = -np.inf
            order = np.argsort(-row, kind="stable")[:top_k]
            for j in order:
                s = row[j]
                if s < min_sim:
                    break
                yield lo + r, int(j), float(min(s, 1.0))


def generate_candidates(
    e_co: EmbeddingTable,
    e_se: EmbeddingTable,
    top_k: int = 50,
    min_sim: float = 0.5,
    mode: str = "union",
) -> EntityGraph:
    """Initial candidate graph from both embedding spaces.

    Each entity retrieves its ``top_k`` nearest neighbours by cosine in each
    space; pairs below ``min_sim`` are dropped, retrieved pairs from the two
    spaces are combined (``union`` or ``intersect``) and symmetrized.  Edge
    score is the cosine (the larger one when both spaces propose a pair).
    """
    if e_co.n != e_se.n:
        raise ValueError(f"tables cover different lexicons: {e_co.n} vs {e_se.n}")
    if mode not in ("union", "intersect"):
        raise ValueError(f"bad combine mode {mode!r}")

    per_space: list[dict[tuple[int, int], float]] = []
    for table in (e_co, e_se):
        pairs: dict[tuple[int, int], float] = {}
        for u, v, s in _top_neighbors(table.vectors, top_k, min_sim):
            key = (min(u, v), max(u, v))
            if key not in pairs or s > pairs[key]:
                pairs[key] = s
        per_space.append(pairs)

    co_pairs, se_pairs = per_space
    edges: list[ScoredEdge] = []
    if mode == "intersect":
        keys = set(co_pairs) & set(se_pairs)
    else:
        keys = set(co_pairs) | set(se_pairs)
    for u, v in keys:
        s_co = co_pairs.get((u, v), -np.inf)
        s_se = se_pairs.get((u, v), -np.inf)
        if s_se > s_co:
            edges.append(ScoredEdge(u, v, max(0.0, s_se), "semantic"))
        else:
            edges.append(ScoredEdge(u, v, max(0.0, s_co), "cooccurrence"))
    return EntityGraph.from_edges(e_co.n, edges, on_conflict="max")
