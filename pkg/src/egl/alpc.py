"""Ranking-stage link prediction model.

A gated graph encoder (adaptive-breadth attention over neighbours plus an
LSTM-style adaptive-depth update, following the GeniePath design) embeds each
entity from its semantic and co-occurrence features.  A pair scorer predicts
relation probability, a per-source threshold head predicts the decision
cutoff, and a semantic-anchored InfoNCE term shapes the embedding space.
Total training objective: L_pred + alpha * L_th + beta * L_cl.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core import (
    EmbeddingTable,
    EntityGraph,
    ScoredEdge,
    read_blocks,
    seeded_rng,
    write_blocks,
)
from .datagen import DataSplit
from .numkern import (
    Adam,
    Tape,
    Tensor,
    backward,
    clip,
    concat,
    constant,
    gather_rows,
    log,
    logsumexp,
    matmul,
    mean,
    mul,
    narrow,
    param,
    reshape,
    sigmoid,
    softmax,
    sub,
    tanh,
    tensor_sum,
    transpose,
)

PROB_CLAMP = 1e-12
NEG_MASK = -1e30


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class AlpcHyper:
    alpha: float = 1.0
    beta: float = 1.0
    tau: float = 0.2
    anchor_sim_threshold: float = 0.8
    layers: int = 2
    hidden: int = 32
    neighbor_cap: int = 10
    batch_size: int = 4096
    contrastive_batch: int = 256
    lr: float = 0.05
    epochs: int = 30
    patience: int = 5
    val_frac: float = 0.1
    encoder: str = "geniepath"  # or "mean" (plain mean-aggregator ablation)
    init_scale: float = 0.3

    def __post_init__(self) -> None:
        if self.tau <= 0:
            raise ValueError("tau must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.encoder not in ("geniepath", "mean"):
            raise ValueError(f"unknown encoder {self.encoder!r}")


@dataclass(frozen=True)
class PairExample:
    src: int
    dst: int
    label: int

    def __post_init__(self) -> None:
        if self.src == self.dst:
            raise ValueError("pair endpoints must differ")
        if self.label not in (0, 1):
            raise ValueError("label must be 0 or 1")


def _pairs_arrays(pairs: Sequence[tuple[int, int, int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
    return arr[:, 0], arr[:, 1], arr[:, 2]


def build_neighborhoods(graph: EntityGraph, cap: int) -> tuple[np.ndarray, np.ndarray]:
    """Padded neighbour slots per node: slot 0 is the node itself, then up to
    ``cap`` neighbours by descending edge score (ties toward the lower id).
    Returns (indices (N, cap+1), additive mask with NEG_MASK on padding)."""
    n = graph.n_entities
    idx = np.zeros((n, cap + 1), dtype=np.int64)
    mask = np.full((n, cap + 1), NEG_MASK)
    idx[:, 0] = np.arange(n)
    mask[:, 0] = 0.0
    for u in range(n):
        ranked = sorted(graph.neighbors(u), key=lambda e: (-e.score, e.dst))[:cap]
        for k, e in enumerate(ranked, start=1):
            idx[u, k] = e.dst
            mask[u, k] = 0.0
    return idx, mask


class AlpcModel:
    """Parameters plus (after ``bind``) the graph context used to encode."""

    def __init__(self, in_dim: int, hyper: AlpcHyper, params: dict[str, Tensor]):
        self.in_dim = in_dim
        self.hyper = hyper
        self.params = params
        self._features: np.ndarray | None = None
        self._nb_idx: np.ndarray | None = None
        self._nb_mask: np.ndarray | None = None
        self._cache: np.ndarray | None = None

    @classmethod
    def init(cls, in_dim: int, hyper: AlpcHyper, seed: int = 0) -> "AlpcModel":
        rng = seeded_rng(seed)
        h = hyper.hidden
        s = hyper.init_scale

        def w(rows, cols):
            return param(s * rng.normal(size=(rows, cols)) / math.sqrt(rows))

        p: dict[str, Tensor] = {"embed.w": w(in_dim, h), "embed.b": param(np.zeros(h))}
        for t in range(hyper.layers):
            if hyper.encoder == "geniepath":
                p[f"layer{t}.att_src"] = w(h, h)
                p[f"layer{t}.att_dst"] = w(h, h)
                p[f"layer{t}.att_v"] = param(s * rng.normal(size=h) / math.sqrt(h))
                p[f"layer{t}.agg"] = w(h, h)
                p[f"layer{t}.agg_b"] = param(np.zeros(h))
                for gate in ("i", "f", "o", "c"):
                    p[f"layer{t}.gate_{gate}"] = w(h, h)
                    p[f"layer{t}.gate_{gate}_b"] = param(np.zeros(h))
            else:
                p[f"layer{t}.self"] = w(h, h)
                p[f"layer{t}.nb"] = w(h, h)
                p[f"layer{t}.b"] = param(np.zeros(h))
        # scorer g on [z_u || z_v]; output layer zero-init so s = 0, yhat = 0.5
        p["score.w1"] = w(2 * h, h)
        p["score.b1"] = param(np.zeros(h))
        p["score.w2"] = param(np.zeros(h))
        p["score.b2"] = param(np.array(0.0))
        # per-source threshold head; zero-init so epsilon = 0 at start
        p["th.w1"] = w(h, h)
        p["th.b1"] = param(np.zeros(h))
        p["th.w2"] = param(np.zeros(h))
        p["th.b2"] = param(np.array(0.0))
        return cls(in_dim, hyper, p)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def bind(self, graph: EntityGraph, e_se: EmbeddingTable, e_co: EmbeddingTable) -> "AlpcModel":
        """Attach the message-passing graph and node features."""
        feats = np.concatenate([e_se.vectors, e_co.vectors], axis=1)
        if feats.shape[1] != self.in_dim:
            raise ValueError(f"feature dim {feats.shape[1]} != model input dim {self.in_dim}")
        if graph.n_entities != feats.shape[0]:
            raise ValueError("graph and feature tables cover different entity counts")
        self._features = feats
        self._nb_idx, self._nb_mask = build_neighborhoods(graph, self.hyper.neighbor_cap)
        self._cache = None
        return self

    def _require_bound(self) -> None:
        if self._features is None:
            raise RuntimeError("model is not bound to a graph; call bind() first")

    def invalidate(self) -> None:
        self._cache = None

    def encodings(self) -> np.ndarray:
        """All-entity encodings as plain arrays (cached; no gradients)."""
        self._require_bound()
        if self._cache is None:
            self._cache = encode_all(self).data
        return self._cache


def encode_all(model: AlpcModel) -> Tensor:
    """Encode every entity of the bound graph; returns an (N, hidden) tensor.

    Run inside a Tape to make the result differentiable.
    """
    model._require_bound()
    idx, mask = model._nb_idx, model._nb_mask
    p = model.params
    hyper = model.hyper
    x = constant(model._features)
    h = tanh(matmul(x, p["embed.w"]) + p["embed.b"])
    mask_t = constant(mask)
    memory: Tensor | None = None
    slots = idx.shape[1]
    for t in range(hyper.layers):
        if hyper.encoder == "geniepath":
            pre = matmul(h, p[f"layer{t}.att_src"])
            post = matmul(h, p[f"layer{t}.att_dst"])
            logits = [
                matmul(tanh(pre + gather_rows(post, idx[:, k])), p[f"layer{t}.att_v"])
                for k in range(slots)
            ]
            att = softmax(_stack_cols(logits) + mask_t, axis=1)
            agg = None
            for k in range(slots):
                contrib = mul(_col(att, k), gather_rows(h, idx[:, k]))
                agg = contrib if agg is None else agg + contrib
            tmp = tanh(matmul(agg, p[f"layer{t}.agg"]) + p[f"layer{t}.agg_b"])
            gate_i = sigmoid(matmul(tmp, p[f"layer{t}.gate_i"]) + p[f"layer{t}.gate_i_b"])
            gate_f = sigmoid(matmul(tmp, p[f"layer{t}.gate_f"]) + p[f"layer{t}.gate_f_b"])
            gate_o = sigmoid(matmul(tmp, p[f"layer{t}.gate_o"]) + p[f"layer{t}.gate_o_b"])
            cand = tanh(matmul(tmp, p[f"layer{t}.gate_c"]) + p[f"layer{t}.gate_c_b"])
            memory = mul(gate_i, cand) if memory is None else mul(gate_f, memory) + mul(gate_i, cand)
            h = mul(gate_o, tanh(memory))
        else:
            # mean aggregator: uniform weights over valid slots
            weights = softmax(mask_t, axis=1)
            agg = None
            for k in range(slots):
                contrib = mul(_col(weights, k), gather_rows(h, idx[:, k]))
                agg = contrib if agg is None else agg + contrib
            h = tanh(matmul(h, p[f"layer{t}.self"]) + matmul(agg, p[f"layer{t}.nb"]) + p[f"layer{t}.b"])
    return h


def _stack_cols(cols: list[Tensor]) -> Tensor:
    return concat([reshape(c, (c.data.shape[0], 1)) for c in cols], axis=1)


def _col(m: Tensor, k: int) -> Tensor:
    return narrow(m, 1, k, 1)


def encode(model: AlpcModel, entity_id: int) -> np.ndarray:
    """Encoding of one entity (computed over the full bound graph)."""
    model._require_bound()
    if not (0 <= entity_id < model._features.shape[0]):
        raise ValueError(f"unknown entity {entity_id}")
    return model.encodings()[entity_id]


def score_pairs(model: AlpcModel, z: Tensor, src: np.ndarray, dst: np.ndarray) -> Tensor:
    """Raw relation scores s = g([z_u || z_v]) for each (src, dst) pair."""
    zu = gather_rows(z, src)
    zv = gather_rows(z, dst)
    h1 = tanh(matmul(concat([zu, zv], axis=1), model.params["score.w1"]) + model.params["score.b1"])
    return matmul(h1, model.params["score.w2"]) + model.params["score.b2"]


def thresholds(model: AlpcModel, z: Tensor, src: np.ndarray) -> Tensor:
    """Per-source decision thresholds epsilon = MLP(z_src)."""
    zu = gather_rows(z, src)
    h1 = tanh(matmul(zu, model.params["th.w1"]) + model.params["th.b1"])
    return matmul(h1, model.params["th.w2"]) + model.params["th.b2"]


def _bce(prob: Tensor, labels: np.ndarray) -> Tensor:
    y = constant(labels.astype(np.float64))
    p = clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    per = mul(y, log(p)) + mul(constant(1.0 - labels), log(sub(constant(1.0), p)))
    return mean(per) * -1.0


def loss_pred(model: AlpcModel, z: Tensor, pairs: Sequence[tuple[int, int, int]]) -> Tensor:
    """Mean binary cross-entropy of sigmoid(s) against pair labels."""
    src, dst, y = _pairs_arrays(pairs)
    if src.size == 0:
        raise ValueError("empty pair batch")
    return _bce(sigmoid(score_pairs(model, z, src, dst)), y)


def loss_threshold(model: AlpcModel, z: Tensor, pairs: Sequence[tuple[int, int, int]]) -> Tensor:
    """Margin task: BCE of sigmoid(s - epsilon_src) against the same labels."""
    src, dst, y = _pairs_arrays(pairs)
    if src.size == 0:
        raise ValueError("empty pair batch")
    s = score_pairs(model, z, src, dst)
    eps = thresholds(model, z, src)
    return _bce(sigmoid(sub(s, eps)), y)


def loss_contrastive(z: Tensor, anchor_batch: np.ndarray, tau: float) -> Tensor:
    """In-batch InfoNCE, minimized: -log softmax of the positive against all
    batch targets (positive included in the denominator), log-sum-exp form."""
    anchor_batch = np.asarray(anchor_batch, dtype=np.int64).reshape(-1, 2)
    b = anchor_batch.shape[0]
    if b < 2:
        raise ValueError("contrastive batch needs at least 2 anchor pairs")
    ze = gather_rows(z, anchor_batch[:, 0])
    zp = gather_rows(z, anchor_batch[:, 1])
    logits = matmul(ze, transpose(zp)) * (1.0 / tau)
    pos = tensor_sum(mul(ze, zp), axis=1) * (1.0 / tau)
    return mean(sub(logsumexp(logits, axis=1), pos))


def total_loss(
    model: AlpcModel,
    z: Tensor,
    pairs: Sequence[tuple[int, int, int]],
    anchor_batch: np.ndarray | None,
    alpha: float,
    beta: float,
    tau: float,
) -> Tensor:
    loss = loss_pred(model, z, pairs)
    if alpha != 0.0:
        loss = loss + loss_threshold(model, z, pairs) * alpha
    if beta != 0.0 and anchor_batch is not None and len(anchor_batch) >= 2:
        loss = loss + loss_contrastive(z, anchor_batch, tau) * beta
    return loss


def build_anchors(
    e_se: EmbeddingTable,
    anchor_sim_threshold: float,
    candidate_graph: EntityGraph | None = None,
) -> np.ndarray:
    """Anchor pairs (e, e+) whose semantic cosine clears the threshold.

    When a candidate graph is given, only pairs appearing in its correlated
    entity lists qualify; otherwise all entity pairs are scanned.  Pairs are
    deduplicated with e < e+.  The cosine comparison uses a 1e-12 slack so
    identical vectors pass a threshold of exactly 1.0.
    """
    unit = e_se.vectors / np.maximum(np.linalg.norm(e_se.vectors, axis=1, keepdims=True), 1e-30)
    floor = anchor_sim_threshold - 1e-12
    pairs: list[tuple[int, int]] = []
    if candidate_graph is not None:
        for e in candidate_graph.canonical_edges():
            if float(unit[e.src] @ unit[e.dst]) >= floor:
                pairs.append((e.src, e.dst))
    else:
        n = unit.shape[0]
        chunk = 512
        for lo in range(0, n, chunk):
            hi = min(n, lo + chunk)
            sims = unit[lo:hi] @ unit.T
            for r in range(hi - lo):
                u = lo + r
                for v in np.flatnonzero(sims[r] >= floor):
                    if v > u:
                        pairs.append((u, int(v)))
    return np.asarray(sorted(pairs), dtype=np.int64).reshape(-1, 2)


@dataclass
class TrainResult:
    model: AlpcModel
    history: list[dict]
    best_epoch: int


def train_alpc(
    split: DataSplit,
    candidate_graph: EntityGraph | None,
    e_se: EmbeddingTable,
    e_co: EmbeddingTable,
    hyper: AlpcHyper,
    seed: int = 0,
    bootstrap: bool = False,
) -> TrainResult:
    """Mini-batch Adam on the combined objective.

    Message passing sees only the observed graph (held-out test edges stay
    invisible).  The candidate graph, when given, restricts contrastive
    anchors to retrieved pairs.  A val split (``val_frac`` of the training
    pairs) drives early stopping; best-epoch parameters are restored.
    ``bootstrap`` resamples the training pairs with replacement, which is how
    snapshot variants are produced for the ensemble stage.
    """
    rng = seeded_rng(seed)
    model = AlpcModel.init(e_se.dim + e_co.dim, hyper, seed=seed)
    model.bind(split.observed_graph, e_se, e_co)

    pairs = np.asarray(split.train_pos + split.train_neg, dtype=np.int64)
    if pairs.size == 0:
        raise ValueError("split has no training pairs")
    pairs = pairs[rng.permutation(pairs.shape[0])]
    if bootstrap:
        pairs = pairs[rng.integers(0, pairs.shape[0], size=pairs.shape[0])]
    n_val = int(hyper.val_frac * pairs.shape[0])
    val_pairs, train_pairs = pairs[:n_val], pairs[n_val:]

    anchors = np.zeros((0, 2), dtype=np.int64)
    if hyper.beta > 0.0:
        anchors = build_anchors(e_se, hyper.anchor_sim_threshold, candidate_graph)

    optimizer = Adam(model.parameters(), hyper.lr)
    history: list[dict] = []
    best_val = math.inf
    best_epoch = -1
    best_params: dict[str, np.ndarray] | None = None
    patience_left = hyper.patience

    for epoch in range(hyper.epochs):
        order = rng.permutation(train_pairs.shape[0])
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, order.size, hyper.batch_size):
            batch = train_pairs[order[start : start + hyper.batch_size]].copy()
            # split pairs are stored src < dst; flip half so the directed
            # scorer g([z_src || z_dst]) learns both orientations
            flip = rng.random(batch.shape[0]) < 0.5
            batch[flip, 0], batch[flip, 1] = batch[flip, 1], batch[flip, 0].copy()
            anchor_batch = None
            if anchors.shape[0] >= 2:
                take = min(hyper.contrastive_batch, anchors.shape[0])
                anchor_batch = anchors[rng.choice(anchors.shape[0], size=take, replace=False)]
            with Tape() as tape:
                z = encode_all(model)
                loss = total_loss(model, z, batch, anchor_batch, hyper.alpha, hyper.beta, hyper.tau)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: {loss.data}"
                )
            optimizer.step(backward(tape, loss))
            epoch_loss += loss.item()
            n_batches += 1
        model.invalidate()

        val_loss = float("nan")
        if val_pairs.shape[0] > 0:
            z_eval = encode_all(model)
            vl = loss_pred(model, z_eval, val_pairs)
            if hyper.alpha != 0.0:
                vl = vl + loss_threshold(model, z_eval, val_pairs) * hyper.alpha
            val_loss = vl.item()
        history.append(
            {"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1), "val_loss": val_loss}
        )

        if val_pairs.shape[0] > 0:
            if val_loss < best_val - 1e-6:
                best_val = val_loss
                best_epoch = epoch
                best_params = {k: v.data.copy() for k, v in model.params.items()}
                patience_left = hyper.patience
            else:
                patience_left -= 1
                if patience_left <= 0:
                    break

    if best_params is not None:
        for k, v in best_params.items():
            model.params[k].data = v
        model.invalidate()
    return TrainResult(model=model, history=history, best_epoch=best_epoch)


def _forward_scores(model: AlpcModel, src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    z = constant(model.encodings())
    s = score_pairs(model, z, src, dst).data
    eps = thresholds(model, z, src).data
    return s, eps


def auc_score(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic AUC; tied scores contribute one half."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative examples")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate(
    model: AlpcModel,
    test_pos: Sequence[tuple[int, int, int]],
    test_neg: Sequence[tuple[int, int, int]],
) -> dict[str, float]:
    """AUC plus accuracy under the adaptive rule (s >= eps_src) and under the
    fixed rule (sigmoid(s) >= 0.5)."""
    if not test_pos or not test_neg:
        raise ValueError("need non-empty positive and negative test sets")
    src, dst, y = _pairs_arrays(list(test_pos) + list(test_neg))
    s, eps = _forward_scores(model, src, dst)
    yhat = 1.0 / (1.0 + np.exp(-np.clip(s, -500, 500)))
    return {
        "auc": auc_score(yhat, y),
        "acc": float(np.mean((s >= eps) == (y == 1))),
        "acc_fixed": float(np.mean((yhat >= 0.5) == (y == 1))),
    }


def filter_edges(model: AlpcModel, candidate_graph: EntityGraph) -> EntityGraph:
    """Keep candidate edges that pass the adaptive threshold from either
    endpoint; kept score is max over both directions of sigmoid(s - eps)."""
    edges = candidate_graph.canonical_edges()
    if not edges:
        return EntityGraph.from_edges(candidate_graph.n_entities, [])
    u = np.array([e.src for e in edges], dtype=np.int64)
    v = np.array([e.dst for e in edges], dtype=np.int64)
    s_uv, eps_u = _forward_scores(model, u, v)
    s_vu, eps_v = _forward_scores(model, v, u)
    keep = (s_uv >= eps_u) | (s_vu >= eps_v)
    margin = np.maximum(s_uv - eps_u, s_vu - eps_v)
    prob = 1.0 / (1.0 + np.exp(-np.clip(margin, -500, 500)))
    kept = [
        ScoredEdge(int(a), int(b), float(p), "ranked")
        for a, b, k, p in zip(u, v, keep, prob)
        if k
    ]
    return EntityGraph.from_edges(candidate_graph.n_entities, kept)


def save_model(model: AlpcModel, path) -> None:
    header = {"in_dim": model.in_dim, "hyper": dataclasses.asdict(model.hyper)}
    write_blocks(path, "alpc", header, {k: model.params[k].data for k in sorted(model.params)})


def load_model(path) -> AlpcModel:
    """Load parameters; the caller must ``bind`` a graph before encoding."""
    header, blocks = read_blocks(path, expect_kind="alpc")
    hyper = AlpcHyper(**header["hyper"])
    params = {k: param(v) for k, v in blocks.items()}
    return AlpcModel(int(header["in_dim"]), hyper, params)
