"""Snapshot ensemble: fuse entity embeddings from several trained ranking
models to stabilize pair predictions.

Each pair (u, v) becomes a short token sequence (u's per-snapshot encodings,
then v's, each carrying a binary endpoint tag), run through a multi-head
self-attention encoder, mean-pooled and scored by an MLP head.  The fused
per-entity embedding exported downstream is the L2-normalized concatenation
of the snapshot encodings.
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
)
from .alpc import AlpcModel, PROB_CLAMP, TrainingDiverged, auc_score


@dataclass
class SnapshotStack:
    """Per-entity encodings from S chronologically ordered model snapshots."""

    snapshots: list[np.ndarray]  # S arrays, each (N, h)

    def __post_init__(self) -> None:
        if len(self.snapshots) < 2:
            raise ValueError("need at least 2 snapshots")
        shapes = {a.shape for a in self.snapshots}
        if len(shapes) != 1:
            raise ValueError(f"snapshots disagree on shape: {shapes}")

    @property
    def s(self) -> int:
        return len(self.snapshots)

    @property
    def n_entities(self) -> int:
        return self.snapshots[0].shape[0]

    @property
    def hidden(self) -> int:
        return self.snapshots[0].shape[1]

    def perturbed(self, sigma: float, rng: np.random.Generator) -> "SnapshotStack":
        return SnapshotStack([z + sigma * rng.normal(size=z.shape) for z in self.snapshots])


def stack_snapshots(
    models: Sequence[AlpcModel],
    graph: EntityGraph,
    e_se: EmbeddingTable,
    e_co: EmbeddingTable,
) -> SnapshotStack:
    """Encode all entities with each snapshot model over the same graph."""
    if len(models) < 2:
        raise ValueError("need at least 2 snapshot models")
    snaps = []
    for model in models:
        model.bind(graph, e_se, e_co)
        snaps.append(model.encodings().copy())
    return SnapshotStack(snaps)


@dataclass
class EnsembleHyper:
    n_heads: int = 4
    model_dim: int = 32
    lr: float = 0.02
    epochs: int = 60
    batch_size: int = 4096
    patience: int = 15
    val_frac: float = 0.1
    init_scale: float = 0.5
    # snapshot embeddings drift between retrains; training under matching
    # input noise is what makes the fused predictor damp that drift
    train_noise: float = 0.1

    def __post_init__(self) -> None:
        if self.model_dim % self.n_heads != 0:
            raise ValueError("model_dim must be divisible by n_heads")


class EnsembleModel:
    def __init__(self, hidden: int, n_snapshots: int, hyper: EnsembleHyper, params: dict[str, Tensor]):
        self.hidden = hidden
        self.n_snapshots = n_snapshots
        self.hyper = hyper
        self.params = params

    @classmethod
    def init(cls, hidden: int, n_snapshots: int, hyper: EnsembleHyper, seed: int = 0) -> "EnsembleModel":
        rng = seeded_rng(seed)
        dm = hyper.model_dim
        token_dim = hidden + 2  # snapshot vector plus one-hot endpoint tag
        s = hyper.init_scale

        def w(rows, cols):
            return param(s * rng.normal(size=(rows, cols)) / math.sqrt(rows))

        p = {
            "proj.w": w(token_dim, dm),
            "proj.b": param(np.zeros(dm)),
            "att.wq": w(dm, dm),
            "att.wk": w(dm, dm),
            "att.wv": w(dm, dm),
            "att.wo": w(dm, dm),
            "mlp.w1": w(dm, dm),
            "mlp.b1": param(np.zeros(dm)),
            # zero-init head: prediction starts at exactly 0.5
            "mlp.w2": param(np.zeros(dm)),
            "mlp.b2": param(np.array(0.0)),
        }
        return cls(hidden, n_snapshots, hyper, p)

    def parameters(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]


def _pair_logits(model: EnsembleModel, stack: SnapshotStack, src: np.ndarray, dst: np.ndarray) -> Tensor:
    """Batched forward: attention over the 2S pair tokens, one logit per pair.

    Token count is tiny (2S), so attention is computed per token-position pair
    with every op vectorized over the batch dimension.
    """
    p = model.params
    s_count = stack.s
    dm = model.hyper.model_dim
    n_heads = model.hyper.n_heads
    dk = dm // n_heads
    b = src.shape[0]

    tag_u = constant(np.tile(np.array([[1.0, 0.0]]), (b, 1)))
    tag_v = constant(np.tile(np.array([[0.0, 1.0]]), (b, 1)))
    tokens: list[Tensor] = []
    for s_i in range(s_count):
        z = constant(stack.snapshots[s_i])
        tokens.append(concat([gather_rows(z, src), tag_u], axis=1))
    for s_i in range(s_count):
        z = constant(stack.snapshots[s_i])
        tokens.append(concat([gather_rows(z, dst), tag_v], axis=1))
    x = [matmul(t, p["proj.w"]) + p["proj.b"] for t in tokens]  # T tensors of (B, dm)

    t_count = len(x)
    q = [matmul(xi, p["att.wq"]) for xi in x]
    k = [matmul(xi, p["att.wk"]) for xi in x]
    v = [matmul(xi, p["att.wv"]) for xi in x]

    attended: list[Tensor] = []
    for i in range(t_count):
        head_outs: list[Tensor] = []
        for h in range(n_heads):
            qi = narrow(q[i], 1, h * dk, dk)
            logits = []
            for j in range(t_count):
                kj = narrow(k[j], 1, h * dk, dk)
                logits.append(tensor_sum(mul(qi, kj), axis=1) * (1.0 / math.sqrt(dk)))
            weights = softmax(
                concat([reshape(l, (b, 1)) for l in logits], axis=1), axis=1
            )  # (B, T)
            out = None
            for j in range(t_count):
                vj = narrow(v[j], 1, h * dk, dk)
                contrib = mul(narrow(weights, 1, j, 1), vj)
                out = contrib if out is None else out + contrib
            head_outs.append(out)
        # residual keeps each token's own projection in the pooled vector
        attended.append(x[i] + matmul(concat(head_outs, axis=1), p["att.wo"]))

    pooled = attended[0]
    for t in attended[1:]:
        pooled = pooled + t
    pooled = pooled * (1.0 / t_count)
    h1 = tanh(matmul(pooled, p["mlp.w1"]) + p["mlp.b1"])
    return matmul(h1, p["mlp.w2"]) + p["mlp.b2"]


def ensemble_forward(model: EnsembleModel, stack: SnapshotStack, u: int, v: int) -> float:
    """Fused pair prediction in (0, 1) for a single entity pair."""
    logit = _pair_logits(model, stack, np.array([u]), np.array([v]))
    return float(1.0 / (1.0 + math.exp(-float(logit.data[0]))))


def predict_pairs(model: EnsembleModel, stack: SnapshotStack, pairs: Sequence[tuple[int, int, int]]) -> np.ndarray:
    arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 3)
    logits = _pair_logits(model, stack, arr[:, 0], arr[:, 1]).data
    return 1.0 / (1.0 + np.exp(-np.clip(logits, -500, 500)))


@dataclass
class EnsembleResult:
    model: EnsembleModel
    history: list[dict]
    embeddings: EmbeddingTable  # exported fused per-entity embedding


def export_embeddings(stack: SnapshotStack) -> EmbeddingTable:
    """Fused entity embedding: concatenation of the S snapshot encodings,
    L2-normalized; dimension S * h.  Independent of the trained head."""
    fused = np.concatenate(stack.snapshots, axis=1)
    norms = np.linalg.norm(fused, axis=1, keepdims=True)
    norms[norms == 0.0] = 1.0
    return EmbeddingTable(fused / norms)


def train_ensemble(
    stack: SnapshotStack,
    split: DataSplit,
    hyper: EnsembleHyper,
    seed: int = 0,
) -> EnsembleResult:
    """Binary cross-entropy training of the fusion head; snapshots stay frozen."""
    rng = seeded_rng(seed)
    model = EnsembleModel.init(stack.hidden, stack.s, hyper, seed=seed)
    pairs = np.asarray(split.train_pos + split.train_neg, dtype=np.int64)
    if pairs.size == 0:
        raise ValueError("split has no training pairs")
    pairs = pairs[rng.permutation(pairs.shape[0])]
    n_val = int(hyper.val_frac * pairs.shape[0])
    val_pairs, train_pairs = pairs[:n_val], pairs[n_val:]

    optimizer = Adam(model.parameters(), hyper.lr)
    history: list[dict] = []
    best_val = math.inf
    best_params: dict[str, np.ndarray] | None = None
    patience_left = hyper.patience

    def bce_loss(batch: np.ndarray, source: SnapshotStack) -> Tensor:
        logits = _pair_logits(model, source, batch[:, 0], batch[:, 1])
        prob = clip(sigmoid(logits), PROB_CLAMP, 1.0 - PROB_CLAMP)
        y = batch[:, 2].astype(np.float64)
        per = mul(constant(y), log(prob)) + mul(constant(1.0 - y), log(sub(constant(1.0), prob)))
        return mean(per) * -1.0

    for epoch in range(hyper.epochs):
        order = rng.permutation(train_pairs.shape[0])
        train_stack = stack if hyper.train_noise == 0.0 else stack.perturbed(hyper.train_noise, rng)
        epoch_loss, n_batches = 0.0, 0
        for start in range(0, order.size, hyper.batch_size):
            batch = train_pairs[order[start : start + hyper.batch_size]]
            with Tape() as tape:
                loss = bce_loss(batch, train_stack)
            if not np.isfinite(loss.data):
                raise TrainingDiverged(f"non-finite ensemble loss at epoch {epoch}")
            optimizer.step(backward(tape, loss))
            epoch_loss += loss.item()
            n_batches += 1
        val_loss = bce_loss(val_pairs, stack).item() if val_pairs.shape[0] > 0 else float("nan")
        history.append({"epoch": epoch, "train_loss": epoch_loss / max(n_batches, 1), "val_loss": val_loss})
        if val_pairs.shape[0] > 0:
            if val_loss < best_val - 1e-6:
                best_val = val_loss
                best_params = {k: v.data.copy() for k, v in model.params.items()}
                patience_left = hyper.patience
            else:
                patience_left -= 1
                if patience_left <= 0:
                    break

    if best_params is not None:
        for k, v in best_params.items():
            model.params[k].data = v
    return EnsembleResult(model=model, history=history, embeddings=export_embeddings(stack))


def evaluate_ensemble(
    model: EnsembleModel,
    stack: SnapshotStack,
    test_pos: Sequence[tuple[int, int, int]],
    test_neg: Sequence[tuple[int, int, int]],
) -> dict[str, float]:
    if not test_pos or not test_neg:
        raise ValueError("need non-empty positive and negative test sets")
    pairs = list(test_pos) + list(test_neg)
    y = np.asarray(pairs, dtype=np.int64)[:, 2]
    prob = predict_pairs(model, stack, pairs)
    return {
        "auc": auc_score(prob, y),
        "acc": float(np.mean((prob >= 0.5) == (y == 1))),
    }


def save_ensemble(model: EnsembleModel, path) -> None:
    header = {
        "hidden": model.hidden,
        "n_snapshots": model.n_snapshots,
        "hyper": dataclasses.asdict(model.hyper),
    }
    write_blocks(path, "ensemble", header, {k: model.params[k].data for k in sorted(model.params)})


def load_ensemble(path) -> EnsembleModel:
    header, blocks = read_blocks(path, expect_kind="ensemble")
    hyper = EnsembleHyper(**header["hyper"])
    params = {k: param(v) for k, v in blocks.items()}
    return EnsembleModel(int(header["hidden"]), int(header["n_snapshots"]), hyper, params)
