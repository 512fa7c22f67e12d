"""Multi-head scaled dot-product self-attention over one token sequence."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Tensor, concat, matmul, narrow, param, softmax, transpose


def init_mha_params(rng: np.random.Generator, dim: int, scale: float | None = None) -> dict[str, Tensor]:
    """Projection matrices wq/wk/wv/wo, each dim x dim."""
    scale = scale if scale is not None else 1.0 / math.sqrt(dim)
    return {
        name: param(scale * rng.normal(size=(dim, dim)))
        for name in ("wq", "wk", "wv", "wo")
    }


def multi_head_attention(tokens: Tensor, params: dict[str, Tensor], n_heads: int) -> Tensor:
    """Self-attention on a T x d sequence: per-head softmax(QK^T/sqrt(dk))V,
    heads concatenated, then the output projection.  No positional encoding,
    so the op is equivariant under token permutation.
    """
    t_count, dim = tokens.data.shape
    if dim % n_heads != 0:
        raise ValueError(f"model dim {dim} not divisible by n_heads {n_heads}")
    dk = dim // n_heads
    q = matmul(tokens, params["wq"])
    k = matmul(tokens, params["wk"])
    v = matmul(tokens, params["wv"])
    heads = []
    for h in range(n_heads):
        qh = narrow(q, 1, h * dk, dk)
        kh = narrow(k, 1, h * dk, dk)
        vh = narrow(v, 1, h * dk, dk)
        scores = matmul(qh, transpose(kh)) * (1.0 / math.sqrt(dk))
        weights = softmax(scores, axis=-1)
        heads.append(matmul(weights, vh))
    merged = concat(heads, axis=1)
    return matmul(merged, params["wo"])
