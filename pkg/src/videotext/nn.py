"""Transformer building blocks: attention, encoder/decoder blocks, masks,
and the attentional pooler.

All layers are functional: parameters live in a ParameterStore under a name
prefix, and each ``init_*`` helper registers what the matching forward
function reads back.
"""

from __future__ import annotations

from typing import Optional

import numpy as np

from . import tensor as T
from .params import ParameterStore
from .tensor import ShapeError, Tensor

INIT_STD = 0.02
MASK_FILL = -1e9


def init_linear(store, prefix, d_in, d_out, tag, rng, zero=False):
    weight = (
        np.zeros((d_in, d_out))
        if zero
        else rng.normal(0.0, INIT_STD, size=(d_in, d_out))
    )
    store.add(f"{prefix}.weight", weight, tag)
    store.add(f"{prefix}.bias", np.zeros(d_out), tag)


def linear(store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    weight = store[f"{prefix}.weight"]
    if x.shape[-1] != weight.shape[0]:
        raise ShapeError(
            f"{prefix}: input width {x.shape[-1]} != weight width {weight.shape[0]}"
        )
    return T.matmul(x, weight) + store[f"{prefix}.bias"]


def init_layer_norm(store, prefix, d, tag):
    store.add(f"{prefix}.scale", np.ones(d), tag)
    store.add(f"{prefix}.shift", np.zeros(d), tag)


def apply_layer_norm(store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    return T.layer_norm(x, store[f"{prefix}.scale"], store[f"{prefix}.shift"])


def init_attention(store, prefix, d, n_heads, tag, rng):
    if d % n_heads != 0:
        raise ValueError(f"model width {d} not divisible by {n_heads} heads")
    for proj in ("q", "k", "v", "o"):
        init_linear(store, f"{prefix}.{proj}", d, d, tag, rng)


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, s, d = x.shape
    return T.transpose(T.reshape(x, (b, s, n_heads, d // n_heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return T.reshape(T.transpose(x, (0, 2, 1, 3)), (b, s, h * dh))


def _mask_bias(mask: np.ndarray, b: int, q: int, k: int) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == (q, k):
        mask = mask[None]
    if mask.shape not in ((1, q, k), (b, q, k)):
        raise ShapeError(f"mask shape {mask.shape} incompatible with ({b}, {q}, {k})")
    if not mask.any(axis=-1).all():
        raise ValueError("attention mask has a fully-masked query row")
    return np.where(mask, 0.0, MASK_FILL)[:, None, :, :]


def multi_head_attention(
    store: ParameterStore,
    prefix: str,
    queries: Tensor,
    keys_values: Tensor,
    n_heads: int,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Scaled dot-product attention; queries (B, q, d), keys_values (B, k, d)."""
    if queries.ndim != 3 or keys_values.ndim != 3:
        raise ShapeError(
            f"attention expects rank-3 inputs, got {queries.shape} and {keys_values.shape}"
        )
    if queries.shape[-1] != keys_values.shape[-1]:
        raise ShapeError(
            f"attention width mismatch: {queries.shape[-1]} vs {keys_values.shape[-1]}"
        )
    b, nq, d = queries.shape
    nk = keys_values.shape[1]
    dh = d // n_heads

    q = _split_heads(linear(store, f"{prefix}.q", queries), n_heads)
    k = _split_heads(linear(store, f"{prefix}.k", keys_values), n_heads)
    v = _split_heads(linear(store, f"{prefix}.v", keys_values), n_heads)

    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    if mask is not None:
        scores = scores + Tensor(_mask_bias(mask, b, nq, nk))
    weights = T.softmax(scores, axis=-1)
    pooled = _merge_heads(T.matmul(weights, v))
    return linear(store, f"{prefix}.o", pooled)


def init_pooler(store, prefix, n_query, d, n_heads, tag, rng):
    """Learned-query cross-attention pooler followed by layer normalization."""
    if n_query < 1:
        raise ValueError(f"pooler needs n_query >= 1, got {n_query}")
    store.add(f"{prefix}.queries", rng.normal(0.0, INIT_STD, size=(n_query, d)), tag)
    init_attention(store, f"{prefix}.attn", d, n_heads, tag, rng)
    init_layer_norm(store, f"{prefix}.norm", d, tag)


def attentional_pool(
    store: ParameterStore, prefix: str, tokens: Tensor, n_heads: int
) -> Tensor:
    """Summarize (B, S, d) tokens into a fixed (B, n_query, d) output.

    The key/value side carries no positional information, so the output is
    invariant under permutation or duplication of the token set.
    """
    if tokens.ndim != 3:
        raise ShapeError(f"pooler expects (B, S, d) tokens, got {tokens.shape}")
    if tokens.shape[1] < 1:
        raise ShapeError("pooler needs at least one input token")
    b = tokens.shape[0]
    queries = store[f"{prefix}.queries"]
    batched = T.broadcast_to(queries, (b,) + queries.shape)
    pooled = multi_head_attention(store, f"{prefix}.attn", batched, tokens, n_heads)
    return apply_layer_norm(store, f"{prefix}.norm", pooled)


def init_mlp(store, prefix, d, tag, rng, hidden_mult=4):
    init_linear(store, f"{prefix}.up", d, hidden_mult * d, tag, rng)
    init_linear(store, f"{prefix}.down", hidden_mult * d, d, tag, rng)


def mlp(store: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    return linear(store, f"{prefix}.down", T.gelu(linear(store, f"{prefix}.up", x)))


def init_transformer_block(store, prefix, d, n_heads, tag, rng):
    init_layer_norm(store, f"{prefix}.norm1", d, tag)
    init_attention(store, f"{prefix}.attn", d, n_heads, tag, rng)
    init_layer_norm(store, f"{prefix}.norm2", d, tag)
    init_mlp(store, f"{prefix}.mlp", d, tag, rng)


def transformer_block(
    store: ParameterStore,
    prefix: str,
    x: Tensor,
    n_heads: int,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Pre-layer-norm residual block: x + MHA(LN(x)), then + MLP(LN(.))."""
    normed = apply_layer_norm(store, f"{prefix}.norm1", x)
    h = x + multi_head_attention(store, f"{prefix}.attn", normed, normed, n_heads, mask)
    return h + mlp(store, f"{prefix}.mlp", apply_layer_norm(store, f"{prefix}.norm2", h))


def init_cross_block(store, prefix, d, n_heads, tag, rng):
    init_layer_norm(store, f"{prefix}.norm1", d, tag)
    init_attention(store, f"{prefix}.self_attn", d, n_heads, tag, rng)
    init_layer_norm(store, f"{prefix}.norm_cross", d, tag)
    init_attention(store, f"{prefix}.cross_attn", d, n_heads, tag, rng)
    init_layer_norm(store, f"{prefix}.norm2", d, tag)
    init_mlp(store, f"{prefix}.mlp", d, tag, rng)


def cross_block(
    store: ParameterStore,
    prefix: str,
    x: Tensor,
    context: Tensor,
    n_heads: int,
    mask: Optional[np.ndarray] = None,
) -> Tensor:
    """Causal self-attention, cross-attention over ``context``, then MLP."""
    normed = apply_layer_norm(store, f"{prefix}.norm1", x)
    h = x + multi_head_attention(
        store, f"{prefix}.self_attn", normed, normed, n_heads, mask
    )
    h = h + multi_head_attention(
        store,
        f"{prefix}.cross_attn",
        apply_layer_norm(store, f"{prefix}.norm_cross", h),
        context,
        n_heads,
    )
    return h + mlp(store, f"{prefix}.mlp", apply_layer_norm(store, f"{prefix}.norm2", h))


def causal_mask(length: int) -> np.ndarray:
    """Lower-triangular boolean mask: position i attends to positions <= i."""
    if length < 1:
        raise ValueError(f"causal mask needs length >= 1, got {length}")
    return np.tril(np.ones((length, length), dtype=bool))
