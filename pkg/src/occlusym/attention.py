"""Visibility-weighted multi-head cross-attention, the occlusion-aware
attention layer, and the full transformer block built from them.

The weighting mechanism: per-key visibility fractions multiply the
exponentiated similarity scores before row normalization,

    A[i, j] = vis[j] exp(S[i, j]) / sum_k vis[k] exp(S[i, k]),

which equals softmax(S + log vis) with a -inf convention at vis == 0 but
never evaluates log(0). Keys with zero visibility receive exactly zero
attention; rows still sum to 1 as long as any key is visible.

Every layer has a hand-derived backward pass; gradient correctness is pinned
against central finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import (
    LayerNormParams,
    gelu_backward,
    gelu_forward,
    init_layernorm,
    layernorm_backward,
    layernorm_forward,
    linear_backward,
    linear_forward,
    timestep_embedding,
    weighted_softmax,
    weighted_softmax_backward,
)
from .patch_tokens import stack_occlusion_tokens


class DegenerateConditioningError(ValueError):
    """All visibility weights are zero: the attention rows have no mass."""


@dataclass
class AttentionParams:
    """Projections for one multi-head attention layer.

    w_q: (C, H*D) query projection from the latent width C.
    w_kv: (C_kv, 2*H*D) fused key/value projection from the context width.
    w_out: (H*D, C) output projection back to the latent width.
    """

    w_q: np.ndarray
    w_kv: np.ndarray
    w_out: np.ndarray
    n_heads: int

    @property
    def head_dim(self) -> int:
        return self.w_q.shape[1] // self.n_heads


def init_attention(rng, dim, kv_dim, n_heads, head_dim, dtype=np.float64):
    hd = n_heads * head_dim
    return AttentionParams(
        w_q=(rng.standard_normal((dim, hd)) / np.sqrt(dim)).astype(dtype),
        w_kv=(rng.standard_normal((kv_dim, 2 * hd)) / np.sqrt(kv_dim)).astype(dtype),
        w_out=(rng.standard_normal((hd, dim)) / np.sqrt(hd)).astype(dtype),
        n_heads=int(n_heads),
    )


def _heads(x, n_heads):
    # (B, T, H*D) -> contiguous (B, H, T, D)
    b, t, hd = x.shape
    return np.ascontiguousarray(
        x.reshape(b, t, n_heads, hd // n_heads).transpose(0, 2, 1, 3)
    )


def _unheads(x):
    # (B, H, T, D) -> (B, T, H*D)
    b, h, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * d)


def mha_forward(queries_src, kv_src, p: AttentionParams, key_weights=None):
    """Multi-head attention core. key_weights (B, K) reweights keys per row.

    queries_src: (B, L, C), kv_src: (B, K, C_kv). Returns ((B, L, C), cache).
    """
    h, d = p.n_heads, p.head_dim
    q = _heads(queries_src @ p.w_q, h)
    kv = kv_src @ p.w_kv
    k = _heads(kv[..., : h * d], h)
    v = _heads(kv[..., h * d :], h)
    scores = np.matmul(q, np.ascontiguousarray(k.transpose(0, 1, 3, 2)))
    scores *= 1.0 / np.sqrt(d)
    w = None if key_weights is None else key_weights[:, None, None, :]
    attn = weighted_softmax(scores, w)
    ctx = _unheads(np.matmul(attn, v))
    out = ctx @ p.w_out
    cache = (queries_src, kv_src, q, k, v, attn, ctx, p, key_weights)
    return out, cache


def mha_backward(d_out, cache):
    """Returns (d_queries_src, d_kv_src, AttentionParams gradients)."""
    queries_src, kv_src, q, k, v, attn, ctx, p, key_weights = cache
    h, d = p.n_heads, p.head_dim
    b, l, _ = d_out.shape

    d_ctx = d_out @ p.w_out.T
    d_w_out = ctx.reshape(-1, ctx.shape[-1]).T @ d_out.reshape(-1, d_out.shape[-1])

    d_ctx_h = _heads(d_ctx, h)
    d_attn = np.matmul(d_ctx_h, np.ascontiguousarray(v.transpose(0, 1, 3, 2)))
    d_v = np.matmul(np.ascontiguousarray(attn.transpose(0, 1, 3, 2)), d_ctx_h)
    d_scores = weighted_softmax_backward(d_attn, attn)
    d_scores *= 1.0 / np.sqrt(d)
    d_q = np.matmul(d_scores, k)
    d_k = np.matmul(np.ascontiguousarray(d_scores.transpose(0, 1, 3, 2)), q)

    d_q_flat = _unheads(d_q)
    d_kv_flat = np.concatenate([_unheads(d_k), _unheads(d_v)], axis=-1)
    d_queries_src = d_q_flat @ p.w_q.T
    d_kv_src = d_kv_flat @ p.w_kv.T
    d_w_q = queries_src.reshape(-1, queries_src.shape[-1]).T @ d_q_flat.reshape(-1, h * d)
    d_w_kv = kv_src.reshape(-1, kv_src.shape[-1]).T @ d_kv_flat.reshape(-1, 2 * h * d)
    grads = AttentionParams(d_w_q, d_w_kv, d_w_out, p.n_heads)
    return d_queries_src, d_kv_src, grads


def _batched(*arrays):
    """Promote (T, C) inputs to (1, T, C); remember whether to squeeze."""
    squeeze = arrays[0].ndim == 2
    if squeeze:
        return [a[None] for a in arrays], True
    return list(arrays), False


def mask_weighted_cross_attention(latents, cond, vis_weights, p: AttentionParams):
    """Cross-attention from latent tokens to conditioning tokens, with each
    key's attention mass scaled by its visibility fraction.

    latents: (L, C) or (B, L, C); cond: (K, C_kv) or (B, K, C_kv);
    vis_weights: (K,) or (B, K) with entries in [0, 1].
    """
    latents = np.asarray(latents)
    cond = np.asarray(cond)
    vis_weights = np.asarray(vis_weights)
    (lat, cnd), squeeze = _batched(latents, cond)
    w = vis_weights[None] if vis_weights.ndim == 1 else vis_weights
    if cnd.shape[1] != w.shape[1]:
        raise ValueError(
            f"cond has {cnd.shape[1]} tokens but vis_weights has {w.shape[1]} entries"
        )
    if np.any(w.max(axis=1) <= 0.0):
        raise DegenerateConditioningError(
            "every conditioning token has zero visibility weight"
        )
    out, _ = mha_forward(lat, cnd, p, key_weights=w)
    return out[0] if squeeze else out


def occlusion_aware_attention(latents, occ_stack, p: AttentionParams):
    """Standard multi-head cross-attention pooling the stacked occlusion
    tokens (per-patch occlusion fractions replicated across the feature dim).
    """
    latents = np.asarray(latents)
    occ_stack = np.asarray(occ_stack)
    (lat, occ), squeeze = _batched(latents, occ_stack)
    out, _ = mha_forward(lat, occ, p)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# two ways to write the same attention matrix


def attention_matrix_weighted(scores, vis_weights):
    """Multiplicative form: vis * exp(S), row-normalized."""
    return weighted_softmax(scores, vis_weights)


def attention_matrix_log_bias(scores, vis_weights):
    """Additive form: softmax(S + log vis), with -inf standing in at vis == 0.

    Equal to the multiplicative form wherever any weight is positive; kept
    for documentation and cross-checking, the multiplicative form is what
    the layers use (it never evaluates log 0).
    """
    vis_weights = np.asarray(vis_weights, dtype=np.float64)
    bias = np.full_like(vis_weights, -np.inf)
    positive = vis_weights > 0
    bias[positive] = np.log(vis_weights[positive])
    shifted = scores + bias
    m = shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted - m)
    e[~np.isfinite(shifted)] = 0.0  # exp(-inf - m) -> exact zero
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# transformer block: self-attn, mask-weighted cross-attn, occlusion layer, MLP


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class BlockParams:
    """One denoiser block (pre-norm, residual everywhere).

    Sublayer order: self-attention over latent tokens (with an additive
    time-conditioning shift after the norm), mask-weighted cross-attention
    to image tokens, occlusion-aware cross-attention, MLP.
    """

    ln1: LayerNormParams
    self_attn: AttentionParams
    ln2: LayerNormParams
    cross_attn: AttentionParams
    ln3: LayerNormParams
    occ_attn: AttentionParams
    ln4: LayerNormParams
    mlp: MlpParams
    time_w: np.ndarray
    time_b: np.ndarray


def init_block(rng, dim, cond_dim, n_heads, head_dim, time_dim, mlp_hidden=None, dtype=np.float64):
    hidden = mlp_hidden or 4 * dim
    return BlockParams(
        ln1=init_layernorm(dim, dtype),
        self_attn=init_attention(rng, dim, dim, n_heads, head_dim, dtype),
        ln2=init_layernorm(dim, dtype),
        cross_attn=init_attention(rng, dim, cond_dim, n_heads, head_dim, dtype),
        ln3=init_layernorm(dim, dtype),
        occ_attn=init_attention(rng, dim, cond_dim, n_heads, head_dim, dtype),
        ln4=init_layernorm(dim, dtype),
        mlp=MlpParams(
            w1=(rng.standard_normal((dim, hidden)) / np.sqrt(dim)).astype(dtype),
            b1=np.zeros(hidden, dtype=dtype),
            w2=(rng.standard_normal((hidden, dim)) / np.sqrt(hidden)).astype(dtype),
            b2=np.zeros(dim, dtype=dtype),
        ),
        time_w=(rng.standard_normal((time_dim, dim)) * 0.02).astype(dtype),
        time_b=np.zeros(dim, dtype=dtype),
    )


def block_forward_cached(lat, cond, vis_weights, occ_stack, t_emb, p: BlockParams):
    """Forward pass keeping every intermediate needed for the backward.

    lat: (B, L, C); cond/occ_stack: (B, K, C_kv); vis_weights: (B, K);
    t_emb: (B, time_dim) precomputed sinusoidal features.
    """
    t_mod, c_time = linear_forward(t_emb, p.time_w, p.time_b)

    h1, c_ln1 = layernorm_forward(lat, p.ln1)
    h1 = h1 + t_mod[:, None, :]
    a1, c_sa = mha_forward(h1, h1, p.self_attn)
    x1 = lat + a1

    h2, c_ln2 = layernorm_forward(x1, p.ln2)
    a2, c_ca = mha_forward(h2, cond, p.cross_attn, key_weights=vis_weights)
    x2 = x1 + a2

    h3, c_ln3 = layernorm_forward(x2, p.ln3)
    a3, c_oa = mha_forward(h3, occ_stack, p.occ_attn)
    x3 = x2 + a3

    h4, c_ln4 = layernorm_forward(x3, p.ln4)
    m1, c_m1 = linear_forward(h4, p.mlp.w1, p.mlp.b1)
    g, c_g = gelu_forward(m1)
    m2, c_m2 = linear_forward(g, p.mlp.w2, p.mlp.b2)
    out = x3 + m2

    cache = (c_time, c_ln1, c_sa, c_ln2, c_ca, c_ln3, c_oa, c_ln4, c_m1, c_g, c_m2, p)
    return out, cache


def block_backward(d_out, cache):
    """Returns (d_lat, d_cond, BlockParams gradients). The occlusion-stack and
    time-embedding inputs are data, their gradients are dropped.
    """
    c_time, c_ln1, c_sa, c_ln2, c_ca, c_ln3, c_oa, c_ln4, c_m1, c_g, c_m2, p = cache

    # MLP branch
    d_g, d_w2, d_b2 = linear_backward(d_out, c_m2)
    d_m1 = gelu_backward(d_g, c_g)
    d_h4, d_w1, d_b1 = linear_backward(d_m1, c_m1)
    d_x3_ln, d_ln4 = layernorm_backward(d_h4, c_ln4)
    d_x3 = d_out + d_x3_ln

    # occlusion-aware attention branch
    d_h3, _d_occ, g_oa = mha_backward(d_x3, c_oa)
    d_x2_ln, d_ln3 = layernorm_backward(d_h3, c_ln3)
    d_x2 = d_x3 + d_x2_ln

    # mask-weighted cross-attention branch
    d_h2, d_cond, g_ca = mha_backward(d_x2, c_ca)
    d_x1_ln, d_ln2 = layernorm_backward(d_h2, c_ln2)
    d_x1 = d_x2 + d_x1_ln

    # self-attention branch; h1 feeds both the query and kv paths
    d_h1_q, d_h1_kv, g_sa = mha_backward(d_x1, c_sa)
    d_h1 = d_h1_q + d_h1_kv
    _d_temb, d_time_w, d_time_b = linear_backward(d_h1.sum(axis=1), c_time)
    d_lat_ln, d_ln1 = layernorm_backward(d_h1, c_ln1)
    d_lat = d_x1 + d_lat_ln

    grads = BlockParams(
        ln1=d_ln1, self_attn=g_sa, ln2=d_ln2, cross_attn=g_ca,
        ln3=d_ln3, occ_attn=g_oa, ln4=d_ln4,
        mlp=MlpParams(d_w1, d_b1, d_w2, d_b2),
        time_w=d_time_w, time_b=d_time_b,
    )
    return d_lat, d_cond, grads


def block_forward(lat, cond, vis_weights, occ_weights, t, p: BlockParams):
    """Single-sample block evaluation at noise level t in [0, 1].

    occ_weights is the per-token occlusion fraction vector; it is stacked to
    the conditioning width internally.
    """
    lat = np.asarray(lat)
    cond = np.asarray(cond)
    squeeze = lat.ndim == 2
    if squeeze:
        lat, cond = lat[None], cond[None]
    vis = np.atleast_2d(np.asarray(vis_weights))
    occ = np.atleast_2d(np.asarray(occ_weights))
    occ_stack = np.stack(
        [stack_occlusion_tokens(row, p.occ_attn.w_kv.shape[0]) for row in occ]
    ).astype(lat.dtype)
    t_emb = timestep_embedding(np.full(lat.shape[0], t, dtype=np.float64),
                               p.time_w.shape[0], dtype=lat.dtype)
    out, _ = block_forward_cached(lat, cond, vis, occ_stack, t_emb, p)
    return out[0] if squeeze else out
