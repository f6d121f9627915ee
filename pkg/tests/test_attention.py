import numpy as np
import pytest
from fdcheck import central_difference, relative_error

from occlusym.attention import (
    AttentionParams,
    DegenerateConditioningError,
    attention_matrix_log_bias,
    attention_matrix_weighted,
    block_forward,
    block_forward_cached,
    block_backward,
    init_attention,
    init_block,
    mask_weighted_cross_attention,
    mha_backward,
    mha_forward,
    occlusion_aware_attention,
)
from occlusym.nn import iter_arrays, timestep_embedding, tree_zeros_like
from occlusym.patch_tokens import stack_occlusion_tokens


def rand_inputs(rng, b=1, l=4, k=5, dim=6, kv_dim=3, heads=2, head_dim=2):
    lat = rng.standard_normal((b, l, dim))
    cond = rng.standard_normal((b, k, kv_dim))
    params = init_attention(rng, dim, kv_dim, heads, head_dim)
    return lat, cond, params


# ---------------------------------------------------------------------------
# attention matrix forms


def test_uniform_visibility_reduces_to_softmax():
    rng = np.random.default_rng(0)
    scores = rng.standard_normal((6, 9))
    plain = np.exp(scores - scores.max(-1, keepdims=True))
    plain /= plain.sum(-1, keepdims=True)
    weighted = attention_matrix_weighted(scores, np.ones(9))
    assert np.abs(weighted - plain).max() <= 1e-12


def test_hand_worked_attention_matrix():
    scores = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, -1.0]])
    vis = np.array([0.5, 1.0, 0.0])
    attn = attention_matrix_weighted(scores, vis)
    e = np.e
    expected = np.array(
        [
            [0.5 / 1.5, 1.0 / 1.5, 0.0],
            [0.5 * e / (0.5 * e + 1.0), 1.0 / (0.5 * e + 1.0), 0.0],
        ]
    )
    assert np.abs(attn - expected).max() < 1e-15


def test_zero_weight_columns_are_exact_zero_and_rows_sum_to_one():
    rng = np.random.default_rng(1)
    scores = rng.standard_normal((5, 7)) * 3
    vis = rng.random(7)
    vis[[2, 5]] = 0.0
    attn = attention_matrix_weighted(scores, vis)
    assert (attn[:, 2] == 0.0).all() and (attn[:, 5] == 0.0).all()
    assert np.abs(attn.sum(-1) - 1.0).max() <= 1e-12


def test_additive_log_bias_form_agrees():
    rng = np.random.default_rng(2)
    scores = rng.standard_normal((5, 7))
    vis = rng.random(7)
    vis[[1, 4]] = 0.0
    mult = attention_matrix_weighted(scores, vis)
    add = attention_matrix_log_bias(scores, vis)
    assert np.abs(mult - add).max() <= 1e-12
    assert (add[:, 1] == 0.0).all()
    ones = attention_matrix_log_bias(scores, np.ones(7))
    plain = np.exp(scores - scores.max(-1, keepdims=True))
    plain /= plain.sum(-1, keepdims=True)
    assert np.abs(ones - plain).max() <= 1e-12


def test_visibility_scale_invariance():
    rng = np.random.default_rng(3)
    scores = rng.standard_normal((4, 6))
    vis = rng.random(6)
    a1 = attention_matrix_weighted(scores, vis)
    a2 = attention_matrix_weighted(scores, vis * 37.5)
    assert np.abs(a1 - a2).max() <= 1e-12


# ---------------------------------------------------------------------------
# layer-level behavior


def test_layer_uniform_visibility_matches_plain_attention():
    rng = np.random.default_rng(4)
    lat, cond, params = rand_inputs(rng)
    weighted = mask_weighted_cross_attention(lat, cond, np.ones(cond.shape[1]), params)
    plain, _ = mha_forward(lat, cond, params, key_weights=None)
    assert np.abs(weighted - plain).max() <= 1e-12


def test_layer_one_hot_visibility_attends_single_token():
    rng = np.random.default_rng(5)
    lat, cond, params = rand_inputs(rng, k=6)
    vis = np.zeros(6)
    vis[3] = 1.0
    out = mask_weighted_cross_attention(lat, cond, vis, params)
    # attending only to token 3 means the output is that token's value rows
    # pushed through w_out, independent of the queries
    h, d = params.n_heads, params.head_dim
    kv = cond[0] @ params.w_kv
    v3 = kv[3, h * d :]
    expected = v3 @ params.w_out
    assert np.abs(out[0] - expected).max() < 1e-12


def test_layer_rejects_all_zero_visibility():
    rng = np.random.default_rng(6)
    lat, cond, params = rand_inputs(rng)
    with pytest.raises(DegenerateConditioningError):
        mask_weighted_cross_attention(lat, cond, np.zeros(cond.shape[1]), params)


def test_layer_shape_validation():
    rng = np.random.default_rng(7)
    lat, cond, params = rand_inputs(rng, k=5)
    with pytest.raises(ValueError):
        mask_weighted_cross_attention(lat, cond, np.ones(4), params)


def test_permutation_equivariance():
    rng = np.random.default_rng(8)
    lat, cond, params = rand_inputs(rng, k=7)
    vis = rng.random(7)
    out = mask_weighted_cross_attention(lat, cond, vis, params)
    perm = rng.permutation(7)
    out_p = mask_weighted_cross_attention(lat, cond[:, perm], vis[perm], params)
    assert np.abs(out - out_p).max() < 1e-12


def test_occlusion_attention_constant_keys_give_uniform_groups():
    rng = np.random.default_rng(9)
    lat, _, params = rand_inputs(rng, k=8, kv_dim=4)
    # prefix tokens weight 1, patch tokens weight 0: two key groups
    occ = np.array([1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0])
    occ_stack = stack_occlusion_tokens(occ, 4)
    _, cache = mha_forward(lat, occ_stack[None], params)
    attn = cache[5]  # (B, H, L, K)
    assert np.abs(attn[..., :2] - attn[..., :1]).max() < 1e-12
    assert np.abs(attn[..., 2:] - attn[..., 2:3]).max() < 1e-12
    assert np.abs(attn.sum(-1) - 1.0).max() <= 1e-12


def test_occlusion_attention_identical_keys_uniform():
    rng = np.random.default_rng(10)
    lat, _, params = rand_inputs(rng, k=5, kv_dim=4)
    occ_stack = stack_occlusion_tokens(np.ones(5), 4)
    _, cache = mha_forward(lat, occ_stack[None], params)
    attn = cache[5]
    assert np.abs(attn - 1.0 / 5.0).max() < 1e-12


def test_occlusion_attention_matches_bruteforce():
    # K=3, width 1, single head, hand-checkable numbers
    lat = np.array([[[1.0], [2.0]]])
    occ_stack = np.array([[[1.0], [0.0], [0.5]]])
    params = AttentionParams(
        w_q=np.array([[1.0]]), w_kv=np.array([[1.0, 1.0]]),
        w_out=np.array([[1.0]]), n_heads=1,
    )
    out = occlusion_aware_attention(lat, occ_stack, params)
    for i, q in enumerate([1.0, 2.0]):
        scores = q * np.array([1.0, 0.0, 0.5])
        e = np.exp(scores - scores.max())
        a = e / e.sum()
        expected = a @ np.array([1.0, 0.0, 0.5])
        assert abs(out[0, i, 0] - expected) < 1e-12


# ---------------------------------------------------------------------------
# block behavior


def small_block(rng, dim=6, cond_dim=4, heads=2, head_dim=2, time_dim=8):
    return init_block(rng, dim, cond_dim, heads, head_dim, time_dim)


def test_block_zero_weights_is_identity():
    rng = np.random.default_rng(11)
    blk = tree_zeros_like(small_block(rng))
    lat = rng.standard_normal((3, 6))
    cond = rng.standard_normal((5, 4))
    vis = np.ones(5)
    occ = np.zeros(5)
    out = block_forward(lat, cond, vis, occ, t=0.3, p=blk)
    assert np.abs(out - lat).max() < 1e-12


def test_block_time_invariant_with_zero_time_weights():
    rng = np.random.default_rng(12)
    blk = small_block(rng)
    blk.time_w[:] = 0.0
    blk.time_b[:] = 0.0
    lat = rng.standard_normal((3, 6))
    cond = rng.standard_normal((5, 4))
    vis = rng.random(5) + 0.1
    occ = rng.random(5)
    a = block_forward(lat, cond, vis, occ, t=0.1, p=blk)
    b = block_forward(lat, cond, vis, occ, t=0.9, p=blk)
    assert np.abs(a - b).max() < 1e-12


def test_block_matches_reference_composition():
    rng = np.random.default_rng(13)
    p = small_block(rng)
    lat = rng.standard_normal((3, 6))
    cond = rng.standard_normal((5, 4))
    vis = rng.random(5) + 0.05
    occ = rng.random(5)
    t = 0.47
    out = block_forward(lat, cond, vis, occ, t, p)

    # independent straight-line evaluation
    from scipy.special import erf

    def norm(x, ln):
        mu = x.mean(-1, keepdims=True)
        sd = np.sqrt(((x - mu) ** 2).mean(-1, keepdims=True) + 1e-6)
        return (x - mu) / sd * ln.gamma + ln.beta

    def attn(q_src, kv_src, ap, weights=None):
        h, d = ap.n_heads, ap.head_dim
        q = q_src @ ap.w_q
        kv = kv_src @ ap.w_kv
        k, v = kv[:, : h * d], kv[:, h * d :]
        outs = []
        for hi in range(h):
            s = q[:, hi * d : (hi + 1) * d] @ k[:, hi * d : (hi + 1) * d].T / np.sqrt(d)
            e = np.exp(s)
            if weights is not None:
                e = e * weights[None, :]
            a = e / e.sum(-1, keepdims=True)
            outs.append(a @ v[:, hi * d : (hi + 1) * d])
        return np.concatenate(outs, axis=-1) @ ap.w_out

    t_emb = timestep_embedding(np.array([t]), 8)[0]
    occ_stack = stack_occlusion_tokens(occ, 4)
    h1 = norm(lat, p.ln1) + (t_emb @ p.time_w + p.time_b)
    x = lat + attn(h1, h1, p.self_attn)
    x = x + attn(norm(x, p.ln2), cond, p.cross_attn, weights=vis)
    x = x + attn(norm(x, p.ln3), occ_stack, p.occ_attn)
    h4 = norm(x, p.ln4)
    m = h4 @ p.mlp.w1 + p.mlp.b1
    g = m * 0.5 * (1.0 + erf(m / np.sqrt(2.0)))
    x = x + g @ p.mlp.w2 + p.mlp.b2
    assert np.abs(out - x).max() < 1e-10


# ---------------------------------------------------------------------------
# gradient checks vs central differences (micro instances; the acceptance
# suite runs the full 100-instance sweep)


def _attention_fd_case(rng, weighted):
    b, l, k = 1, 3, 4
    lat = rng.standard_normal((b, l, 5))
    cond = rng.standard_normal((b, k, 3))
    params = init_attention(rng, 5, 3, 2, 2)
    vis = (rng.random((b, k)) + 0.05) if weighted else None
    probe = rng.standard_normal((b, l, 5))

    def loss():
        out, _ = mha_forward(lat, cond, params, key_weights=vis)
        return float((out * probe).sum())

    out, cache = mha_forward(lat, cond, params, key_weights=vis)
    d_lat, d_cond, grads = mha_backward(probe, cache)
    arrays = [lat, cond, params.w_q, params.w_kv, params.w_out]
    analytic = [d_lat, d_cond, grads.w_q, grads.w_kv, grads.w_out]
    numeric = central_difference(loss, arrays)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def test_mask_weighted_attention_gradients():
    rng = np.random.default_rng(20)
    assert _attention_fd_case(rng, weighted=True) < 1e-6


def test_unweighted_attention_gradients():
    rng = np.random.default_rng(21)
    assert _attention_fd_case(rng, weighted=False) < 1e-6


def test_block_gradients():
    rng = np.random.default_rng(22)
    p = small_block(rng, dim=4, cond_dim=3, heads=1, head_dim=2, time_dim=6)
    lat = rng.standard_normal((1, 3, 4))
    cond = rng.standard_normal((1, 4, 3))
    vis = rng.random((1, 4)) + 0.05
    occ_stack = rng.standard_normal((1, 4, 3))
    t_emb = timestep_embedding(np.array([0.37]), 6)
    probe = rng.standard_normal((1, 3, 4))

    def loss():
        out, _ = block_forward_cached(lat, cond, vis, occ_stack, t_emb, p)
        return float((out * probe).sum())

    out, cache = block_forward_cached(lat, cond, vis, occ_stack, t_emb, p)
    d_lat, d_cond, grads = block_backward(probe, cache)
    arrays = [lat, cond] + [a for _, a in iter_arrays(p)]
    analytic = [d_lat, d_cond] + [a for _, a in iter_arrays(grads)]
    numeric = central_difference(loss, arrays)
    worst = max(relative_error(a, n) for a, n in zip(analytic, numeric))
    assert worst < 1e-6
