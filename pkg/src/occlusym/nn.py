"""Plain-numpy network primitives with explicit forward/backward passes.

Every op comes as a forward returning (out, cache) and a backward taking
(d_out, cache). Shapes follow the (batch..., feature) convention with the
reduced axis last. Ops preserve the input dtype; run float64 for gradient
verification, float32 for speed.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


# ---------------------------------------------------------------------------
# parameter trees


def iter_arrays(obj, prefix: str = ""):
    """Yield (dotted_name, array) for every ndarray in a dataclass tree.

    Recurses through dataclass fields and lists/tuples of dataclasses in
    declaration order, so the enumeration is deterministic.
    """
    if isinstance(obj, np.ndarray):
        yield prefix, obj
        return
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_arrays(getattr(obj, f.name), name)
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_arrays(item, f"{prefix}[{i}]")


def tree_zeros_like(obj):
    """Same dataclass tree with every ndarray replaced by zeros."""
    if isinstance(obj, np.ndarray):
        return np.zeros_like(obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        kwargs = {
            f.name: tree_zeros_like(getattr(obj, f.name)) for f in dataclasses.fields(obj)
        }
        return type(obj)(**kwargs)
    if isinstance(obj, list):
        return [tree_zeros_like(x) for x in obj]
    if isinstance(obj, tuple):
        return tuple(tree_zeros_like(x) for x in obj)
    return obj


# ---------------------------------------------------------------------------
# linear / layer norm / gelu


def linear_forward(x, w, b=None):
    y = x @ w
    if b is not None:
        y += b
    return y, (x, w, b is not None)


def linear_backward(d_y, cache):
    x, w, has_bias = cache
    d_x = d_y @ w.T
    x2 = x.reshape(-1, x.shape[-1])
    d_w = x2.T @ d_y.reshape(-1, d_y.shape[-1])
    d_b = d_y.reshape(-1, d_y.shape[-1]).sum(axis=0) if has_bias else None
    return d_x, d_w, d_b


@dataclass
class LayerNormParams:
    gamma: np.ndarray
    beta: np.ndarray


def init_layernorm(dim: int, dtype=np.float64) -> LayerNormParams:
    return LayerNormParams(np.ones(dim, dtype=dtype), np.zeros(dim, dtype=dtype))


def layernorm_forward(x, p: LayerNormParams, eps: float = 1e-6):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * p.gamma + p.beta, (xhat, inv, p)


def layernorm_backward(d_y, cache):
    xhat, inv, p = cache
    d_xhat = d_y * p.gamma
    # per-row: dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    m1 = d_xhat.mean(axis=-1, keepdims=True)
    m2 = (d_xhat * xhat).mean(axis=-1, keepdims=True)
    d_x = inv * (d_xhat - m1 - xhat * m2)
    axes = tuple(range(d_y.ndim - 1))
    d_gamma = (d_y * xhat).sum(axis=axes)
    d_beta = d_y.sum(axis=axes)
    return d_x, LayerNormParams(d_gamma, d_beta)


def gelu_forward(x):
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * phi, (x, phi)


def gelu_backward(d_y, cache):
    x, phi = cache
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return d_y * (phi + x * pdf)


# ---------------------------------------------------------------------------
# softmax with optional multiplicative key weights


def weighted_softmax(scores, weights=None):
    """Row softmax over the last axis, optionally reweighted per key.

    A[..., j] = w[j] exp(s[..., j]) / sum_k w[k] exp(s[..., k]); plain
    softmax when weights is None. Stable via row-max subtraction; rows whose
    weights are all zero would divide by zero, callers must reject those.
    Zero-weight keys get exactly zero attention.
    """
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    if weights is not None:
        e = e * weights
    z = e.sum(axis=-1, keepdims=True)
    return e / z


def weighted_softmax_backward(d_a, a):
    """d(scores) given d(attention); weights enter only through `a`."""
    s = (d_a * a).sum(axis=-1, keepdims=True)
    return a * (d_a - s)


# ---------------------------------------------------------------------------
# time embedding


def timestep_embedding(t, dim: int, dtype=np.float64):
    """Sinusoidal features of noise levels t in [0, 1], shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = (t[:, None] * 1000.0) * freqs
    emb = np.concatenate([np.sin(args), np.cos(args)], axis=-1)
    if dim % 2:
        emb = np.concatenate([emb, np.zeros((len(t), 1))], axis=-1)
    return emb.astype(dtype)


# ---------------------------------------------------------------------------
# AdamW


@dataclass
class AdamWState:
    m: list
    v: list
    step: int = 0


def init_adamw(arrays) -> AdamWState:
    return AdamWState([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adamw_step(
    arrays,
    grads,
    state: AdamWState,
    lr: float,
    betas=(0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One decoupled-weight-decay Adam update, in place over `arrays`."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for a, g, m, v in zip(arrays, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay:
            a -= lr * weight_decay * a
        a -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
