"""Rectified-flow denoiser over latent tokens: model, training loop with
classifier-free guidance, and the Euler sampler with visibility-sorted
multi-view conditioning.

The latent path is linear interpolation between data and unit gaussian
noise, lat(t) = (1-t) lat0 + t eps, and the network regresses the constant
velocity eps - lat0. Sampling integrates the learned velocity backward from
t=1 on a uniform grid.

Occupancy-fraction latents are mapped affinely to [-1, 1] inside training
(latent_scale/latent_shift in the config) so their scale matches the noise;
sampling inverts the map, so callers only see fraction-space latents. The
patch embedder rides along in the model struct but is frozen: it stands in
for a pretrained feature extractor and never receives gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import io as _io
from .attention import (
    DegenerateConditioningError,
    block_backward,
    block_forward_cached,
    init_block,
)
from .nn import (
    LayerNormParams,
    adamw_step,
    init_adamw,
    init_layernorm,
    iter_arrays,
    layernorm_backward,
    layernorm_forward,
    linear_backward,
    linear_forward,
    timestep_embedding,
    tree_zeros_like,
)
from .patch_tokens import (
    PatchEmbedParams,
    TokenGridSpec,
    init_patch_embed,
    stack_occlusion_tokens,
    token_count,
)
from .slat import decode_stage1


@dataclass(frozen=True)
class FlowModelConfig:
    """Desk-scale defaults: a 16-cube occupancy grid compressed to 8^3 latent
    tokens of width 8, denoised by 4 blocks of width 32."""

    n_grid: int = 16
    latent_res: int = 8
    n_blocks: int = 4
    model_dim: int = 32
    n_heads: int = 2
    head_dim: int = 16
    cond_dim: int = 64
    image_size: int = 56
    patch: int = 14
    n_prefix: int = 5
    time_dim: int = 32
    latent_scale: float = 2.0
    latent_shift: float = -1.0
    dtype: str = "float32"

    @property
    def n_latent_tokens(self) -> int:
        return self.latent_res**3

    @property
    def latent_dim(self) -> int:
        return (self.n_grid // self.latent_res) ** 3

    @property
    def token_spec(self) -> TokenGridSpec:
        return TokenGridSpec(self.image_size, self.patch, self.n_prefix)

    @property
    def n_cond_tokens(self) -> int:
        return token_count(self.token_spec)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


@dataclass
class FlowModel:
    config: FlowModelConfig
    w_in: np.ndarray
    b_in: np.ndarray
    pos: np.ndarray  # (n_latent_tokens, model_dim) learned positional codes
    blocks: list
    ln_f: LayerNormParams
    w_out: np.ndarray
    b_out: np.ndarray
    null_cond: np.ndarray  # (n_cond_tokens, cond_dim) learned null condition
    embed: PatchEmbedParams  # frozen


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    cfg_drop: float = 0.1
    batch: int = 16
    steps: int = 2000
    seed: int = 0
    weight_decay: float = 0.01
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.cfg_drop <= 1.0:
            raise ValueError("cfg_drop must be in [0, 1]")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass(frozen=True)
class SampleConfig:
    n_steps: int = 25
    cfg_scale: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")


@dataclass
class ViewCondition:
    """One conditioning view: embedded image tokens plus per-token visibility
    and occlusion fractions, and the raw visible-pixel count used for view
    ordering."""

    tokens: np.ndarray  # (K, cond_dim)
    vis_weights: np.ndarray  # (K,)
    occ_weights: np.ndarray  # (K,)
    visibility_count: int


def init_flow_model(config: FlowModelConfig, seed: int = 0) -> FlowModel:
    rng = np.random.default_rng(seed)
    dt = config.np_dtype
    c = config.model_dim
    blocks = [
        init_block(rng, c, config.cond_dim, config.n_heads, config.head_dim,
                   config.time_dim, dtype=dt)
        for _ in range(config.n_blocks)
    ]
    model = FlowModel(
        config=config,
        w_in=(rng.standard_normal((config.latent_dim, c)) / np.sqrt(config.latent_dim)).astype(dt),
        b_in=np.zeros(c, dtype=dt),
        pos=(rng.standard_normal((config.n_latent_tokens, c)) * 0.02).astype(dt),
        blocks=blocks,
        ln_f=init_layernorm(c, dt),
        # zero-init output head: the fresh model predicts zero velocity
        w_out=np.zeros((c, config.latent_dim), dtype=dt),
        b_out=np.zeros(config.latent_dim, dtype=dt),
        null_cond=(rng.standard_normal((config.n_cond_tokens, config.cond_dim)) * 0.1).astype(dt),
        embed=_cast_embed(init_patch_embed(config.token_spec, config.cond_dim, seed=seed + 1), dt),
    )
    return model


def _cast_embed(embed: PatchEmbedParams, dtype) -> PatchEmbedParams:
    return PatchEmbedParams(
        embed.projection.astype(dtype), embed.pos.astype(dtype), embed.prefix.astype(dtype)
    )


def null_condition(model: FlowModel) -> ViewCondition:
    """The learned classifier-free-guidance null: visibility 1 on the prefix
    tokens and 0 on every patch token."""
    cfg = model.config
    w = np.zeros(cfg.n_cond_tokens, dtype=np.float64)
    w[: cfg.n_prefix] = 1.0
    return ViewCondition(
        tokens=model.null_cond,
        vis_weights=w,
        occ_weights=w.copy(),
        visibility_count=0,
    )


# ---------------------------------------------------------------------------
# flow objective


def add_noise(lat0, eps, t):
    """lat(t) = (1 - t) lat0 + t eps; t may be scalar or per-sample (B,)."""
    lat0 = np.asarray(lat0)
    eps = np.asarray(eps)
    if lat0.shape != eps.shape:
        raise ValueError(f"shape mismatch: {lat0.shape} vs {eps.shape}")
    t = np.asarray(t, dtype=lat0.dtype)
    if t.ndim == 1:
        t = t.reshape((-1,) + (1,) * (lat0.ndim - 1))
    return (1.0 - t) * lat0 + t * eps


def flow_loss(pred, eps, lat0) -> float:
    """Mean squared error against the straight-line velocity eps - lat0."""
    pred = np.asarray(pred)
    if pred.shape != np.asarray(eps).shape or pred.shape != np.asarray(lat0).shape:
        raise ValueError("pred, eps and lat0 must share a shape")
    diff = pred - (eps - lat0)
    return float(np.mean(diff.astype(np.float64) ** 2))


def flow_loss_and_grad(pred, eps, lat0):
    diff = pred - (eps - lat0)
    loss = float(np.mean(diff.astype(np.float64) ** 2))
    return loss, (2.0 / diff.size) * diff


# ---------------------------------------------------------------------------
# full-model forward/backward


def model_forward_cached(model: FlowModel, lat_t, cond, vis_weights, occ_stack, t):
    """lat_t (B, L, latent_dim) -> predicted velocity, with caches.

    cond/occ_stack: (B, K, cond_dim); vis_weights: (B, K); t: (B,) in [0, 1].
    """
    if np.any(np.max(vis_weights, axis=-1) <= 0.0):
        raise DegenerateConditioningError(
            "a sample in the batch has all-zero visibility weights"
        )
    t_emb = timestep_embedding(t, model.config.time_dim, dtype=lat_t.dtype)
    x, c_in = linear_forward(lat_t, model.w_in, model.b_in)
    x = x + model.pos
    block_caches = []
    for blk in model.blocks:
        x, cache = block_forward_cached(x, cond, vis_weights, occ_stack, t_emb, blk)
        block_caches.append(cache)
    h, c_lnf = layernorm_forward(x, model.ln_f)
    pred, c_out = linear_forward(h, model.w_out, model.b_out)
    return pred, (c_in, block_caches, c_lnf, c_out)


def model_forward(model, lat_t, cond, vis_weights, occ_stack, t):
    pred, _ = model_forward_cached(model, lat_t, cond, vis_weights, occ_stack, t)
    return pred


def model_backward(model: FlowModel, d_pred, cache):
    """Gradients for every parameter plus the conditioning tokens.

    Returns (grads, d_cond) where grads mirrors the FlowModel tree (embed
    gradients stay zero: the embedder is frozen).
    """
    c_in, block_caches, c_lnf, c_out = cache
    grads = tree_zeros_like(model)
    d_h, grads.w_out, grads.b_out = linear_backward(d_pred, c_out)
    d_x, grads.ln_f = layernorm_backward(d_h, c_lnf)
    d_cond = None
    for i in range(len(model.blocks) - 1, -1, -1):
        d_x, d_c, g_blk = block_backward(d_x, block_caches[i])
        grads.blocks[i] = g_blk
        d_cond = d_c if d_cond is None else d_cond + d_c
    grads.pos = d_x.sum(axis=0)
    _, grads.w_in, grads.b_in = linear_backward(d_x, c_in)
    return grads, d_cond


def trainable_arrays(model: FlowModel):
    """(name, array) pairs of the parameters the optimizer may touch."""
    return [(n, a) for n, a in iter_arrays(model) if not n.startswith("embed.")]


# ---------------------------------------------------------------------------
# training


def sort_views_by_visibility(views: list) -> list:
    """Views in descending visible-pixel count; stable, so ties keep their
    original order."""
    if len(views) == 0:
        raise ValueError("need at least one view")
    return sorted(views, key=lambda v: -v.visibility_count)


def _condition_tensors(views: list, model: FlowModel):
    """Stack per-view conditioning into batch tensors of the model dtype."""
    dt = model.config.np_dtype
    tokens = np.stack([np.asarray(v.tokens, dtype=dt) for v in views])
    vis = np.stack([np.asarray(v.vis_weights, dtype=dt) for v in views])
    occ_stack = np.stack(
        [
            stack_occlusion_tokens(v.occ_weights, model.config.cond_dim).astype(dt)
            for v in views
        ]
    )
    return tokens, vis, occ_stack


def train(dataset, model: FlowModel, cfg: TrainConfig, log_every: int = 0):
    """Optimize the model in place over (latent_tokens, ViewCondition) pairs.

    dataset is a sequence of (lat0, ViewCondition) with lat0 shaped
    (n_latent_tokens, latent_dim) in occupancy-fraction space. Per step:
    uniform t, fresh gaussian noise, conditioning dropped to the learned null
    with probability cfg_drop, one AdamW update. Returns the per-step loss
    trace; aborts on non-finite loss.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    mc = model.config
    dt = mc.np_dtype
    lat0_all = np.stack([np.asarray(lat0, dtype=dt) for lat0, _ in dataset])
    lat0_all = mc.latent_scale * lat0_all + mc.latent_shift
    views = [view for _, view in dataset]
    tokens_all, vis_all, occ_all = _condition_tensors(views, model)

    null = null_condition(model)
    null_vis = null.vis_weights.astype(dt)
    null_occ = stack_occlusion_tokens(null.occ_weights, mc.cond_dim).astype(dt)

    names_arrays = trainable_arrays(model)
    arrays = [a for _, a in names_arrays]
    opt = init_adamw(arrays)
    rng = np.random.default_rng(cfg.seed)
    losses = np.zeros(cfg.steps, dtype=np.float64)
    b, l, d = cfg.batch, mc.n_latent_tokens, mc.latent_dim

    for step in range(cfg.steps):
        idx = rng.integers(0, len(dataset), size=b)
        t = rng.uniform(0.0, 1.0, size=b)
        eps = rng.standard_normal((b, l, d)).astype(dt)
        drop = rng.uniform(0.0, 1.0, size=b) < cfg.cfg_drop

        lat0 = lat0_all[idx]
        lat_t = add_noise(lat0, eps, t.astype(dt))
        cond = tokens_all[idx]
        vis = vis_all[idx]
        occ = occ_all[idx]
        if drop.any():
            cond = cond.copy()
            vis = vis.copy()
            occ = occ.copy()
            cond[drop] = model.null_cond
            vis[drop] = null_vis
            occ[drop] = null_occ

        pred, cache = model_forward_cached(model, lat_t, cond, vis, occ, t)
        loss, d_pred = flow_loss_and_grad(pred, eps, lat0)
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite loss {loss} at step {step}")
        losses[step] = loss

        grads, d_cond = model_backward(model, d_pred.astype(dt), cache)
        if drop.any():
            grads.null_cond += d_cond[drop].sum(axis=0)
        grad_list = [a for _, a in trainable_grads(grads)]
        adamw_step(arrays, grad_list, opt, cfg.lr, cfg.betas, cfg.adam_eps,
                   cfg.weight_decay)
        if log_every and (step + 1) % log_every == 0:
            recent = losses[max(0, step + 1 - log_every) : step + 1]
            print(f"step {step + 1}/{cfg.steps} loss {recent.mean():.4f}")
    return model, losses


def trainable_grads(grads) -> list:
    return [(n, a) for n, a in iter_arrays(grads) if not n.startswith("embed.")]


# ---------------------------------------------------------------------------
# sampling


def _view_schedule(n_views: int, n_steps: int) -> np.ndarray:
    """Per-step view index: contiguous segments, earlier segments no smaller,
    the first (most visible) view conditioning the earliest, coarsest steps."""
    schedule = np.empty(n_steps, dtype=np.int64)
    for seg, steps in enumerate(np.array_split(np.arange(n_steps), n_views)):
        schedule[steps] = seg
    return schedule


def sample_batch(model: FlowModel, view_lists: list, cfg: SampleConfig) -> np.ndarray:
    """Sample one latent per entry of view_lists (each a list of views).

    All entries must carry the same number of views so the per-step batching
    stays rectangular. Returns (B, n_latent_tokens, latent_dim) latents in
    occupancy-fraction space, clipped to [0, 1].
    """
    mc = model.config
    dt = mc.np_dtype
    if len(view_lists) == 0 or any(len(v) == 0 for v in view_lists):
        raise ValueError("every sample needs at least one conditioning view")
    n_views = len(view_lists[0])
    if any(len(v) != n_views for v in view_lists):
        raise ValueError("all samples must have the same number of views")

    per_view = []
    for k in range(n_views):
        ordered = [sort_views_by_visibility(vl)[k] for vl in view_lists]
        per_view.append(_condition_tensors(ordered, model))

    null = null_condition(model)
    b = len(view_lists)
    null_tokens = np.broadcast_to(model.null_cond, (b,) + model.null_cond.shape)
    null_vis = np.broadcast_to(null.vis_weights.astype(dt), (b, mc.n_cond_tokens))
    null_occ = np.broadcast_to(
        stack_occlusion_tokens(null.occ_weights, mc.cond_dim).astype(dt),
        (b, mc.n_cond_tokens, mc.cond_dim),
    )

    rng = np.random.default_rng(cfg.seed)
    lat = rng.standard_normal((b, mc.n_latent_tokens, mc.latent_dim)).astype(dt)
    schedule = _view_schedule(n_views, cfg.n_steps)
    dt_step = 1.0 / cfg.n_steps
    for i in range(cfg.n_steps):
        t = np.full(b, 1.0 - i * dt_step)
        v_null = model_forward(model, lat, null_tokens, null_vis, null_occ, t)
        if cfg.cfg_scale == 0.0:
            vel = v_null
        else:
            tokens, vis, occ = per_view[schedule[i]]
            v_cond = model_forward(model, lat, tokens, vis, occ, t)
            vel = v_null + cfg.cfg_scale * (v_cond - v_null)
        lat = lat - dt_step * vel
    lat = (lat.astype(np.float64) - mc.latent_shift) / mc.latent_scale
    return np.clip(lat, 0.0, 1.0)


def sample(model: FlowModel, views: list, cfg: SampleConfig) -> np.ndarray:
    """Denoise from pure noise conditioned on one or more views.

    Views are assigned to contiguous step segments in descending visibility
    order; the guided velocity is v_null + cfg_scale * (v_cond - v_null).
    """
    return sample_batch(model, [views], cfg)[0]


def reconstruct(model: FlowModel, views: list, cfg: SampleConfig,
                threshold: float = 0.5) -> np.ndarray:
    """Sample a latent and decode it to an occupancy grid."""
    lat = sample(model, views, cfg)
    return decode_stage1(lat, model.config.n_grid, threshold)


# ---------------------------------------------------------------------------
# checkpointing


def save_model(path, model: FlowModel, extra: dict | None = None) -> None:
    import dataclasses as _dc

    meta = {
        "model_config": _dc.asdict(model.config),
        "kind": "flow-model",
    }
    if extra:
        meta.update(extra)
    _io.save_checkpoint(path, iter_arrays(model), meta)


def load_model(path) -> FlowModel:
    manifest, arrays = _io.load_checkpoint(path)
    config = FlowModelConfig(**manifest["model_config"])
    model = init_flow_model(config, seed=0)
    for name, arr in iter_arrays(model):
        stored = arrays[name]
        if tuple(stored.shape) != tuple(arr.shape):
            raise ValueError(f"checkpoint array {name} has shape {stored.shape}, "
                             f"expected {arr.shape}")
        arr[...] = stored.astype(arr.dtype)
    return model
