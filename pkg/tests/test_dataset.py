import numpy as np
import pytest

from occlusym.dataset import (
    build_toy_dataset,
    build_toy_views,
    derive_seed,
    load_toy_dataset,
    make_view_condition,
    render_voxel_depth,
    write_toy_dataset,
)
from occlusym.flow import FlowModelConfig
from occlusym.mesh_occlusion import Camera
from occlusym.patch_tokens import init_patch_embed
from occlusym.slat import gen_toy_shape

CFG = FlowModelConfig(dtype="float64")


def test_derive_seed_is_stable_and_role_sensitive():
    # pinned: a change here would silently break dataset reproducibility
    assert derive_seed(0, "toy-shape") == derive_seed(0, "toy-shape")
    assert derive_seed(0, "toy-shape") != derive_seed(1, "toy-shape")
    assert derive_seed(0, "a") != derive_seed(0, "b")
    assert 0 <= derive_seed(123, "anything") < 2**63


def test_render_voxel_depth_sphere():
    grid = gen_toy_shape("sphere", 16, seed=1, params={"center": [0.5] * 3, "radius": 0.3})
    cam = Camera(image_size=56)
    image, obj = render_voxel_depth(grid, cam)
    assert image.shape == (56, 56)
    assert obj.any() and not obj.all()
    assert np.array_equal(obj, image > 0)
    assert 0.0 < image[obj].min() and image[obj].max() <= 1.0
    # deterministic
    image2, _ = render_voxel_depth(grid, cam)
    assert np.array_equal(image, image2)


def test_render_voxel_depth_front_is_brighter():
    # two single-voxel blobs at different distances from the yaw-0 camera
    grid = np.zeros((16, 16, 16), bool)
    grid[13, 8, 8] = True  # near (+x side, toward the camera)
    grid[2, 8, 8] = True  # far
    image, obj = render_voxel_depth(grid, Camera(image_size=56, pitch=0.0, yaw=0.0))
    ys, xs = np.where(obj)
    center_cols = np.abs(xs - 28) < 6
    assert image[ys[center_cols], xs[center_cols]].max() > 0.5


def test_make_view_condition_rejects_fully_occluded():
    grid = gen_toy_shape("sphere", 16, seed=2)
    image, obj = render_voxel_depth(grid, Camera(image_size=56))
    occ = np.ones_like(obj)
    embed = init_patch_embed(CFG.token_spec, CFG.cond_dim, seed=0)
    with pytest.raises(ValueError, match="fully occluded"):
        make_view_condition(image, obj, occ, CFG, embed)


def test_make_view_condition_weights_and_count():
    grid = gen_toy_shape("box", 16, seed=3, params={"lo": [0.2] * 3, "hi": [0.8] * 3})
    image, obj = render_voxel_depth(grid, Camera(image_size=56))
    occ = np.zeros_like(obj)
    occ[:, :28] = True  # occlude the left half
    embed = init_patch_embed(CFG.token_spec, CFG.cond_dim, seed=0)
    view = make_view_condition(image, obj, occ, CFG, embed)
    vis = obj & ~occ
    assert view.visibility_count == vis.sum()
    assert (view.vis_weights[: CFG.n_prefix] == 1.0).all()
    assert (view.occ_weights[: CFG.n_prefix] == 1.0).all()
    # left-half patch columns are fully occluded
    grid_w = CFG.image_size // CFG.patch
    patch_occ = view.occ_weights[CFG.n_prefix :].reshape(grid_w, grid_w)
    assert (patch_occ[:, : grid_w // 2] == 1.0).all()


def test_build_toy_views_deterministic():
    a = build_toy_views(CFG, seed=9, n_views=2)
    b = build_toy_views(CFG, seed=9, n_views=2)
    assert a.family == b.family
    assert np.array_equal(a.grid, b.grid)
    for ia, ib in zip(a.images, b.images):
        assert np.array_equal(ia, ib)
    for oa, ob in zip(a.occ_masks, b.occ_masks):
        assert np.array_equal(oa, ob)


def test_build_toy_dataset_counts_and_shapes():
    embed = init_patch_embed(CFG.token_spec, CFG.cond_dim, seed=0)
    samples = build_toy_dataset(CFG, embed, n_shapes=3, seed=4, n_views=2)
    assert 1 <= len(samples) <= 6
    lat, view = samples[0]
    assert lat.shape == (CFG.n_latent_tokens, CFG.latent_dim)
    assert view.tokens.shape == (CFG.n_cond_tokens, CFG.cond_dim)


def test_dataset_write_load_roundtrip(tmp_path):
    embed = init_patch_embed(CFG.token_spec, CFG.cond_dim, seed=0)
    manifest = write_toy_dataset(tmp_path, CFG, n_shapes=2, seed=5, n_views=2)
    assert manifest["n_shapes"] == 2
    samples, loaded_manifest = load_toy_dataset(tmp_path, CFG, embed)
    assert loaded_manifest["root_seed"] == 5
    assert len(samples) >= 1
    # latents decode from the stored grids, fractions in range
    lat, view = samples[0]
    assert lat.min() >= 0.0 and lat.max() <= 1.0
    assert view.visibility_count > 0
    # a second load is identical
    samples2, _ = load_toy_dataset(tmp_path, CFG, embed)
    for (l1, v1), (l2, v2) in zip(samples, samples2):
        assert np.array_equal(l1, l2)
        assert np.array_equal(v1.tokens, v2.tokens)
