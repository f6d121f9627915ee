"""Procedural training data: toy voxel solids rendered to depth views from
orbit cameras, occluded with random 2D masks, and packaged as conditioning.

The voxel grid lives in the unit cube centered at the origin for rendering
(matching the normalized-mesh convention), so the same orbit cameras serve
meshes and grids. Depth renders use brute ray-marching: cheap at desk
resolutions and trivially deterministic.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import io as _io
from .flow import FlowModelConfig, FlowModel, ViewCondition
from .masks2d import OcclusionParams, gen_random_occlusion, visible_mask
from .mesh_occlusion import Camera, camera_rays, orbit_cameras
from .patch_tokens import embed_patches, patch_fraction
from .slat import TOY_FAMILIES, encode_stage1, gen_toy_shape

# depth brightness bounds: ray lengths to the near/far corners of the unit
# cube from an orbit camera (radius +- half the cube diagonal)
_HALF_DIAG = float(np.sqrt(3.0) / 2.0)


def derive_seed(root_seed: int, role: str) -> int:
    """Stable sub-seed: sha256 of "{root_seed}:{role}", folded to 63 bits."""
    digest = hashlib.sha256(f"{root_seed}:{role}".encode("ascii")).digest()
    return int.from_bytes(digest[:8], "little") & (2**63 - 1)


def render_voxel_depth(grid: np.ndarray, cam: Camera, n_samples: int | None = None):
    """Ray-march a voxel grid to a depth image and an object mask.

    Returns (image, obj_mask): image holds 0 for background and a brightness
    in (0, 1] that increases toward the camera, computed as
    (far_bound - t_hit) / (far_bound - near_bound) with the bounds at
    radius -+ half the cube diagonal.
    """
    grid = np.asarray(grid, dtype=bool)
    n = grid.shape[0]
    if n_samples is None:
        n_samples = 4 * n
    size = cam.image_size
    origin, dirs = camera_rays(cam)

    # slab intersection with the cube [-0.5, 0.5]^3
    with np.errstate(divide="ignore"):
        inv = 1.0 / dirs
    t0 = (-0.5 - origin) * inv
    t1 = (0.5 - origin) * inv
    t_enter = np.minimum(t0, t1).max(axis=1)
    t_exit = np.maximum(t0, t1).min(axis=1)
    hit_box = t_exit > np.maximum(t_enter, 0.0)

    image = np.zeros(size * size, dtype=np.float64)
    if hit_box.any():
        te = t_enter[hit_box]
        tx = t_exit[hit_box]
        steps = np.linspace(0.0, 1.0, n_samples)
        ts = te[:, None] + (tx - te)[:, None] * steps[None, :]
        pts = origin[None, None, :] + dirs[hit_box][:, None, :] * ts[..., None]
        ijk = np.clip(((pts + 0.5) * n).astype(np.int64), 0, n - 1)
        occupied = grid[ijk[..., 0], ijk[..., 1], ijk[..., 2]]
        any_hit = occupied.any(axis=1)
        first = np.argmax(occupied, axis=1)
        t_hit = ts[np.arange(len(ts)), first]
        near_b = cam.radius - _HALF_DIAG
        far_b = cam.radius + _HALF_DIAG
        brightness = np.clip((far_b - t_hit) / (far_b - near_b), 0.0, 1.0)
        vals = np.zeros(len(ts))
        vals[any_hit] = brightness[any_hit]
        image[hit_box] = vals
    image = image.reshape(size, size)
    return image, image > 0.0


def make_view_condition(
    image: np.ndarray,
    obj_mask: np.ndarray,
    occ_mask: np.ndarray,
    model_or_config,
    embed=None,
) -> ViewCondition:
    """Embed one occluded view: pre-multiplies the image by the visible mask,
    runs the frozen patch embedder and computes the per-patch weights.

    Rejects fully occluded views (no visible object pixel) up front, so the
    attention layers never see an all-zero visibility row.
    """
    config = model_or_config.config if isinstance(model_or_config, FlowModel) else model_or_config
    if embed is None:
        embed = model_or_config.embed  # requires a FlowModel
    spec = config.token_spec
    vis = visible_mask(obj_mask, occ_mask)
    count = int(np.count_nonzero(vis))
    if count == 0:
        raise ValueError("view is fully occluded: no visible object pixel")
    tokens = embed_patches(np.asarray(image, dtype=np.float64) * vis, spec, embed)
    return ViewCondition(
        tokens=tokens,
        vis_weights=patch_fraction(vis, spec),
        occ_weights=patch_fraction(occ_mask, spec),
        visibility_count=count,
    )


@dataclass
class ToyShapeViews:
    """One toy solid with its latent tokens and per-view render/mask stack."""

    family: str
    grid: np.ndarray
    latent: np.ndarray  # (r^3, (N/r)^3) occupancy fractions
    images: list  # (S, S) float64 depth renders
    obj_masks: list
    occ_masks: list
    cameras: list


def build_toy_views(
    config: FlowModelConfig,
    seed: int,
    n_views: int = 4,
    occlusion: OcclusionParams | None = None,
    unoccluded_prob: float = 0.25,
    family: str | None = None,
) -> ToyShapeViews:
    """One shape with n_views orbit renders and per-view random occlusions.

    With probability unoccluded_prob a view keeps an empty occlusion mask so
    low-occlusion conditioning stays in distribution.
    """
    rng = np.random.default_rng(derive_seed(seed, "toy-shape"))
    if family is None:
        family = TOY_FAMILIES[rng.integers(len(TOY_FAMILIES))]
    grid = gen_toy_shape(family, config.n_grid, int(rng.integers(2**31)))
    latent = encode_stage1(grid, config.latent_res)
    cams = orbit_cameras(n_views, image_size=config.image_size)
    images, objs, occs = [], [], []
    for v, cam in enumerate(cams):
        image, obj = render_voxel_depth(grid, cam)
        if rng.uniform() < unoccluded_prob:
            occ = np.zeros_like(obj)
        else:
            occ = gen_random_occlusion(
                config.image_size, config.image_size, occlusion,
                seed=derive_seed(seed, f"occlusion-{v}"),
            )
        images.append(image)
        objs.append(obj)
        occs.append(occ)
    return ToyShapeViews(family, grid, latent, images, objs, occs, cams)


def build_toy_dataset(
    config: FlowModelConfig,
    embed,
    n_shapes: int,
    seed: int,
    n_views: int = 4,
    occlusion: OcclusionParams | None = None,
):
    """Flat training set: one (latent, ViewCondition) pair per usable view."""
    samples = []
    for i in range(n_shapes):
        shape = build_toy_views(config, derive_seed(seed, f"shape-{i}"),
                                n_views, occlusion)
        for image, obj, occ in zip(shape.images, shape.obj_masks, shape.occ_masks):
            try:
                view = make_view_condition(image, obj, occ, config, embed)
            except ValueError:
                continue  # fully occluded render; skip
            samples.append((shape.latent, view))
    if not samples:
        raise ValueError("no usable views generated; occlusions too aggressive?")
    return samples


# ---------------------------------------------------------------------------
# on-disk dataset layout (written by the CLI, consumed by training)


def write_toy_dataset(out_dir, config: FlowModelConfig, n_shapes: int, seed: int,
                      n_views: int = 4, occlusion: OcclusionParams | None = None):
    """Write shapes as packed voxel grids plus per-view PGM images and masks.

    Images are quantized to 8-bit PGM; the manifest records every seed so
    regeneration is bit-identical.
    """
    import os

    entries = []
    for i in range(n_shapes):
        shape_seed = derive_seed(seed, f"shape-{i}")
        shape = build_toy_views(config, shape_seed, n_views, occlusion)
        stem = f"shape_{i:05d}"
        _io.write_voxels(os.path.join(out_dir, f"{stem}.vox"), shape.grid)
        views = []
        for v in range(len(shape.cameras)):
            img8 = np.clip(np.round(shape.images[v] * 255.0), 0, 255).astype(np.uint8)
            _io.write_pgm(os.path.join(out_dir, f"{stem}_v{v}_img.pgm"), img8)
            _io.write_pgm(os.path.join(out_dir, f"{stem}_v{v}_obj.pgm"), shape.obj_masks[v])
            _io.write_pgm(os.path.join(out_dir, f"{stem}_v{v}_occ.pgm"), shape.occ_masks[v])
            cam = shape.cameras[v]
            views.append({
                "image": f"{stem}_v{v}_img.pgm",
                "obj": f"{stem}_v{v}_obj.pgm",
                "occ": f"{stem}_v{v}_occ.pgm",
                "camera": {"radius": cam.radius, "yaw": cam.yaw, "pitch": cam.pitch,
                           "fov_y": cam.fov_y, "image_size": cam.image_size},
            })
        entries.append({"stem": stem, "family": shape.family, "seed": shape_seed,
                        "grid": f"{stem}.vox", "views": views})
    manifest = {
        "n_shapes": n_shapes,
        "n_views": n_views,
        "root_seed": seed,
        "grid_n": config.n_grid,
        "latent_res": config.latent_res,
        "image_size": config.image_size,
        "shapes": entries,
    }
    _io.write_json(os.path.join(out_dir, "manifest.json"), manifest)
    return manifest


def load_toy_dataset(in_dir, config: FlowModelConfig, embed):
    """Rebuild (latent, ViewCondition) pairs from a written dataset."""
    import json
    import os

    with open(os.path.join(in_dir, "manifest.json"), "r", encoding="utf-8") as f:
        manifest = json.load(f)
    samples = []
    for entry in manifest["shapes"]:
        grid = _io.read_voxels(os.path.join(in_dir, entry["grid"]))
        latent = encode_stage1(grid, config.latent_res)
        for view in entry["views"]:
            image = _io.read_pgm(os.path.join(in_dir, view["image"])).astype(np.float64) / 255.0
            obj = _io.read_pgm_mask(os.path.join(in_dir, view["obj"]))
            occ = _io.read_pgm_mask(os.path.join(in_dir, view["occ"]))
            try:
                samples.append((latent, make_view_condition(image, obj, occ, config, embed)))
            except ValueError:
                continue
    return samples, manifest
