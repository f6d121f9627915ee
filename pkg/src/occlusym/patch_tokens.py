"""Image and mask conditioning tokens.

A square image splits into a grid of PxP patches; plus a fixed number of
prefix tokens (CLS + registers) that carry global context. Masks turn into
per-patch coverage fractions with prefix entries pinned to 1, and images turn
into feature tokens through a small frozen patch embedder (a seeded random
linear projection standing in for a large pretrained backbone).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TokenGridSpec:
    """Token layout for one conditioning image.

    image_size must be divisible by patch. Token order is prefix tokens
    first, then patches row major.
    """

    image_size: int = 56
    patch: int = 14
    n_prefix: int = 5  # 1 CLS + 4 registers

    def __post_init__(self):
        if self.image_size <= 0 or self.patch <= 0:
            raise ValueError("image_size and patch must be positive")
        if self.image_size % self.patch != 0:
            raise ValueError(
                f"image_size {self.image_size} not divisible by patch {self.patch}"
            )
        if self.n_prefix < 0:
            raise ValueError("n_prefix must be >= 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch


def token_count(spec: TokenGridSpec) -> int:
    """Prefix tokens plus one token per patch."""
    return spec.n_prefix + spec.grid * spec.grid


def patch_fraction(mask: np.ndarray, spec: TokenGridSpec) -> np.ndarray:
    """Per-token coverage fractions of a binary mask.

    Entry j for a patch is (set pixels in patch j) / patch**2, patches in
    row-major order; the prefix entries are 1 so global tokens are never
    masked out.
    """
    mask = np.asarray(mask)
    if mask.shape != (spec.image_size, spec.image_size):
        raise ValueError(
            f"mask shape {mask.shape} != ({spec.image_size}, {spec.image_size})"
        )
    g, p = spec.grid, spec.patch
    per_patch = mask.astype(np.float64).reshape(g, p, g, p).sum(axis=(1, 3)) / (p * p)
    out = np.ones(token_count(spec), dtype=np.float64)
    out[spec.n_prefix :] = per_patch.reshape(-1)
    return out


@dataclass
class PatchEmbedParams:
    """Frozen patch embedder: random projection + positional codes.

    projection: (patch*patch*channels, dim), scaled to unit-norm columns.
    pos: (grid*grid, dim) positional codes added to patch tokens.
    prefix: (n_prefix, dim) standalone vectors for CLS/register tokens.
    """

    projection: np.ndarray
    pos: np.ndarray
    prefix: np.ndarray


def init_patch_embed(
    spec: TokenGridSpec, dim: int = 64, channels: int = 1, seed: int = 0
) -> PatchEmbedParams:
    rng = np.random.default_rng(seed)
    d_in = spec.patch * spec.patch * channels
    proj = rng.standard_normal((d_in, dim)) / np.sqrt(d_in)
    pos = rng.standard_normal((spec.grid * spec.grid, dim)) * 0.1
    prefix = rng.standard_normal((spec.n_prefix, dim)) * 0.1
    return PatchEmbedParams(proj, pos, prefix)


def embed_patches(
    image: np.ndarray, spec: TokenGridSpec, params: PatchEmbedParams
) -> np.ndarray:
    """Map an image to (token_count, dim) conditioning features.

    The image is (H, W) grayscale or (H, W, C); invisible pixels are expected
    to be pre-multiplied to 0 before calling. Patch token k is
    projection^T @ flattened_patch_k + pos[k]; prefix tokens are the fixed
    prefix vectors. Linear in the pixel values for fixed parameters.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[:, :, None]
    if image.shape[0] != spec.image_size or image.shape[1] != spec.image_size:
        raise ValueError(
            f"image shape {image.shape[:2]} != ({spec.image_size}, {spec.image_size})"
        )
    g, p, c = spec.grid, spec.patch, image.shape[2]
    if params.projection.shape[0] != p * p * c:
        raise ValueError(
            f"embedder expects {params.projection.shape[0]} pixels per patch, "
            f"got {p * p * c}"
        )
    # (g, g, p*p*c) patches, row major
    patches = image.reshape(g, p, g, p, c).transpose(0, 2, 1, 3, 4).reshape(g * g, -1)
    feats = patches @ params.projection + params.pos
    return np.concatenate([params.prefix, feats], axis=0)


def stack_occlusion_tokens(weights: np.ndarray, dim: int) -> np.ndarray:
    """Replicate a per-token weight vector across the feature dimension."""
    weights = np.asarray(weights, dtype=np.float64)
    return np.repeat(weights[:, None], dim, axis=1)
