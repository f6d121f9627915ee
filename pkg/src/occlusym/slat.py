"""Sparse voxel latents: occupancy grids, procedural toy solids, the exact
stage-1 token codec and surface (active) voxel extraction.

Grids are (N, N, N) boolean numpy arrays indexed [x, y, z]; voxel (i, j, k)
has its center at ((i+0.5)/N, (j+0.5)/N, (k+0.5)/N) in the unit cube.
"""

from __future__ import annotations

import numpy as np

TOY_FAMILIES = ("box", "sphere", "union2", "ell")

# toy solids stay within the central 80% of the grid
_LO, _HI = 0.1, 0.9


def _voxel_centers(n: int):
    c = (np.arange(n, dtype=np.float64) + 0.5) / n
    return np.meshgrid(c, c, c, indexing="ij")


def _solid_sphere(n, center, radius):
    xx, yy, zz = _voxel_centers(n)
    return (xx - center[0]) ** 2 + (yy - center[1]) ** 2 + (zz - center[2]) ** 2 <= radius**2


def _solid_box(n, lo, hi):
    xx, yy, zz = _voxel_centers(n)
    return (
        (xx >= lo[0]) & (xx <= hi[0])
        & (yy >= lo[1]) & (yy <= hi[1])
        & (zz >= lo[2]) & (zz <= hi[2])
    )


def _solid_ellipsoid(n, center, axes):
    if min(axes) <= 0:
        return np.zeros((n, n, n), dtype=bool)
    xx, yy, zz = _voxel_centers(n)
    return (
        ((xx - center[0]) / axes[0]) ** 2
        + ((yy - center[1]) / axes[1]) ** 2
        + ((zz - center[2]) / axes[2]) ** 2
        <= 1.0
    )


def gen_toy_shape(family: str, n: int, seed: int, params: dict | None = None) -> np.ndarray:
    """Deterministic procedural solid occupancy for one toy shape.

    family is one of "box", "sphere", "union2" (two overlapping spheres),
    "ell" (axis-aligned ellipsoid). Geometry is drawn from the seed unless
    pinned through `params` (keys: center/radius/lo/hi/axes/center2/radius2).
    All solids fit inside the central 80% of the grid.
    """
    if family not in TOY_FAMILIES:
        raise ValueError(f"unknown family {family!r}, expected one of {TOY_FAMILIES}")
    if n < 8:
        raise ValueError(f"grid resolution must be >= 8, got {n}")
    params = params or {}
    rng = np.random.default_rng(seed)
    span = _HI - _LO

    if family == "sphere":
        radius = params.get("radius", rng.uniform(0.12, 0.3) * span)
        if radius < 0:
            raise ValueError("radius must be >= 0")
        margin = min(radius, span / 2)
        center = params.get(
            "center", rng.uniform(_LO + margin, _HI - margin, size=3)
        )
        return _solid_sphere(n, np.asarray(center), radius)

    if family == "box":
        half = params.get("half", rng.uniform(0.1, 0.35, size=3) * span / 2 + 0.05)
        center = rng.uniform(_LO + np.max(half), _HI - np.max(half), size=3)
        lo = params.get("lo", center - half)
        hi = params.get("hi", center + half)
        lo, hi = np.asarray(lo, dtype=np.float64), np.asarray(hi, dtype=np.float64)
        if np.any(hi < lo):
            raise ValueError("box needs lo <= hi")
        return _solid_box(n, lo, hi)

    if family == "ell":
        axes = params.get("axes", rng.uniform(0.08, 0.3, size=3) * span)
        margin = float(np.max(axes))
        center = params.get(
            "center", rng.uniform(_LO + min(margin, span / 2), _HI - min(margin, span / 2), size=3)
        )
        return _solid_ellipsoid(n, np.asarray(center), np.asarray(axes, dtype=np.float64))

    # union2: two overlapping spheres
    r1 = params.get("radius", rng.uniform(0.1, 0.22) * span)
    c1 = params.get("center", rng.uniform(_LO + r1, _HI - r1, size=3))
    r2 = params.get("radius2", rng.uniform(0.1, 0.22) * span)
    # second center near the first so the union stays connected
    offset = rng.uniform(-1.0, 1.0, size=3)
    offset *= (r1 + r2) * 0.6 / max(np.linalg.norm(offset), 1e-9)
    c2 = params.get("center2", np.clip(np.asarray(c1) + offset, _LO + r2, _HI - r2))
    return _solid_sphere(n, np.asarray(c1), r1) | _solid_sphere(n, np.asarray(c2), r2)


def encode_stage1(grid: np.ndarray, r: int) -> np.ndarray:
    """Tokenize an occupancy grid into (r**3, (N/r)**3) occupancy fractions.

    Cell (a, b, c) of the r-grid covers the (N/r)^3 voxels under it; its
    token lists those voxels' occupancies (each sub-block is one voxel) in
    local C order. The encoding is an exact reshape, so decode inverts it.
    """
    grid = np.asarray(grid, dtype=bool)
    n = grid.shape[0]
    if grid.shape != (n, n, n):
        raise ValueError(f"grid must be cubic, got {grid.shape}")
    if r <= 0 or n % r != 0:
        raise ValueError(f"latent resolution {r} must divide grid resolution {n}")
    s = n // r
    cells = grid.reshape(r, s, r, s, r, s).transpose(0, 2, 4, 1, 3, 5)
    return cells.reshape(r**3, s**3).astype(np.float64)


def decode_stage1(tokens: np.ndarray, n: int, threshold: float = 0.5) -> np.ndarray:
    """Invert encode_stage1: sub-block occupied iff its fraction >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    tokens = np.asarray(tokens, dtype=np.float64)
    r = round(len(tokens) ** (1.0 / 3.0))
    if r**3 != len(tokens):
        raise ValueError(f"token count {len(tokens)} is not a cube")
    s = n // r
    if s**3 != tokens.shape[1] or n % r != 0:
        raise ValueError(
            f"tokens of width {tokens.shape[1]} do not tile an N={n} grid at r={r}"
        )
    occ = tokens >= threshold
    return (
        occ.reshape(r, r, r, s, s, s).transpose(0, 3, 1, 4, 2, 5).reshape(n, n, n)
    )


def active_voxels(grid: np.ndarray) -> np.ndarray:
    """Positions of surface voxels: occupied with an unoccupied 6-neighbor.

    Out-of-bounds neighbors count as unoccupied. Returns (L, 3) int64,
    lexicographically sorted.
    """
    grid = np.asarray(grid, dtype=bool)
    padded = np.pad(grid, 1, constant_values=False)
    interior = (
        padded[:-2, 1:-1, 1:-1] & padded[2:, 1:-1, 1:-1]
        & padded[1:-1, :-2, 1:-1] & padded[1:-1, 2:, 1:-1]
        & padded[1:-1, 1:-1, :-2] & padded[1:-1, 1:-1, 2:]
    )
    surface = grid & ~interior
    return np.argwhere(surface).astype(np.int64)


def sparse_latent_from_grid(grid: np.ndarray):
    """Toy per-voxel features for the surface voxels of a grid.

    Feature vector (8 wide): own occupancy (always 1), the six neighbor
    occupancies (x-, x+, y-, y+, z-, z+), and the occupied fraction of the
    3x3x3 neighborhood. Positions come from active_voxels and stay sorted.
    """
    grid = np.asarray(grid, dtype=bool)
    pos = active_voxels(grid)
    if len(pos) == 0:
        return pos, np.zeros((0, 8), dtype=np.float64)
    padded = np.pad(grid, 1, constant_values=False).astype(np.float64)
    x, y, z = pos[:, 0] + 1, pos[:, 1] + 1, pos[:, 2] + 1
    feats = np.empty((len(pos), 8), dtype=np.float64)
    feats[:, 0] = 1.0
    feats[:, 1] = padded[x - 1, y, z]
    feats[:, 2] = padded[x + 1, y, z]
    feats[:, 3] = padded[x, y - 1, z]
    feats[:, 4] = padded[x, y + 1, z]
    feats[:, 5] = padded[x, y, z - 1]
    feats[:, 6] = padded[x, y, z + 1]
    neighborhood = sum(
        padded[x + dx, y + dy, z + dz]
        for dx in (-1, 0, 1)
        for dy in (-1, 0, 1)
        for dz in (-1, 0, 1)
    )
    feats[:, 7] = neighborhood / 27.0
    return pos, feats


def voxel_iou(a: np.ndarray, b: np.ndarray) -> float:
    """Intersection over union of two same-resolution grids; 1.0 when both empty."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"grid shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union
