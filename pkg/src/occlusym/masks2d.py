"""Random 2D occlusion masks and boolean mask composition.

Masks are boolean numpy arrays of shape (height, width), row major. A set
pixel means "covered by an occluder" (occlusion masks) or "on the object"
(object masks). Rasterization tests pixel centers, so masks are strictly
binary with no anti-aliasing.

All randomness flows through numpy's seeded PCG64 generator
(np.random.default_rng), which is bit-reproducible across platforms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Mask = np.ndarray  # (H, W) bool


@dataclass(frozen=True)
class Line:
    """Thick line segment; covers pixels within thickness/2 of the segment."""

    x0: float
    y0: float
    x1: float
    y1: float
    thickness: float


@dataclass(frozen=True)
class Circle:
    cx: float
    cy: float
    radius: float


@dataclass(frozen=True)
class Ellipse:
    """Filled rotated ellipse with semi-axes (a, b) and rotation angle (radians)."""

    cx: float
    cy: float
    a: float
    b: float
    angle: float


@dataclass(frozen=True)
class Rect:
    """Axis-aligned filled rectangle, expanded by `grow` pixels on every side.

    Growing the bounds is exactly morphological dilation with a square
    structuring element of radius `grow`, since the rectangle is axis aligned.
    """

    x0: float
    y0: float
    x1: float
    y1: float
    grow: float = 0.0


@dataclass(frozen=True)
class OcclusionParams:
    """Shape counts and size ranges for the random occlusion generator.

    Count ranges are inclusive (lo, hi) pairs. Size ranges default to
    fractions of the shorter raster side (resolved per call): thickness
    1%..5%, radii / semi-axes 2%..25%, rectangle sides 5%..50%, capping every
    shape at half the shorter side. dilation_radius defaults to 4 pixels at a
    512-wide short side, scaled proportionally.
    """

    n_lines: tuple[int, int] = (1, 3)
    n_circles: tuple[int, int] = (1, 3)
    n_ellipses: tuple[int, int] = (1, 3)
    n_rects: tuple[int, int] = (3, 7)
    dilation_radius: float | None = None
    line_thickness: tuple[float, float] | None = None
    radius_range: tuple[float, float] | None = None
    rect_side: tuple[float, float] | None = None

    def validate(self) -> None:
        for name in ("n_lines", "n_circles", "n_ellipses", "n_rects"):
            lo, hi = getattr(self, name)
            if lo < 0 or lo > hi:
                raise ValueError(f"{name}: need 0 <= lo <= hi, got ({lo}, {hi})")
        for name in ("line_thickness", "radius_range", "rect_side"):
            rg = getattr(self, name)
            if rg is not None and (rg[0] < 0 or rg[0] > rg[1]):
                raise ValueError(f"{name}: need 0 <= lo <= hi, got {rg}")
        if self.dilation_radius is not None and self.dilation_radius < 0:
            raise ValueError("dilation_radius must be >= 0")

    def resolved(self, width: int, height: int):
        """Concrete (thickness, radius, rect_side, dilation) for this raster."""
        s = min(width, height)
        thickness = self.line_thickness or (max(1.0, 0.01 * s), max(2.0, 0.05 * s))
        radius = self.radius_range or (max(1.0, 0.02 * s), 0.25 * s)
        rect_side = self.rect_side or (max(2.0, 0.05 * s), 0.5 * s)
        dilation = self.dilation_radius
        if dilation is None:
            dilation = round(4.0 * s / 512.0)
        return thickness, radius, rect_side, float(dilation)


def _pixel_centers(width: int, height: int):
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    return np.meshgrid(xs, ys)  # each (H, W)


def rasterize_shape(shape, width: int, height: int) -> Mask:
    """Rasterize one shape: a pixel is set iff its center lies inside."""
    xx, yy = _pixel_centers(width, height)
    if isinstance(shape, Line):
        dx, dy = shape.x1 - shape.x0, shape.y1 - shape.y0
        len2 = dx * dx + dy * dy
        px, py = xx - shape.x0, yy - shape.y0
        if len2 == 0.0:
            d2 = px * px + py * py
        else:
            t = np.clip((px * dx + py * dy) / len2, 0.0, 1.0)
            d2 = (px - t * dx) ** 2 + (py - t * dy) ** 2
        return d2 <= (shape.thickness / 2.0) ** 2
    if isinstance(shape, Circle):
        return (xx - shape.cx) ** 2 + (yy - shape.cy) ** 2 <= shape.radius**2
    if isinstance(shape, Ellipse):
        if shape.a == 0.0 or shape.b == 0.0:
            return np.zeros((height, width), dtype=bool)
        c, s = np.cos(shape.angle), np.sin(shape.angle)
        u = (xx - shape.cx) * c + (yy - shape.cy) * s
        v = -(xx - shape.cx) * s + (yy - shape.cy) * c
        return (u / shape.a) ** 2 + (v / shape.b) ** 2 <= 1.0
    if isinstance(shape, Rect):
        g = shape.grow
        return (
            (xx >= shape.x0 - g)
            & (xx <= shape.x1 + g)
            & (yy >= shape.y0 - g)
            & (yy <= shape.y1 + g)
        )
    raise TypeError(f"unknown shape {type(shape).__name__}")


def sample_shapes(width: int, height: int, params: OcclusionParams, seed: int) -> list:
    """Sample the shape list for one occlusion mask.

    Draw order is fixed (lines, circles, ellipses, rectangles; count before
    per-shape parameters) so a seed always maps to the same shapes.
    """
    if width <= 0 or height <= 0:
        raise ValueError(f"raster dimensions must be positive, got {width}x{height}")
    params.validate()
    thickness, radius, rect_side, dilation = params.resolved(width, height)
    rng = np.random.default_rng(seed)
    shapes: list = []

    n = rng.integers(params.n_lines[0], params.n_lines[1] + 1)
    for _ in range(n):
        x0, x1 = rng.uniform(0, width, size=2)
        y0, y1 = rng.uniform(0, height, size=2)
        t = rng.uniform(*thickness)
        shapes.append(Line(x0, y0, x1, y1, t))

    n = rng.integers(params.n_circles[0], params.n_circles[1] + 1)
    for _ in range(n):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        shapes.append(Circle(cx, cy, rng.uniform(*radius)))

    n = rng.integers(params.n_ellipses[0], params.n_ellipses[1] + 1)
    for _ in range(n):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        a, b = rng.uniform(*radius, size=2)
        shapes.append(Ellipse(cx, cy, a, b, rng.uniform(0, np.pi)))

    n = rng.integers(params.n_rects[0], params.n_rects[1] + 1)
    for _ in range(n):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        w, h = rng.uniform(*rect_side, size=2)
        shapes.append(Rect(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, dilation))
    return shapes


def gen_random_occlusion(
    width: int, height: int, params: OcclusionParams | None = None, seed: int = 0
) -> Mask:
    """Union of random lines, circles, ellipses and dilated rectangles.

    Pure function of (width, height, params, seed).
    """
    params = params or OcclusionParams()
    mask = np.zeros((height, width), dtype=bool)
    for shape in sample_shapes(width, height, params, seed):
        mask |= rasterize_shape(shape, width, height)
    return mask


def visible_mask(obj: Mask, occ: Mask) -> Mask:
    """Pixels of the object not covered by the occluder: obj AND NOT occ."""
    obj = np.asarray(obj, dtype=bool)
    occ = np.asarray(occ, dtype=bool)
    if obj.shape != occ.shape:
        raise ValueError(f"mask shapes differ: {obj.shape} vs {occ.shape}")
    return obj & ~occ


def mask_ratio(mask: Mask) -> float:
    """Fraction of set pixels."""
    mask = np.asarray(mask, dtype=bool)
    return float(np.count_nonzero(mask)) / mask.size


def composite_levels(obj: Mask, occ: Mask) -> np.ndarray:
    """Three-level uint8 composite: visible 255, occluded 128, background 0.

    Occluded pixels (occ set) take precedence; visible means object and not
    occluded, so the two levels never collide.
    """
    vis = visible_mask(obj, occ)
    out = np.zeros(vis.shape, dtype=np.uint8)
    out[np.asarray(occ, dtype=bool)] = 128
    out[vis] = 255
    return out
