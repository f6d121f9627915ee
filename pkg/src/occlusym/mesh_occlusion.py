"""Multi-view-consistent contact occlusions on triangle meshes.

A connected patch of triangles is grown by a random walk until it holds a
target fraction of the surface area; rendering that patch in a distinct
"color" (triangle ids) from orbit cameras yields occlusion masks that agree
across views because they come from actual geometry.

The renderer is a plain z-buffered perspective rasterizer: pixel-center
coverage tests with a top-left fill rule, perspective-correct depth, no
back-face culling, no anti-aliasing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .io import read_obj


@dataclass(frozen=True)
class TriMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64 vertex indices

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {v.shape}")
        if t.ndim != 2 or t.shape[1] != 3 or len(t) == 0:
            raise ValueError("need at least one triangle of 3 vertex indices")
        if t.min() < 0 or t.max() >= len(v):
            raise ValueError("triangle index out of range")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "triangles", t)


@dataclass(frozen=True)
class Camera:
    """Orbit camera looking at the origin, +Z up, square image."""

    radius: float = 2.0
    yaw: float = 0.0  # degrees
    pitch: float = 30.0  # degrees
    fov_y: float = 40.0  # degrees
    image_size: int = 128

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("camera radius must be positive")
        if not 0.0 < self.fov_y < 180.0:
            raise ValueError("fov_y must be in (0, 180) degrees")


@dataclass(frozen=True)
class TriangleSelection:
    selected: frozenset  # triangle ids
    achieved_ratio: float  # selected area / total area
    exhausted: bool = False  # target unreachable within the seed's component


def load_obj(path) -> TriMesh:
    vertices, triangles = read_obj(path)
    return TriMesh(vertices, triangles)


def normalize_unit_cube(mesh: TriMesh) -> TriMesh:
    """Center the bounding box at the origin and scale the longest axis to 1."""
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    center = (lo + hi) / 2.0
    extent = float((hi - lo).max())
    if extent == 0.0:
        raise ValueError("mesh has zero extent")
    return TriMesh((mesh.vertices - center) / extent, mesh.triangles)


def triangle_areas(mesh: TriMesh) -> np.ndarray:
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)


# ---------------------------------------------------------------------------
# simple procedural meshes (handy for demos and deterministic tests)


def make_tetrahedron() -> TriMesh:
    v = np.array(
        [[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64
    ) / np.sqrt(3.0)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]], dtype=np.int64)
    return TriMesh(v, f)


def make_cube() -> TriMesh:
    corners = np.array(
        [[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)],
        dtype=np.float64,
    )
    quads = [
        (0, 1, 3, 2), (4, 6, 7, 5),  # x- x+
        (0, 4, 5, 1), (2, 3, 7, 6),  # y- y+
        (0, 2, 6, 4), (1, 5, 7, 3),  # z- z+
    ]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return TriMesh(corners, np.array(faces, dtype=np.int64))


def make_icosphere(subdivisions: int = 1) -> TriMesh:
    """Unit icosphere: icosahedron with each triangle 4-way subdivided
    `subdivisions` times, vertices re-projected to the sphere. 20 * 4**s faces.
    """
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = [tuple(v) for v in verts]
    for _ in range(subdivisions):
        vert_index = {v: i for i, v in enumerate(verts)}
        midpoint_cache: dict = {}

        def midpoint(i, j):
            key = (min(i, j), max(i, j))
            if key in midpoint_cache:
                return midpoint_cache[key]
            m = (np.array(verts[i]) + np.array(verts[j])) / 2.0
            m = tuple(m / np.linalg.norm(m))
            idx = vert_index.setdefault(m, len(verts))
            if idx == len(verts):
                verts.append(m)
            midpoint_cache[key] = idx
            return idx

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return TriMesh(np.array(verts, dtype=np.float64), np.array(faces, dtype=np.int64))


# ---------------------------------------------------------------------------
# adjacency + random-walk selection


def build_adjacency(mesh: TriMesh) -> list[list[int]]:
    """Neighbor lists by shared (unordered) edge, indexed by triangle id."""
    edge_tris: dict[tuple[int, int], list[int]] = {}
    for tid, (a, b, c) in enumerate(mesh.triangles):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (int(min(u, v)), int(max(u, v)))
            edge_tris.setdefault(key, []).append(tid)
    neighbors: list[set[int]] = [set() for _ in range(len(mesh.triangles))]
    for tris in edge_tris.values():
        for i in tris:
            for j in tris:
                if i != j:
                    neighbors[i].add(j)
    return [sorted(n) for n in neighbors]


def random_walk_select(mesh: TriMesh, target_ratio: float, seed: int) -> TriangleSelection:
    """Grow one edge-connected triangle patch to a target area fraction.

    Starts from a random non-degenerate triangle and repeatedly absorbs a
    uniformly random unselected neighbor of the current patch until the
    selected surface area reaches target_ratio of the total, or the seed's
    connected component is exhausted (reported via `exhausted`).
    """
    if not 0.0 < target_ratio < 1.0:
        raise ValueError(f"target_ratio must be in (0, 1), got {target_ratio}")
    areas = triangle_areas(mesh)
    total = float(areas.sum())
    if total <= 0.0:
        raise ValueError("mesh has no triangle with positive area")
    rng = np.random.default_rng(seed)
    adjacency = build_adjacency(mesh)

    candidates = np.flatnonzero(areas > 0.0)
    start = int(candidates[rng.integers(len(candidates))])
    selected = {start}
    area = float(areas[start])
    frontier = sorted(set(adjacency[start]) - selected)
    while area / total < target_ratio and frontier:
        pick = frontier[rng.integers(len(frontier))]
        selected.add(pick)
        area += float(areas[pick])
        grown = set(frontier) | set(adjacency[pick])
        frontier = sorted(grown - selected)
    return TriangleSelection(
        selected=frozenset(selected),
        achieved_ratio=area / total,
        exhausted=area / total < target_ratio,
    )


# ---------------------------------------------------------------------------
# cameras


def camera_basis(cam: Camera):
    """World position and orthonormal (right, up, forward) of an orbit camera."""
    yaw = np.deg2rad(cam.yaw)
    pitch = np.deg2rad(cam.pitch)
    pos = cam.radius * np.array(
        [np.cos(pitch) * np.cos(yaw), np.cos(pitch) * np.sin(yaw), np.sin(pitch)]
    )
    forward = -pos / np.linalg.norm(pos)
    world_up = np.array([0.0, 0.0, 1.0])
    right = np.cross(forward, world_up)
    nr = np.linalg.norm(right)
    if nr < 1e-12:  # looking straight down/up; pick an arbitrary right
        right = np.array([1.0, 0.0, 0.0])
    else:
        right /= nr
    up = np.cross(right, forward)
    return pos, right, up, forward


def orbit_cameras(
    n: int,
    radius: float = 2.0,
    fov_y: float = 40.0,
    pitch: float = 30.0,
    yaw_start: float = 0.0,
    image_size: int = 128,
) -> list[Camera]:
    """n cameras evenly spaced in yaw from yaw_start, all looking at the origin."""
    if n < 1:
        raise ValueError("need at least one camera")
    return [
        Camera(radius=radius, yaw=yaw_start + 360.0 * i / n, pitch=pitch,
               fov_y=fov_y, image_size=image_size)
        for i in range(n)
    ]


def project_points(points: np.ndarray, cam: Camera):
    """Perspective-project world points to pixel coordinates.

    Returns (px, py, depth): pixel x/y of each point and its forward distance
    from the camera. Pixel (0, 0) is the top-left corner; pixel centers sit
    at half-integer coordinates.
    """
    pos, right, up, forward = camera_basis(cam)
    rel = points - pos
    x = rel @ right
    y = rel @ up
    z = rel @ forward
    tan_half = np.tan(np.deg2rad(cam.fov_y) / 2.0)
    s = cam.image_size
    with np.errstate(divide="ignore", invalid="ignore"):
        u = (x / z) / tan_half
        v = (y / z) / tan_half
    px = (u + 1.0) / 2.0 * s
    py = (1.0 - v) / 2.0 * s
    return px, py, z


def camera_rays(cam: Camera):
    """Ray origins and unit directions through every pixel center.

    Returns (origin (3,), dirs (image_size**2, 3)) in row-major pixel order.
    """
    pos, right, up, forward = camera_basis(cam)
    s = cam.image_size
    tan_half = np.tan(np.deg2rad(cam.fov_y) / 2.0)
    centers = (np.arange(s, dtype=np.float64) + 0.5) / s
    u = centers * 2.0 - 1.0  # pixel x -> [-1, 1]
    v = 1.0 - centers * 2.0  # pixel y -> [1, -1] (row 0 on top)
    uu, vv = np.meshgrid(u, v)
    dirs = (
        forward[None, :]
        + (uu.reshape(-1, 1) * tan_half) * right[None, :]
        + (vv.reshape(-1, 1) * tan_half) * up[None, :]
    )
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return pos, dirs


# ---------------------------------------------------------------------------
# z-buffered rasterization


def _is_top_left(ax, ay, bx, by):
    # y grows downward; interior lies on the positive side of each edge
    return (ay == by and bx > ax) or (by < ay)


def render_triangle_ids(mesh: TriMesh, cam: Camera) -> np.ndarray:
    """Rasterize the mesh; returns the front-most triangle id per pixel (-1
    where nothing projects). Triangles crossing the near plane (radius/100)
    are skipped; the orbit protocol keeps normalized meshes far inside it.
    """
    s = cam.image_size
    if s <= 0:
        raise ValueError("image_size must be positive")
    near = cam.radius / 100.0
    px, py, z = project_points(mesh.vertices, cam)
    ids = np.full((s, s), -1, dtype=np.int64)
    depth = np.full((s, s), np.inf, dtype=np.float32)

    for tid, (i0, i1, i2) in enumerate(mesh.triangles):
        zs = (z[i0], z[i1], z[i2])
        if min(zs) <= near:
            continue
        xs = np.array([px[i0], px[i1], px[i2]])
        ys = np.array([py[i0], py[i1], py[i2]])
        # orient so the edge functions are >= 0 inside (no back-face culling)
        area2 = (xs[1] - xs[0]) * (ys[2] - ys[0]) - (ys[1] - ys[0]) * (xs[2] - xs[0])
        if area2 == 0.0:
            continue
        order = (0, 1, 2) if area2 > 0 else (0, 2, 1)
        vx, vy = xs[list(order)], ys[list(order)]
        vz = np.array([zs[order[0]], zs[order[1]], zs[order[2]]])

        x_lo = max(int(np.floor(vx.min() - 0.5)), 0)
        x_hi = min(int(np.ceil(vx.max() - 0.5)) + 1, s)
        y_lo = max(int(np.floor(vy.min() - 0.5)), 0)
        y_hi = min(int(np.ceil(vy.max() - 0.5)) + 1, s)
        if x_lo >= x_hi or y_lo >= y_hi:
            continue
        cx = np.arange(x_lo, x_hi, dtype=np.float64) + 0.5
        cy = np.arange(y_lo, y_hi, dtype=np.float64) + 0.5
        gx, gy = np.meshgrid(cx, cy)

        inside = np.ones(gx.shape, dtype=bool)
        edges = []
        for a, b in ((0, 1), (1, 2), (2, 0)):
            # cross(b - a, p - a): positive on the interior side
            e = (vx[b] - vx[a]) * (gy - vy[a]) - (vy[b] - vy[a]) * (gx - vx[a])
            edges.append(e)
            if _is_top_left(vx[a], vy[a], vx[b], vy[b]):
                inside &= e >= 0.0
            else:
                inside &= e > 0.0
        if not inside.any():
            continue
        # barycentric weights from the opposite edge functions
        w0 = edges[1] / abs(area2)
        w1 = edges[2] / abs(area2)
        w2 = edges[0] / abs(area2)
        # perspective-correct depth: interpolate 1/z linearly in screen space
        inv_z = w0 / vz[0] + w1 / vz[1] + w2 / vz[2]
        with np.errstate(divide="ignore"):
            d = (1.0 / inv_z).astype(np.float32)

        tile_depth = depth[y_lo:y_hi, x_lo:x_hi]
        tile_ids = ids[y_lo:y_hi, x_lo:x_hi]
        win = inside & (d < tile_depth)
        tile_depth[win] = d[win]
        tile_ids[win] = tid
    return ids


def render_masks(mesh: TriMesh, sel: TriangleSelection, cam: Camera):
    """Object and occlusion masks from one viewpoint.

    obj marks pixels where any triangle is front-most; occ marks pixels whose
    front-most triangle belongs to the selection, so occ is a subset of obj
    and the view-wise visible mask is obj AND NOT occ.
    """
    ids = render_triangle_ids(mesh, cam)
    obj = ids >= 0
    if sel.selected:
        sel_ids = np.fromiter(sel.selected, dtype=np.int64)
        occ = obj & np.isin(ids, sel_ids)
    else:
        occ = np.zeros_like(obj)
    return obj, occ
