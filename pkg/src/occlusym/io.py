"""File formats: PGM masks, OBJ meshes, PLY point clouds, packed voxel grids,
token dumps and the versioned checkpoint container.

Everything here writes deterministic bytes for fixed inputs (no timestamps),
and writes are atomic (temp file + rename) so interrupted runs never leave
half-written artifacts behind.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

CHECKPOINT_MAGIC = b"OCCLUSYM"
CHECKPOINT_VERSION = 1


def atomic_write_bytes(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# PGM (binary, P5, maxval 255)


def write_pgm(path, image: np.ndarray) -> None:
    """Write a P5 PGM. Boolean arrays map to 0/255, uint8 passes through."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2D array, got shape {image.shape}")
    if image.dtype == bool:
        image = np.where(image, np.uint8(255), np.uint8(0))
    elif image.dtype != np.uint8:
        raise ValueError(f"PGM needs bool or uint8 data, got {image.dtype}")
    h, w = image.shape
    header = f"P5\n{w} {h}\n255\n".encode("ascii")
    atomic_write_bytes(path, header + image.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P5"):
        raise ValueError(f"{path}: not a binary PGM (P5)")
    # header = magic, width, height, maxval as whitespace-separated tokens
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":  # comment line
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return raster.reshape(h, w).copy()


def read_pgm_mask(path) -> np.ndarray:
    """Read a PGM written from a boolean mask; any nonzero pixel is set."""
    return read_pgm(path) > 0


# ---------------------------------------------------------------------------
# OBJ meshes (ASCII, v/f records only; polygons fan-triangulated)


def read_obj(path):
    """Load vertices and triangles from an ASCII OBJ file.

    Only `v` and `f` records are used. Faces may carry `v/vt/vn` slashes and
    negative (relative) indices; polygons with more than 3 vertices are
    fan-triangulated around their first vertex.
    """
    vertices: list[list[float]] = []
    triangles: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            if parts[0] == "v" and len(parts) >= 4:
                vertices.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f" and len(parts) >= 4:
                idx = []
                for tok in parts[1:]:
                    i = int(tok.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(vertices) + i)
                for a, b in zip(idx[1:-1], idx[2:]):
                    triangles.append((idx[0], a, b))
    if not triangles:
        raise ValueError(f"{path}: no faces found")
    return np.asarray(vertices, dtype=np.float64), np.asarray(triangles, dtype=np.int64)


def write_obj(path, vertices: np.ndarray, triangles: np.ndarray) -> None:
    # repr of python floats is shortest-exact, so the round trip is lossless
    lines = [
        f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}"
        for v in np.asarray(vertices, dtype=np.float64)
    ]
    lines += [f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}" for t in np.asarray(triangles)]
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# PLY point clouds (ASCII, float x/y/z)


def write_ply(path, points: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValueError(f"point cloud must be (n, 3), got {points.shape}")
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(points)}",
        "property float x",
        "property float y",
        "property float z",
        "end_header",
    ]
    body = [f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}" for p in points]
    atomic_write_text(path, "\n".join(header + body) + "\n")


def read_ply(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as f:
        line = f.readline().strip()
        if line != "ply":
            raise ValueError(f"{path}: not a PLY file")
        n = None
        while True:
            line = f.readline()
            if not line:
                raise ValueError(f"{path}: unterminated PLY header")
            line = line.strip()
            if line.startswith("format") and "ascii" not in line:
                raise ValueError(f"{path}: only ascii PLY is supported")
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line == "end_header":
                break
        if n is None:
            raise ValueError(f"{path}: missing vertex element")
        pts = np.empty((n, 3), dtype=np.float64)
        for i in range(n):
            vals = f.readline().split()
            pts[i] = [float(vals[0]), float(vals[1]), float(vals[2])]
    return pts


# ---------------------------------------------------------------------------
# Voxel grids: one-line JSON header + bit-packed occupancy


def write_voxels(path, occupancy: np.ndarray) -> None:
    """Pack an (N, N, N) boolean grid; axes are stored x-major (C order)."""
    occupancy = np.asarray(occupancy, dtype=bool)
    n = occupancy.shape[0]
    if occupancy.shape != (n, n, n):
        raise ValueError(f"occupancy must be cubic, got {occupancy.shape}")
    header = json.dumps({"N": n, "order": "x-major"}, sort_keys=True) + "\n"
    packed = np.packbits(occupancy.reshape(-1))
    atomic_write_bytes(path, header.encode("ascii") + packed.tobytes())


def read_voxels(path) -> np.ndarray:
    with open(path, "rb") as f:
        header = json.loads(f.readline())
        n = int(header["N"])
        packed = np.frombuffer(f.read(), dtype=np.uint8)
    bits = np.unpackbits(packed, count=n**3)
    return bits.reshape(n, n, n).astype(bool)


def write_sparse_latent(path, positions: np.ndarray, features: np.ndarray) -> None:
    """JSON-lines of {"p": [x, y, z], "z": [...]}, one active voxel per line."""
    lines = []
    for p, z in zip(np.asarray(positions), np.asarray(features, dtype=np.float64)):
        lines.append(json.dumps({"p": [int(p[0]), int(p[1]), int(p[2])], "z": list(z)}))
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_sparse_latent(path):
    positions, features = [], []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            positions.append(rec["p"])
            features.append(rec["z"])
    return np.asarray(positions, dtype=np.int64), np.asarray(features, dtype=np.float64)


# ---------------------------------------------------------------------------
# Flat array dumps: little-endian blob + JSON sidecar header


def write_array_dump(path, array: np.ndarray) -> None:
    array = np.ascontiguousarray(array)
    le = array.astype(array.dtype.newbyteorder("<"), copy=False)
    header = {"shape": list(array.shape), "dtype": str(le.dtype), "order": "C"}
    write_json(os.fspath(path) + ".json", header)
    atomic_write_bytes(path, le.tobytes())


def read_array_dump(path) -> np.ndarray:
    with open(os.fspath(path) + ".json", "r", encoding="utf-8") as f:
        header = json.load(f)
    raw = np.fromfile(path, dtype=np.dtype(header["dtype"]))
    return raw.reshape(header["shape"])


# ---------------------------------------------------------------------------
# Checkpoint container: magic, version, JSON manifest, raw little-endian blobs


def save_checkpoint(path, arrays, manifest_extra: dict | None = None) -> None:
    """Serialize named arrays into the single-file checkpoint container.

    `arrays` is an iterable of (name, ndarray); order is preserved. Metadata
    (hyperparameters, seeds, shapes) goes into the JSON manifest.
    """
    entries, blobs = [], []
    for name, arr in arrays:
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "shape": list(arr.shape), "dtype": str(le.dtype)})
        blobs.append(le.tobytes())
    manifest = {"arrays": entries}
    if manifest_extra:
        manifest.update(manifest_extra)
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    head = CHECKPOINT_MAGIC + struct.pack("<IQ", CHECKPOINT_VERSION, len(payload))
    atomic_write_bytes(path, head + payload + b"".join(blobs))


def load_checkpoint(path):
    """Return (manifest_dict, {name: array}) from a checkpoint file."""
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version, mlen = struct.unpack("<IQ", f.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        manifest = json.loads(f.read(mlen))
        arrays = {}
        for entry in manifest["arrays"]:
            dt = np.dtype(entry["dtype"])
            count = int(np.prod(entry["shape"], dtype=np.int64)) if entry["shape"] else 1
            raw = f.read(count * dt.itemsize)
            arrays[entry["name"]] = np.frombuffer(raw, dtype=dt).reshape(entry["shape"]).copy()
    return manifest, arrays
