"""Occupancy grids: mesh voxelization, up-axis rotations, IoU, SCVX files.

The occupancy grid is the universal shape carrier here: scans, CAD models
and predicted masks all live on the same binary lattice. Cells are stored
x-major (x slowest, then y, then z), which is plain C order for an array
indexed ``[x, y, z]``. The up axis is z.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np

SCVX_MAGIC = b"SCVX"
SCVX_VERSION = 1

# Inset (in voxel units) applied when fitting a mesh into the grid, so
# geometry mapped onto the border plane of the usable region cannot touch
# the outermost voxel layer through floating-point coincidence.
_FIT_INSET = 1e-6


class Domain(Enum):
    """What a grid represents; the numeric value is the SCVX wire code."""

    SCAN = 0
    CAD = 1
    MASK = 2


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    """Immutable binary voxel grid with an opaque object id and a domain tag."""

    occupancy: np.ndarray
    object_id: str = ""
    domain: Domain = Domain.SCAN

    def __post_init__(self):
        occ = np.ascontiguousarray(self.occupancy, dtype=bool)
        if occ.ndim != 3 or min(occ.shape) < 1:
            raise ValueError(f"occupancy must be a 3-d array, got shape {occ.shape}")
        occ.setflags(write=False)
        object.__setattr__(self, "occupancy", occ)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.occupancy.shape

    def count(self) -> int:
        """Number of occupied voxels."""
        return int(np.count_nonzero(self.occupancy))

    def is_cubic(self) -> bool:
        x, y, z = self.dims
        return x == y == z

    def with_meta(self, object_id: str | None = None, domain: Domain | None = None) -> "OccupancyGrid":
        """Same voxels, different id/domain tag."""
        return OccupancyGrid(
            self.occupancy,
            object_id if object_id is not None else self.object_id,
            domain if domain is not None else self.domain,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, OccupancyGrid):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.object_id == other.object_id
            and self.domain == other.domain
            and bool(np.array_equal(self.occupancy, other.occupancy))
        )

    def __repr__(self) -> str:
        return (
            f"OccupancyGrid(dims={self.dims}, occupied={self.count()}, "
            f"id={self.object_id!r}, domain={self.domain.name})"
        )


@dataclass(frozen=True)
class TriangleSoup:
    """Raw triangle mesh: vertex positions plus index triples."""

    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        verts = np.ascontiguousarray(self.vertices, dtype=np.float64)
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if verts.ndim != 2 or verts.shape[1] != 3:
            raise ValueError(f"vertices must be (n, 3), got {verts.shape}")
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise ValueError(f"triangles must be (m, 3), got {tris.shape}")
        if tris.shape[0] < 1:
            raise ValueError("mesh has no triangles")
        if tris.size and (tris.min() < 0 or tris.max() >= verts.shape[0]):
            raise ValueError("triangle index out of range")
        verts.setflags(write=False)
        tris.setflags(write=False)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)


def _triangle_box_overlaps(tri: np.ndarray, lows: np.ndarray) -> np.ndarray:
    """Separating-axis test of one triangle against many unit voxel cubes.

    ``tri`` is (3, 3) vertex positions in voxel coordinates, ``lows`` is
    (k, 3) integer lower corners of candidate voxels. Returns a boolean
    mask of voxels the triangle overlaps (touching counts as overlap,
    which is why callers keep geometry strictly inside the usable region).
    """
    v0, v1, v2 = tri
    e0, e1, e2 = v1 - v0, v2 - v1, v0 - v2

    axes = np.empty((13, 3), dtype=np.float64)
    axes[0:3] = np.eye(3)
    # edge x box-axis cross products
    for i, e in enumerate((e0, e1, e2)):
        axes[3 + 3 * i] = (0.0, -e[2], e[1])
        axes[4 + 3 * i] = (e[2], 0.0, -e[0])
        axes[5 + 3 * i] = (-e[1], e[0], 0.0)
    axes[12] = np.cross(e0, e1)

    proj = axes @ tri.T                      # (13, 3) vertex projections
    pmin = proj.min(axis=1)
    pmax = proj.max(axis=1)
    radius = 0.5 * np.abs(axes).sum(axis=1)  # box half-projection, half extent 0.5

    centers = lows + 0.5                     # (k, 3)
    cproj = axes @ centers.T                 # (13, k)
    separated = (pmin[:, None] - cproj > radius[:, None]) | (
        pmax[:, None] - cproj < -radius[:, None]
    )
    return ~separated.any(axis=0)


def voxelize(mesh: TriangleSoup, dims: tuple[int, int, int] = (32, 32, 32)) -> OccupancyGrid:
    """Surface-voxelize a mesh into a grid with a one-voxel empty border.

    The mesh is uniformly scaled and centered so its bounding box fits the
    usable region (everything except the outermost voxel layer); a voxel is
    occupied iff some triangle overlaps its cube.
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 3:
        raise ValueError(f"dims must each be >= 3 to leave an empty border, got {dims}")

    verts = mesh.vertices
    lo = verts.min(axis=0)
    hi = verts.max(axis=0)
    extent = hi - lo
    if not extent.max() > 0.0:
        raise ValueError("degenerate mesh: zero-extent bounding box")

    usable = np.array(dims, dtype=np.float64) - 2.0 - 2.0 * _FIT_INSET
    nonzero = extent > 0.0
    scale = (usable[nonzero] / extent[nonzero]).min()
    grid_center = np.array(dims, dtype=np.float64) / 2.0
    mesh_center = (lo + hi) / 2.0
    coords = (verts - mesh_center) * scale + grid_center

    occ = np.zeros(dims, dtype=bool)
    upper = np.array(dims, dtype=np.int64) - 1
    for tri_idx in mesh.triangles:
        tri = coords[tri_idx]
        vlo = np.clip(np.floor(tri.min(axis=0)).astype(np.int64), 0, upper)
        vhi = np.clip(np.floor(tri.max(axis=0)).astype(np.int64), 0, upper)
        xs, ys, zs = (np.arange(a, b + 1) for a, b in zip(vlo, vhi))
        lows = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1).reshape(-1, 3)
        hit = _triangle_box_overlaps(tri, lows.astype(np.float64))
        sel = lows[hit]
        occ[sel[:, 0], sel[:, 1], sel[:, 2]] = True
    return OccupancyGrid(occ, object_id=mesh_grid_id(mesh), domain=Domain.CAD)


def mesh_grid_id(mesh: TriangleSoup) -> str:
    return f"mesh-{mesh.triangles.shape[0]}tri"


def read_obj(path) -> TriangleSoup:
    """Read a Wavefront OBJ mesh: v and f records, everything else ignored.

    Face tokens may carry texture/normal slots (v, v/vt, v//vn, v/vt/vn) and
    negative (relative) indices; polygons are fan-triangulated.
    """
    vertices: list[tuple[float, ...]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: vertex needs 3 coordinates")
                try:
                    vertices.append(tuple(float(p) for p in parts[1:4]))
                except ValueError:
                    raise ValueError(f"{path}:{lineno}: bad vertex coordinate") from None
            elif parts[0] == "f":
                if len(parts) < 4:
                    raise ValueError(f"{path}:{lineno}: face needs at least 3 vertices")
                idx = []
                for token in parts[1:]:
                    head = token.split("/", 1)[0]
                    try:
                        raw = int(head)
                    except ValueError:
                        raise ValueError(f"{path}:{lineno}: bad face index {token!r}") from None
                    if raw == 0:
                        raise ValueError(f"{path}:{lineno}: face index 0 (indices are 1-based)")
                    idx.append(raw - 1 if raw > 0 else len(vertices) + raw)
                for b, c in zip(idx[1:], idx[2:]):
                    faces.append((idx[0], b, c))
    if not vertices:
        raise ValueError(f"{path}: no vertices found")
    if not faces:
        raise ValueError(f"{path}: no faces found")
    return TriangleSoup(np.asarray(vertices, dtype=np.float64), np.asarray(faces, dtype=np.int64))


@lru_cache(maxsize=64)
def _rotation_lookup(n: int, steps: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest-neighbor source indices for rotating an n^3 grid by steps*30 deg.

    Returns (src_x, src_y, valid) as (n, n) arrays over output (x, y).
    """
    theta = -steps * math.pi / 6.0  # inverse rotation
    c, s = math.cos(theta), math.sin(theta)
    half = n / 2.0
    ox, oy = np.meshgrid(np.arange(n) + 0.5 - half, np.arange(n) + 0.5 - half, indexing="ij")
    sx = np.floor(c * ox - s * oy + half).astype(np.int64)
    sy = np.floor(s * ox + c * oy + half).astype(np.int64)
    valid = (sx >= 0) & (sx < n) & (sy >= 0) & (sy < n)
    return sx, sy, valid


def rotate_up_axis(g: OccupancyGrid, steps: int) -> OccupancyGrid:
    """Rotate grid contents by steps*30 degrees about the vertical (z) axis.

    Resampling is nearest-neighbor on the inverse-rotated cell center;
    samples falling outside the grid are empty. steps must be in 0..11.
    """
    if not 0 <= steps <= 11:
        raise ValueError(f"rotation steps must be in 0..11, got {steps}")
    if not g.is_cubic():
        raise ValueError(f"rotation requires a cubic grid, got dims {g.dims}")
    if steps == 0:
        return g
    n = g.dims[0]
    sx, sy, valid = _rotation_lookup(n, steps)
    out = np.zeros_like(g.occupancy)
    out[valid] = g.occupancy[sx[valid], sy[valid], :]
    return OccupancyGrid(out, g.object_id, g.domain)


def iou(a: OccupancyGrid, b: OccupancyGrid) -> float:
    """Intersection over union of two grids; 1.0 when both are empty."""
    if a.dims != b.dims:
        raise ValueError(f"dim mismatch: {a.dims} vs {b.dims}")
    union = int(np.count_nonzero(a.occupancy | b.occupancy))
    if union == 0:
        return 1.0
    inter = int(np.count_nonzero(a.occupancy & b.occupancy))
    return inter / union


def threshold(
    probabilities: np.ndarray,
    tau: float = 0.5,
    *,
    object_id: str = "",
    domain: Domain = Domain.MASK,
) -> OccupancyGrid:
    """Binarize a dense probability grid: occupied iff value > tau (strict)."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 3:
        raise ValueError(f"probability grid must be 3-d, got shape {probs.shape}")
    if probs.size and (probs.min() < 0.0 or probs.max() > 1.0):
        raise ValueError("probability values must lie in [0, 1]")
    return OccupancyGrid(probs > tau, object_id=object_id, domain=domain)


# --- bit packing shared by the SCVX format and the HTTP grid payload ---

def pack_occupancy(grid: OccupancyGrid) -> bytes:
    """Bit-pack occupancy, x-major order, LSB-first within each byte."""
    return np.packbits(grid.occupancy.reshape(-1), bitorder="little").tobytes()

def unpack_occupancy(data: bytes, dims: tuple[int, int, int]) -> np.ndarray:
    n = dims[0] * dims[1] * dims[2]
    if len(data) != (n + 7) // 8:
        raise ValueError(f"expected {(n + 7) // 8} packed bytes for dims {dims}, got {len(data)}")
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8), count=n, bitorder="little")
    return bits.astype(bool).reshape(dims)


def write_grid(path, grid: OccupancyGrid) -> None:
    """Write a grid in the SCVX format (little-endian, version 1)."""
    ident = grid.object_id.encode("utf-8")
    if len(ident) > 0xFFFF:
        raise ValueError("object id longer than 65535 bytes")
    with open(path, "wb") as fh:
        fh.write(SCVX_MAGIC)
        fh.write(struct.pack("<I", SCVX_VERSION))
        fh.write(struct.pack("<III", *grid.dims))
        fh.write(struct.pack("<B", grid.domain.value))
        fh.write(struct.pack("<H", len(ident)))
        fh.write(ident)
        fh.write(pack_occupancy(grid))


def read_grid(path) -> OccupancyGrid:
    """Read an SCVX grid file written by :func:`write_grid`."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != SCVX_MAGIC:
        raise ValueError(f"{path}: not an SCVX file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != SCVX_VERSION:
        raise ValueError(f"{path}: unsupported SCVX version {version}")
    dims = struct.unpack_from("<III", data, 8)
    (domain_code,) = struct.unpack_from("<B", data, 20)
    (id_len,) = struct.unpack_from("<H", data, 21)
    ident = data[23 : 23 + id_len].decode("utf-8")
    n_bytes = (dims[0] * dims[1] * dims[2] + 7) // 8
    packed = data[23 + id_len : 23 + id_len + n_bytes]
    occ = unpack_occupancy(packed, dims)
    return OccupancyGrid(occ, object_id=ident, domain=Domain(domain_code))
