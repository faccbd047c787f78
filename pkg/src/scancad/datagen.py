"""Procedural scan/CAD pair generator and pair storage.

Stands in for real scan crops: each sample is a clean CAD-style shape
from one of six coarse furniture-ish families, and a degraded scan of it
built by removing a contiguous chunk (partiality), adding a floor plane
and box clutter, and flipping random voxels (sensor noise). Ground-truth
masks fall out of the construction exactly.

Grids are 32^3 with z up; geometry stays inside the one-voxel border the
voxelizer also guarantees.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .voxel import Domain, OccupancyGrid, read_grid, write_grid

CATEGORIES = ("box", "cylinder", "lshape", "table", "chair", "shelf")

GRID = 32

MANIFEST_NAME = "manifest.tsv"


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int
    category: str
    clutter_density: float = 0.4
    dropout_fraction: float = 0.3
    noise_flip_prob: float = 0.02

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}, expected one of {CATEGORIES}")
        for name in ("clutter_density", "dropout_fraction", "noise_flip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class PairedSample:
    scan: OccupancyGrid
    gt_fg: OccupancyGrid
    gt_bg: OccupancyGrid
    cad: OccupancyGrid
    category: str

    @property
    def sample_id(self) -> str:
        return self.scan.object_id

    def validate(self) -> None:
        sid = self.sample_id or "<unnamed>"
        grids = (self.scan, self.gt_fg, self.gt_bg, self.cad)
        if len({g.dims for g in grids}) != 1:
            raise ValueError(f"sample {sid}: grid dimension mismatch")
        fg, bg, scan = self.gt_fg.occupancy, self.gt_bg.occupancy, self.scan.occupancy
        if np.any(fg & bg):
            raise ValueError(f"sample {sid}: gt_fg and gt_bg overlap")
        if not np.array_equal(fg | bg, scan):
            raise ValueError(f"sample {sid}: gt_fg | gt_bg does not cover the scan")


# --- shape families (solid archetypes, bottom resting at z=2) ---

def _cuboid(occ, x0, y0, z0, dx, dy, dz):
    occ[x0 : x0 + dx, y0 : y0 + dy, z0 : z0 + dz] = True


def _centered(rng, extent):
    lo = max(1, (GRID - extent) // 2 + int(rng.integers(-3, 4)))
    return min(max(lo, 1), GRID - 1 - extent)


def _build_box(rng, occ):
    dx, dy, dz = rng.integers(8, 21, size=3)
    _cuboid(occ, _centered(rng, dx), _centered(rng, dy), 2, dx, dy, dz)


def _build_cylinder(rng, occ):
    r = int(rng.integers(4, 10))
    h = int(rng.integers(10, 25))
    cx = _centered(rng, 2 * r + 1) + r
    cy = _centered(rng, 2 * r + 1) + r
    xs, ys = np.meshgrid(np.arange(GRID), np.arange(GRID), indexing="ij")
    disk = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    occ[:, :, 2 : 2 + h] |= disk[:, :, None]


def _build_lshape(rng, occ):
    dx, dy = rng.integers(12, 21, size=2)
    dz = int(rng.integers(12, 25))
    arm = int(rng.integers(4, 8))
    x0, y0 = _centered(rng, dx), _centered(rng, dy)
    _cuboid(occ, x0, y0, 2, arm, dy, dz)       # vertical arm
    _cuboid(occ, x0, y0, 2, dx, dy, arm)       # horizontal arm

def _legs(rng, occ, x0, y0, dx, dy, top, leg):
    for lx in (x0, x0 + dx - leg):
        for ly in (y0, y0 + dy - leg):
            _cuboid(occ, lx, ly, 2, leg, leg, top - 2)


def _build_table(rng, occ):
    dx, dy = rng.integers(14, 27, size=2)
    top = int(rng.integers(10, 18))
    thick = int(rng.integers(3, 6))
    leg = int(rng.integers(3, 6))
    x0, y0 = _centered(rng, dx), _centered(rng, dy)
    _legs(rng, occ, x0, y0, dx, dy, top, leg)
    _cuboid(occ, x0, y0, top, dx, dy, thick)


def _build_chair(rng, occ):
    dx, dy = rng.integers(12, 20, size=2)
    seat = int(rng.integers(6, 12))
    back = int(rng.integers(8, 15))
    leg = int(rng.integers(3, 6))
    x0, y0 = _centered(rng, dx), _centered(rng, dy)
    _legs(rng, occ, x0, y0, dx, dy, seat, leg)
    _cuboid(occ, x0, y0, seat, dx, dy, 3)                    # seat
    _cuboid(occ, x0, y0, seat + 3, 3, dy, back)              # backrest


def _build_shelf(rng, occ):
    dx, dy = rng.integers(14, 22, size=2)
    dz = int(rng.integers(18, 28))
    boards = int(rng.integers(3, 5))
    x0, y0 = _centered(rng, dx), _centered(rng, dy)
    _cuboid(occ, x0, y0, 2, dx, 3, dz)                       # side wall
    _cuboid(occ, x0, y0 + dy - 3, 2, dx, 3, dz)              # side wall
    for level in np.linspace(2, 2 + dz - 3, boards).astype(int):
        _cuboid(occ, x0, y0, int(level), dx, dy, 3)


_BUILDERS = {
    "box": _build_box,
    "cylinder": _build_cylinder,
    "lshape": _build_lshape,
    "table": _build_table,
    "chair": _build_chair,
    "shelf": _build_shelf,
}


def _contiguous_dropout(rng, occ: np.ndarray, fraction: float) -> np.ndarray:
    """Remove exactly round(fraction * count) voxels nearest a random seed voxel."""
    coords = np.argwhere(occ)
    n_drop = int(round(fraction * len(coords)))
    if n_drop == 0:
        return occ.copy()
    center = coords[rng.integers(len(coords))]
    d2 = ((coords - center) ** 2).sum(axis=1)
    order = np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0], d2))
    keep = occ.copy()
    drop = coords[order[:n_drop]]
    keep[drop[:, 0], drop[:, 1], drop[:, 2]] = False
    return keep


def generate(spec: SyntheticSpec, sample_id: str | None = None) -> PairedSample:
    """Deterministic pair construction; a pure function of the spec."""
    rng = np.random.default_rng(spec.seed)
    cad = np.zeros((GRID, GRID, GRID), dtype=bool)
    _BUILDERS[spec.category](rng, cad)

    partial = _contiguous_dropout(rng, cad, spec.dropout_fraction)

    clutter = np.zeros_like(cad)
    if spec.clutter_density > 0:
        clutter[1:-1, 1:-1, 1] = True  # floor plane
        for _ in range(int(round(spec.clutter_density * 6))):
            bx, by, bz = rng.integers(2, 6, size=3)
            cx = int(rng.integers(1, GRID - 1 - bx))
            cy = int(rng.integers(1, GRID - 1 - by))
            _cuboid(clutter, cx, cy, 2, bx, by, bz)

    scan = partial | clutter
    if spec.noise_flip_prob > 0:
        flips = rng.uniform(size=scan.shape) < spec.noise_flip_prob
        flips[0, :, :] = flips[-1, :, :] = False  # keep the border empty
        flips[:, 0, :] = flips[:, -1, :] = False
        flips[:, :, 0] = flips[:, :, -1] = False
        scan = scan ^ flips

    gt_fg = partial & scan
    gt_bg = scan & ~gt_fg
    sid = sample_id if sample_id is not None else f"{spec.category}_{spec.seed:010d}"
    sample = PairedSample(
        scan=OccupancyGrid(scan, object_id=sid, domain=Domain.SCAN),
        gt_fg=OccupancyGrid(gt_fg, object_id=sid, domain=Domain.MASK),
        gt_bg=OccupancyGrid(gt_bg, object_id=sid, domain=Domain.MASK),
        cad=OccupancyGrid(cad, object_id=sid, domain=Domain.CAD),
        category=spec.category,
    )
    sample.validate()
    return sample


def generate_dataset(
    n_pairs: int,
    seed: int,
    *,
    categories=CATEGORIES,
    clutter_density: float = 0.4,
    dropout_fraction: float = 0.3,
    noise_flip_prob: float = 0.02,
) -> list[PairedSample]:
    """Round-robin over categories with per-sample seeds derived from one master."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be positive")
    seeds = np.random.default_rng(seed).integers(0, 2**48, size=n_pairs)
    samples = []
    for i in range(n_pairs):
        cat = categories[i % len(categories)]
        spec = SyntheticSpec(
            seed=int(seeds[i]),
            category=cat,
            clutter_density=clutter_density,
            dropout_fraction=dropout_fraction,
            noise_flip_prob=noise_flip_prob,
        )
        samples.append(generate(spec, sample_id=f"{cat}_{i:04d}"))
    return samples


# --- storage: SCVX quadruples plus a tab-separated manifest ---

_MEMBERS = ("scan", "fg", "bg", "cad")


def save_pairs(directory, samples: list[PairedSample], hints: dict[str, str] | None = None) -> str:
    """Write one SCVX file per member and a manifest; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    lines = []
    for s in samples:
        names = {m: f"{s.sample_id}_{m}.scvx" for m in _MEMBERS}
        for member, grid in zip(_MEMBERS, (s.scan, s.gt_fg, s.gt_bg, s.cad)):
            write_grid(os.path.join(directory, names[member]), grid)
        cols = [s.sample_id, s.category, names["scan"], names["fg"], names["bg"], names["cad"]]
        if hints and s.sample_id in hints:
            cols.append(hints[s.sample_id])
        lines.append("\t".join(cols))
    manifest = os.path.join(directory, MANIFEST_NAME)
    with open(manifest, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return manifest


def load_pairs(directory) -> list[tuple[PairedSample, str | None]]:
    """Load samples from a manifest directory, validating mask invariants.

    Returns (PairedSample, hint_url_or_None) tuples in manifest order.
    """
    manifest = os.path.join(directory, MANIFEST_NAME)
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no {MANIFEST_NAME} in {directory}")
    with open(manifest, encoding="utf-8") as fh:
        rows = [line.rstrip("\n") for line in fh if line.strip()]
    out = []
    for row in rows:
        cols = row.split("\t")
        if len(cols) not in (6, 7):
            raise ValueError(f"manifest row with {len(cols)} columns: {row[:60]!r}")
        sid, category = cols[0], cols[1]
        hint = cols[6] if len(cols) == 7 else None
        grids = []
        for member, rel in zip(_MEMBERS, cols[2:6]):
            path = os.path.join(directory, rel)
            if not os.path.exists(path):
                raise FileNotFoundError(f"sample {sid}: missing {member} file {rel}")
            grids.append(read_grid(path))
        sample = PairedSample(
            scan=grids[0], gt_fg=grids[1], gt_bg=grids[2], cad=grids[3], category=category
        )
        sample.validate()
        out.append((sample, hint))
    return out
