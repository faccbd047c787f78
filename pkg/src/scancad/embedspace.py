"""Embedding index: exact kNN, cross-domain confusion score, proposal sampling.

The index is append-then-freeze: all vectors go in first, freeze() seals it,
and only a frozen index answers queries, so a frozen instance can be shared
across threads freely. Lookups are exact brute-force Euclidean scans; at the
scale this index serves (tens of thousands of vectors) that is both fast
enough and bit-reproducible, which the benchmark leans on.

A stored object may appear as up to 12 rotated copies (one per up-axis step).
Queries collapse copies to the single closest per (domain, id), so the same
index serves rotation-free and rotation-averaged evaluation.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .voxel import Domain

SCEM_MAGIC = b"SCEM"
SCEM_VERSION = 1

ROTATION_STEPS = 12


@dataclass(frozen=True)
class EmbeddingVector:
    id: str
    domain: Domain
    category: str
    values: np.ndarray
    rotation_step: int = 0

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float32)
        if vals.ndim != 1 or vals.size == 0:
            raise ValueError(f"values must be a non-empty 1-d vector, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"vector {self.id!r} has non-finite values")
        if self.domain not in (Domain.SCAN, Domain.CAD):
            raise ValueError(f"vector {self.id!r}: domain must be SCAN or CAD")
        if not 0 <= self.rotation_step < ROTATION_STEPS:
            raise ValueError(f"rotation_step must be in [0, {ROTATION_STEPS}), got {self.rotation_step}")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def key(self) -> tuple[Domain, str, int]:
        return (self.domain, self.id, self.rotation_step)


class EmbeddingIndex:
    """Fixed-dimension vector store with grouped (domain, id) query results."""

    def __init__(self, dimension: int):
        if dimension < 1:
            raise ValueError("dimension must be positive")
        self.dimension = dimension
        self.vectors: list[EmbeddingVector] = []
        self._keys: set[tuple[Domain, str, int]] = set()
        self._frozen = False
        self._matrix: np.ndarray | None = None
        self._group_of: np.ndarray | None = None
        self._groups: list[tuple[Domain, str]] = []
        self._group_index: dict[tuple[Domain, str], int] = {}

    def __len__(self) -> int:
        return len(self.vectors)

    def __iter__(self):
        return iter(self.vectors)

    @property
    def frozen(self) -> bool:
        return self._frozen

    def add(self, vector: EmbeddingVector) -> None:
        if self._frozen:
            raise RuntimeError("index is frozen; no further appends")
        if vector.values.size != self.dimension:
            raise ValueError(
                f"vector {vector.id!r} has dimension {vector.values.size}, index holds {self.dimension}"
            )
        if vector.key in self._keys:
            raise ValueError(
                f"duplicate vector ({vector.domain.name}, {vector.id!r}, rotation {vector.rotation_step})"
            )
        self._keys.add(vector.key)
        self.vectors.append(vector)

    def freeze(self) -> "EmbeddingIndex":
        """Seal the index and build the query matrix; idempotent."""
        if self._frozen:
            return self
        if not self.vectors:
            raise ValueError("cannot freeze an empty index")
        self._matrix = np.stack([v.values for v in self.vectors]).astype(np.float64)
        group_of = np.empty(len(self.vectors), dtype=np.int64)
        for i, v in enumerate(self.vectors):
            gk = (v.domain, v.id)
            if gk not in self._group_index:
                self._group_index[gk] = len(self._groups)
                self._groups.append(gk)
            group_of[i] = self._group_index[gk]
        self._group_of = group_of
        self._frozen = True
        return self

    # --- query helpers ---

    def _require_frozen(self):
        if not self._frozen:
            raise RuntimeError("freeze the index before querying")

    def group_keys(self) -> list[tuple[Domain, str]]:
        self._require_frozen()
        return list(self._groups)

    def categories(self) -> dict[tuple[Domain, str], str]:
        self._require_frozen()
        return {(v.domain, v.id): v.category for v in self.vectors}

    def vector_for(self, domain: Domain, id: str, rotation_step: int = 0) -> np.ndarray:
        for v in self.vectors:
            if v.domain is domain and v.id == id and v.rotation_step == rotation_step:
                return v.values
        raise KeyError(f"no ({domain.name}, {id!r}, rotation {rotation_step}) in index")

    def group_distances(self, query) -> np.ndarray:
        """Min Euclidean distance per (domain, id) group, rotation copies collapsed."""
        self._require_frozen()
        q = np.asarray(query, dtype=np.float64).reshape(-1)
        if q.size != self.dimension:
            raise ValueError(f"query has dimension {q.size}, index holds {self.dimension}")
        d2 = ((self._matrix - q) ** 2).sum(axis=1)
        best = np.full(len(self._groups), np.inf)
        np.minimum.at(best, self._group_of, d2)
        return np.sqrt(best)

    def distance_map(self, query) -> dict[tuple[Domain, str], float]:
        """group_distances keyed by (domain, id)."""
        dists = self.group_distances(query)
        return {key: float(dists[i]) for i, key in enumerate(self._groups)}


def knn(
    index: EmbeddingIndex,
    query,
    k: int,
    exclude_self: bool = False,
    query_key: tuple[Domain, str] | None = None,
) -> list[tuple[str, Domain, float]]:
    """Exact k nearest (domain, id) groups, ascending, ties broken by id.

    With exclude_self, the query's own entry is dropped: the (domain, id)
    given as query_key when known, otherwise any group at exactly distance 0
    (a stored copy of the query vector).
    """
    if k < 1:
        raise ValueError("k must be positive")
    dists = index.group_distances(query)
    entries = []
    for gi, (domain, gid) in enumerate(index.group_keys()):
        d = dists[gi]
        if exclude_self:
            if query_key is not None:
                if (domain, gid) == query_key:
                    continue
            elif d == 0.0:
                continue
        entries.append((d, gid, domain.name, domain))
    if k > len(entries):
        raise ValueError(f"k={k} exceeds the {len(entries)} available ids")
    entries.sort(key=lambda e: e[:3])
    return [(gid, domain, d) for d, gid, _, domain in entries[:k]]


def confusion_score(index: EmbeddingIndex, k: int) -> float:
    """Cross-domain neighbor fraction, averaged over scan and CAD queries.

    Each distinct (domain, id) object queries with its rotation-0 vector and
    counts how many of its k nearest other objects sit in the opposite
    domain; 0.5 is balanced mixing, 0.0 full segregation.
    """
    index._require_frozen()
    groups = index.group_keys()
    if len(groups) < k + 1:
        raise ValueError(f"confusion at k={k} needs at least {k + 1} objects, index has {len(groups)}")
    totals = {Domain.SCAN: 0.0, Domain.CAD: 0.0}
    counts = {Domain.SCAN: 0, Domain.CAD: 0}
    for domain, gid in groups:
        q = index.vector_for(domain, gid, rotation_step=0)
        neighbors = knn(index, q, k, exclude_self=True, query_key=(domain, gid))
        cross = sum(1 for _, nd, _ in neighbors if nd is not domain)
        totals[domain] += cross
        counts[domain] += 1
    score = 0.0
    for domain in (Domain.SCAN, Domain.CAD):
        if counts[domain]:
            score += 0.5 * totals[domain] / (k * counts[domain])
    return score


PROPOSAL_POOL = 30
PROPOSAL_COUNT = 6


def propose_candidates(ae_index: EmbeddingIndex, associated_cad_id: str, seed: int) -> list[str]:
    """Six CAD ids sampled uniformly from the 30-NN pool of the associated CAD.

    The associated model itself is part of the pool (it sits at distance 0).
    Deterministic given the seed.
    """
    ae_index._require_frozen()
    cad_groups = [g for g in ae_index.group_keys() if g[0] is Domain.CAD]
    if len(cad_groups) < PROPOSAL_POOL:
        raise ValueError(
            f"proposal pool needs at least {PROPOSAL_POOL} CADs, index has {len(cad_groups)}"
        )
    anchor = ae_index.vector_for(Domain.CAD, associated_cad_id, rotation_step=0)
    # rank every group, then keep the 30 nearest CADs (scan vectors, if any
    # share the index, never enter the pool)
    ranked = knn(ae_index, anchor, len(ae_index.group_keys()))
    pool = [gid for gid, domain, _ in ranked if domain is Domain.CAD][:PROPOSAL_POOL]
    rng = np.random.default_rng(seed)
    picks = rng.choice(PROPOSAL_POOL, size=PROPOSAL_COUNT, replace=False)
    return [pool[i] for i in picks]


# --- SCEM embedding file format ---
#
# magic "SCEM" | u32 version | u32 count | u32 dim | per record: u16 id
# length, UTF-8 id, u8 domain, u8 rotation_step, u16 category length,
# UTF-8 category, dim x float32. Little-endian throughout.


def write_embeddings(path, index: EmbeddingIndex) -> None:
    chunks = [SCEM_MAGIC, struct.pack("<III", SCEM_VERSION, len(index.vectors), index.dimension)]
    for v in index.vectors:
        rid = v.id.encode("utf-8")
        rcat = v.category.encode("utf-8")
        chunks.append(struct.pack("<H", len(rid)))
        chunks.append(rid)
        chunks.append(struct.pack("<BB", v.domain.value, v.rotation_step))
        chunks.append(struct.pack("<H", len(rcat)))
        chunks.append(rcat)
        chunks.append(np.ascontiguousarray(v.values, dtype=np.float32).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_embeddings(path) -> EmbeddingIndex:
    """Load an SCEM file into an unfrozen index (freeze before querying)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != SCEM_MAGIC:
        raise ValueError(f"not an embedding file: bad magic {blob[:4]!r}")
    version, count, dim = struct.unpack_from("<III", blob, 4)
    if version != SCEM_VERSION:
        raise ValueError(f"unsupported embedding file version {version}")
    off = 16
    index = EmbeddingIndex(dim)
    for _ in range(count):
        (idlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        rid = blob[off : off + idlen].decode("utf-8")
        off += idlen
        domain_value, rotation = struct.unpack_from("<BB", blob, off)
        off += 2
        (catlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        rcat = blob[off : off + catlen].decode("utf-8")
        off += catlen
        values = np.frombuffer(blob, dtype="<f4", count=dim, offset=off).copy()
        off += 4 * dim
        index.add(
            EmbeddingVector(
                id=rid, domain=Domain(domain_value), category=rcat,
                values=values, rotation_step=rotation,
            )
        )
    if off != len(blob):
        raise ValueError(f"trailing bytes in embedding file: {len(blob) - off}")
    return index
