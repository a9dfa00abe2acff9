"""Shared-codebook K-Means: k-means++ seeding, Lloyd refinement, nearest assignment."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import config
from .errors import ContractError, DataError, SeedingError
from .weightio import SubVectorTable

_CHUNK_ELEMS = 1 << 22


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based (Philox) generator; every stochastic step in vqforge draws from one."""
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def is_power_of_two(k: int) -> bool:
    return k >= 1 and (k & (k - 1)) == 0


@dataclass(eq=False)
class Codebook:
    """``k x d`` float32 codewords shared by every sub-vector of a layer."""

    entries: np.ndarray

    def __post_init__(self):
        e = np.ascontiguousarray(self.entries, dtype=np.float32)
        if e.ndim != 2:
            raise ContractError(f"codebook must be 2-d, got shape {e.shape}")
        if not is_power_of_two(e.shape[0]):
            raise ContractError(f"codebook size k={e.shape[0]} is not a power of two")
        if not np.all(np.isfinite(e)):
            raise DataError("codebook contains non-finite entries")
        self.entries = e

    @property
    def k(self) -> int:
        return self.entries.shape[0]

    @property
    def d(self) -> int:
        return self.entries.shape[1]

    @property
    def bits(self) -> int:
        return self.k.bit_length() - 1

    def __eq__(self, other):
        if not isinstance(other, Codebook):
            return NotImplemented
        return self.entries.shape == other.entries.shape and self.entries.tobytes() == other.entries.tobytes()


@dataclass(eq=False)
class Assignments:
    """``o x (i/d)`` table of codeword indices."""

    indices: np.ndarray
    k: int

    def __post_init__(self):
        idx = np.ascontiguousarray(self.indices, dtype=np.int64)
        if idx.ndim != 2:
            raise ContractError(f"assignments must be 2-d, got shape {idx.shape}")
        if idx.size and (idx.min() < 0 or idx.max() >= self.k):
            raise ContractError(f"assignment index out of range [0, {self.k})")
        self.indices = idx

    @property
    def rows(self) -> int:
        return self.indices.shape[0]

    @property
    def slots(self) -> int:
        return self.indices.shape[1]

    def __eq__(self, other):
        if not isinstance(other, Assignments):
            return NotImplemented
        return self.k == other.k and np.array_equal(self.indices, other.indices)


def sq_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """Exact pairwise squared distances ``(len(x), len(c))`` in float64.

    Uses explicit differences rather than the norm expansion so equidistant
    points compare equal and ties resolve deterministically.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    out = np.empty((x.shape[0], c.shape[0]), dtype=np.float64)
    step = max(1, _CHUNK_ELEMS // max(1, c.shape[0] * c.shape[1]))
    for lo in range(0, x.shape[0], step):
        diff = x[lo:lo + step, None, :] - c[None, :, :]
        out[lo:lo + step] = np.einsum("nkd,nkd->nk", diff, diff)
    return out


def _nearest(x, c):
    dist = sq_distances(x, c)
    idx = np.argmin(dist, axis=1)
    return idx, dist[np.arange(len(idx)), idx]


def kmeanspp_seed(table: SubVectorTable, k: int, seed: int) -> Codebook:
    """Pick ``k`` initial centers by D^2-weighted sampling.

    RNG use is fixed: one ``integers(N)`` draw for the first center, then one
    ``random()`` draw per further center, inverted through the cumulative D^2
    mass. If every remaining point coincides with a chosen center (duplicate
    data) the pick falls back to a uniform ``integers(N)`` draw.
    """
    x = np.asarray(table.vectors, dtype=np.float64)
    n = x.shape[0]
    if n < k:
        raise SeedingError(f"cannot seed {k} centers from {n} sub-vectors")
    if not is_power_of_two(k):
        raise ContractError(f"k={k} is not a power of two")
    rng = make_rng(seed)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        cum = np.cumsum(d2)
        total = cum[-1]
        if total > 0:
            u = rng.random() * total
            idx = int(np.searchsorted(cum, u, side="right"))
            idx = min(idx, n - 1)
        else:
            idx = int(rng.integers(n))
        chosen.append(idx)
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return Codebook(x[chosen].astype(np.float32))


def nearest_assign(table: SubVectorTable, cb: Codebook) -> Assignments:
    """Assign each sub-vector to its closest codeword; ties go to the lowest index."""
    if cb.d != table.d:
        raise ContractError(f"codebook d={cb.d} does not match table d={table.d}")
    idx, _ = _nearest(table.vectors, cb.entries)
    return Assignments(idx.reshape(table.rows, table.slots), cb.k)


def distortion(table: SubVectorTable, cb: Codebook, assignments: Assignments) -> float:
    """Sum of squared errors between sub-vectors and their assigned codewords."""
    diff = np.asarray(table.vectors, np.float64) - cb.entries.astype(np.float64)[assignments.indices.reshape(-1)]
    return float(np.einsum("nd,nd->", diff, diff))


def lloyd(
    table: SubVectorTable,
    cb: Codebook,
    max_iters: int = config.KMEANS_MAX_ITERS,
    tol: float = config.KMEANS_TOL,
    trace: list | None = None,
):
    """Refine ``cb`` with Lloyd iterations.

    Stops when the relative distortion improvement drops below ``tol`` or after
    ``max_iters`` assignment steps. A cluster that empties is re-seeded at the
    sub-vector currently farthest from its own center.

    Returns ``(codebook, assignments, distortion)``. If ``trace`` is given, the
    distortion after every assignment step is appended to it.
    """
    if cb.d != table.d:
        raise ContractError(f"codebook d={cb.d} does not match table d={table.d}")
    x = np.asarray(table.vectors, dtype=np.float64)
    centers = cb.entries.astype(np.float64)
    k, d = centers.shape
    prev = None
    for _ in range(max_iters):
        idx, dist = _nearest(x, centers)
        cur = float(dist.sum())
        if trace is not None:
            trace.append(cur)
        if prev is not None:
            # Lloyd never increases distortion; anything else is a bug
            assert cur <= prev * (1 + 1e-12) + 1e-300, (cur, prev)
            if prev == 0 or (prev - cur) <= tol * prev:
                break
        if cur == 0:
            break
        prev = cur

        counts = np.bincount(idx, minlength=k)
        sums = np.stack([np.bincount(idx, weights=x[:, j], minlength=k) for j in range(d)], axis=1)
        live = counts > 0
        centers[live] = sums[live] / counts[live, None]
        empty = np.flatnonzero(~live)
        if empty.size:
            order = np.argsort(-dist, kind="stable")
            for c, p in zip(empty, order[: empty.size]):
                centers[c] = x[p]

    final = Codebook(centers.astype(np.float32))
    assignments = nearest_assign(table, final)
    return final, assignments, distortion(table, final, assignments)


def fit(table: SubVectorTable, k: int, seed: int, max_iters: int = config.KMEANS_MAX_ITERS,
        tol: float = config.KMEANS_TOL):
    """k-means++ seeding followed by Lloyd; the hard-VQ baseline."""
    return lloyd(table, kmeanspp_seed(table, k, seed), max_iters, tol)
