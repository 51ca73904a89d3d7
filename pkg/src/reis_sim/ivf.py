"""Offline IVF indexing: seeded k-means and cluster membership lists."""

from __future__ import annotations

import io
import logging
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin
from sklearn.utils.validation import check_is_fitted

from .vectors import DimensionError, as_fp32_matrix

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"RIVF"
_BLOCK = 8192


@dataclass(frozen=True)
class KmeansParams:
    nlist: int
    max_iters: int = 25
    seed: int = 0
    tolerance: float = 1e-4
    # checks within-cluster SSE is non-increasing after every Lloyd step
    debug: bool = False

    def __post_init__(self):
        if self.nlist < 1:
            raise ValueError(f"nlist must be >= 1, got {self.nlist}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


@dataclass
class IvfIndex:
    centroids: np.ndarray
    assignments: np.ndarray
    cluster_members: list[np.ndarray] = field(repr=False)

    @property
    def nlist(self) -> int:
        return int(self.centroids.shape[0])

    @property
    def dim(self) -> int:
        return int(self.centroids.shape[1])

    @property
    def tags(self) -> np.ndarray:
        return (np.arange(self.nlist) % 256).astype(np.uint8)

    def validate(self, n_vectors: int | None = None):
        n = self.assignments.shape[0] if n_vectors is None else n_vectors
        if self.assignments.shape[0] != n:
            raise ValueError(f"index covers {self.assignments.shape[0]} vectors, expected {n}")
        if len(self.cluster_members) != self.nlist:
            raise ValueError("one member list per cluster required")
        seen = np.zeros(n, dtype=np.int64)
        for cid, members in enumerate(self.cluster_members):
            if members.size and (members.min() < 0 or members.max() >= n):
                raise ValueError(f"cluster {cid} references an out-of-range vector")
            np.add.at(seen, members, 1)
            if np.any(self.assignments[members] != cid):
                raise ValueError(f"cluster {cid} members disagree with assignments")
        if np.any(seen != 1):
            raise ValueError("cluster members do not partition the dataset")

    def __eq__(self, other):
        if not isinstance(other, IvfIndex):
            return NotImplemented
        return (
            np.array_equal(self.centroids, other.centroids)
            and np.array_equal(self.assignments, other.assignments)
            and len(self.cluster_members) == len(other.cluster_members)
            and all(np.array_equal(a, b) for a, b in zip(self.cluster_members, other.cluster_members))
        )


def default_nlist(n: int) -> int:
    if n < 1:
        raise ValueError("dataset size must be positive")
    return int(min(max(round(math.sqrt(n)), 1), n))


def _sq_norms(x: np.ndarray) -> np.ndarray:
    return np.einsum("ij,ij->i", x, x, dtype=np.float64)


def _nearest(x: np.ndarray, centroids: np.ndarray, x_norms=None):
    """Index of and squared distance to the nearest centroid, lowest id on ties.

    The ranking uses the expanded form ||c||^2 - 2 x.c for speed, then the
    winner's distance and any near-ties are re-evaluated exactly so that
    tie-breaking matches a direct scan.
    """
    n = x.shape[0]
    labels = np.empty(n, dtype=np.int64)
    dists = np.empty(n, dtype=np.float64)
    c64 = centroids.astype(np.float64)
    c_norms = _sq_norms(c64)
    if x_norms is None:
        x_norms = _sq_norms(x)
    for start in range(0, n, _BLOCK):
        blk = x[start : start + _BLOCK]
        approx = c_norms[None, :] - 2.0 * (blk.astype(np.float64) @ c64.T)
        best = approx.min(axis=1, keepdims=True)
        scale = np.maximum(np.abs(best), x_norms[start : start + _BLOCK, None]) + 1.0
        near = approx <= best + 1e-9 * scale
        for i in np.flatnonzero(near.sum(axis=1) > 1):
            cand = np.flatnonzero(near[i])
            diff = c64[cand] - blk[i].astype(np.float64)
            exact = np.einsum("ij,ij->i", diff, diff)
            near[i] = False
            near[i, cand[exact == exact.min()]] = True
        lab = near.argmax(axis=1)
        labels[start : start + _BLOCK] = lab
        diff = blk.astype(np.float64) - c64[lab]
        dists[start : start + _BLOCK] = np.einsum("ij,ij->i", diff, diff)
    return labels, dists


def assign_clusters(vectors, centroids) -> np.ndarray:
    """Nearest centroid per vector under squared L2; ties go to the lower id."""
    x = as_fp32_matrix(vectors)
    c = as_fp32_matrix(centroids, name="centroids")
    if x.shape[1] != c.shape[1]:
        raise DimensionError(f"vectors have D={x.shape[1]}, centroids D={c.shape[1]}")
    return _nearest(x, c)[0]


def _kmeanspp(x, x_norms, k, rng):
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]), dtype=np.float32)
    first = int(rng.integers(n))
    centers[0] = x[first]
    closest = np.maximum(x_norms - 2.0 * (x @ x[first]).astype(np.float64) + x_norms[first], 0.0)
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            # all points coincide with chosen centers; fall back to uniform picks
            pick = int(rng.integers(n))
        else:
            pick = int(np.searchsorted(np.cumsum(closest), rng.random() * total, side="right"))
            pick = min(pick, n - 1)
        centers[j] = x[pick]
        d = np.maximum(x_norms - 2.0 * (x @ x[pick]).astype(np.float64) + x_norms[pick], 0.0)
        np.minimum(closest, d, out=closest)
    return centers


def _sse(dists):
    return float(dists.sum())


def kmeans_train(vectors, params: KmeansParams) -> np.ndarray:
    """Lloyd's algorithm from k-means++ seeds; returns ``(nlist, D)`` centroids.

    Empty clusters are re-seeded with the point currently farthest from its
    assigned centroid, so every returned centroid owns at least one vector.
    """
    x = as_fp32_matrix(vectors)
    n = x.shape[0]
    k = params.nlist
    if k > n:
        raise ValueError(f"nlist={k} exceeds the number of vectors ({n})")
    rng = np.random.default_rng(params.seed)
    x_norms = _sq_norms(x)
    centroids = _kmeanspp(x, x_norms, k, rng)
    labels, dists = _nearest(x, centroids, x_norms)
    centroids, labels, dists = _repair_empty(x, x_norms, centroids, labels, dists)
    prev_sse = _sse(dists)
    for it in range(params.max_iters):
        sums = np.zeros((k, x.shape[1]), dtype=np.float64)
        _accumulate(sums, labels, x)
        counts = np.bincount(labels, minlength=k)
        new = centroids.astype(np.float64).copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        new = new.astype(np.float32)
        shift = float(np.linalg.norm(new.astype(np.float64) - centroids))
        scale = float(np.linalg.norm(centroids.astype(np.float64))) or 1.0
        centroids = new
        labels, dists = _nearest(x, centroids, x_norms)
        centroids, labels, dists = _repair_empty(x, x_norms, centroids, labels, dists)
        sse = _sse(dists)
        if params.debug and sse > prev_sse * (1 + 1e-6) + 1e-9:
            raise AssertionError(f"SSE increased at iteration {it}: {prev_sse} -> {sse}")
        logger.debug("kmeans iter %d sse=%.6g shift=%.3g", it, sse, shift / scale)
        prev_sse = sse
        if shift / scale <= params.tolerance:
            break
    centroids, labels, dists = _repair_empty(x, x_norms, centroids, labels, dists)
    return centroids


def _accumulate(sums, labels, x):
    order = np.argsort(labels, kind="stable")
    bounds = np.searchsorted(labels[order], np.arange(sums.shape[0] + 1))
    for c in range(sums.shape[0]):
        lo, hi = bounds[c], bounds[c + 1]
        if hi > lo:
            sums[c] = x[order[lo:hi]].sum(axis=0, dtype=np.float64)


def _repair_empty(x, x_norms, centroids, labels, dists):
    """Re-seed each empty cluster with the farthest point of a shared cluster.

    Only the moved point changes owner here; the next assignment step picks
    up any other points now closer to the new centroid. Moving a point onto
    its own centroid can only lower the SSE.
    """
    counts = np.bincount(labels, minlength=centroids.shape[0])
    if not np.any(counts == 0):
        return centroids, labels, dists
    centroids = centroids.copy()
    labels = labels.copy()
    dists = dists.copy()
    for empty in np.flatnonzero(counts == 0):
        # never steal the only member of another cluster
        cand = np.where(counts[labels] > 1, dists, -1.0)
        far = int(np.argmax(cand))
        counts[labels[far]] -= 1
        counts[empty] += 1
        centroids[empty] = x[far]
        labels[far] = empty
        dists[far] = 0.0
    return centroids, labels, dists


def build_index(vectors, params: KmeansParams) -> IvfIndex:
    x = as_fp32_matrix(vectors)
    centroids = kmeans_train(x, params)
    labels = assign_clusters(x, centroids)
    counts = np.bincount(labels, minlength=params.nlist)
    if np.any(counts == 0):
        # only reachable with fewer distinct points than clusters
        centroids, labels, _ = _repair_empty(x, _sq_norms(x), centroids, labels, _nearest(x, centroids)[1])
    members = [np.flatnonzero(labels == c).astype(np.int64) for c in range(params.nlist)]
    return IvfIndex(centroids=centroids, assignments=labels.astype(np.int64), cluster_members=members)


def serialize_index(index: IvfIndex) -> bytes:
    buf = io.BytesIO()
    buf.write(INDEX_MAGIC)
    buf.write(struct.pack("<II", index.dim, index.nlist))
    buf.write(np.ascontiguousarray(index.centroids, dtype="<f4").tobytes())
    counts = np.array([m.size for m in index.cluster_members], dtype="<u4")
    buf.write(counts.tobytes())
    for m in index.cluster_members:
        buf.write(np.ascontiguousarray(m, dtype="<u4").tobytes())
    return buf.getvalue()


def deserialize_index(blob: bytes) -> IvfIndex:
    if len(blob) < 12 or blob[:4] != INDEX_MAGIC:
        raise ValueError("not an IVF index (bad magic)")
    d, nlist = struct.unpack_from("<II", blob, 4)
    off = 12
    need = off + 4 * d * nlist + 4 * nlist
    if len(blob) < need:
        raise ValueError("truncated IVF index")
    centroids = np.frombuffer(blob, dtype="<f4", count=d * nlist, offset=off).reshape(nlist, d).astype(np.float32)
    off += 4 * d * nlist
    counts = np.frombuffer(blob, dtype="<u4", count=nlist, offset=off).astype(np.int64)
    off += 4 * nlist
    if len(blob) != off + 4 * int(counts.sum()):
        raise ValueError("IVF index member block length mismatch")
    members = []
    for c in counts:
        members.append(np.frombuffer(blob, dtype="<u4", count=int(c), offset=off).astype(np.int64))
        off += 4 * int(c)
    n = int(counts.sum())
    assignments = np.empty(n, dtype=np.int64)
    for cid, m in enumerate(members):
        if m.size and m.max() >= n:
            raise ValueError("IVF index member out of range")
        assignments[m] = cid
    index = IvfIndex(centroids=centroids, assignments=assignments, cluster_members=members)
    index.validate()
    return index


class IVFKMeans(ClusterMixin, BaseEstimator):
    """scikit-learn style front end for :func:`build_index`.

    ``nlist=None`` picks :func:`default_nlist` of the training set size.
    """

    def __init__(self, nlist=None, max_iters=25, seed=0, tolerance=1e-4):
        self.nlist = nlist
        self.max_iters = max_iters
        self.seed = seed
        self.tolerance = tolerance

    def fit(self, X, y=None):
        x = as_fp32_matrix(X, name="X")
        nlist = default_nlist(x.shape[0]) if self.nlist is None else self.nlist
        params = KmeansParams(nlist=nlist, max_iters=self.max_iters, seed=self.seed, tolerance=self.tolerance)
        self.index_ = build_index(x, params)
        self.cluster_centers_ = self.index_.centroids
        self.labels_ = self.index_.assignments
        self.n_features_in_ = x.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "index_")
        return assign_clusters(X, self.cluster_centers_)
