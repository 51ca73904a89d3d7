"""Host-side baseline: exact ground truth, recall and a modeled CPU retriever.

The host retriever returns the same results as the in-storage engine
(same quantizer, same tie-breaks) but is charged for streaming the
database image from storage plus a CPU scan whose throughput comes from a
micro-benchmark on the running machine.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .layout import DeployedDatabase
from .vectors import as_fp32_matrix, binarize, hamming_to_many, int8_squared_l2_many, quantize_int8

GROUND_TRUTH_MAGIC = b"RGTK"


@dataclass
class HostCostModel:
    """CPU retrieval cost constants.

    ``storage_read_bw`` is an assumed PCIe 4.0 data-center SSD. Scan
    throughputs default to conservative figures; :meth:`calibrate` replaces
    them with measurements.
    """

    storage_read_bw: float = 6.8  # GB/s
    hamming_vectors_per_us: float = 100.0
    fp32_vectors_per_us: float = 2.0
    int8_macs_per_us: float = 5000.0
    load_per_query: bool = True

    def __post_init__(self):
        for name in ("storage_read_bw", "hamming_vectors_per_us", "fp32_vectors_per_us", "int8_macs_per_us"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    def load_time_s(self, nbytes: int) -> float:
        return nbytes / (self.storage_read_bw * 1e9)

    @classmethod
    def calibrate(cls, dim: int = 1024, n: int = 50_000, repeats: int = 3, seed: int = 0, **overrides):
        """Measure Hamming, FP32 and INT8 scan rates with numpy kernels."""
        rng = np.random.default_rng(seed)
        codes = rng.integers(0, 256, (n, dim // 8), dtype=np.uint8)
        q = codes[0].copy()
        fp = rng.standard_normal((n // 10, dim), dtype=np.float32)
        fq = fp[0].copy()
        i8 = rng.integers(-127, 128, (n // 10, dim), dtype=np.int8)

        def best(fn):
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                fn()
                times.append(time.perf_counter() - t0)
            return max(min(times), 1e-9) * 1e6

        ham = n / best(lambda: hamming_to_many(q, codes))
        f32 = (n // 10) / best(lambda: ((fp - fq) ** 2).sum(axis=1))
        macs = (n // 10) * dim / best(lambda: int8_squared_l2_many(i8[0], i8))
        return cls(hamming_vectors_per_us=ham, fp32_vectors_per_us=f32, int8_macs_per_us=macs, **overrides)


# Ground truth ------------------------------------------------------------------


@dataclass
class GroundTruth:
    """True top-k dataset indices per query, ordered by (distance, index)."""

    indices: np.ndarray

    @property
    def k(self) -> int:
        return int(self.indices.shape[1])

    def __len__(self):
        return int(self.indices.shape[0])

    def __getitem__(self, i):
        return self.indices[i]

    def to_bytes(self) -> bytes:
        nq, k = self.indices.shape
        return GROUND_TRUTH_MAGIC + struct.pack("<II", k, nq) + self.indices.astype("<u4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "GroundTruth":
        if blob[:4] != GROUND_TRUTH_MAGIC or len(blob) < 12:
            raise ValueError("not a ground-truth file (bad magic)")
        k, nq = struct.unpack_from("<II", blob, 4)
        if len(blob) != 12 + 4 * k * nq:
            raise ValueError("ground-truth file length does not match its header")
        arr = np.frombuffer(blob, dtype="<u4", offset=12).reshape(nq, k).astype(np.int64)
        return cls(arr)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_bytes(self.to_bytes())
        return path

    @classmethod
    def load(cls, path) -> "GroundTruth":
        return cls.from_bytes(Path(path).read_bytes())


def exact_ground_truth(queries, vectors, k: int, block: int = 64) -> GroundTruth:
    """Exhaustive FP32 squared-L2 top-k with ``(distance, index)`` ties.

    A float32 matrix product shortlists candidates; anything within the
    product's worst-case rounding error of the k-th value is re-scored in
    float64 before the final ordering, so the result is exact.
    """
    q = as_fp32_matrix(queries, name="queries")
    x = as_fp32_matrix(vectors)
    if q.shape[1] != x.shape[1]:
        raise ValueError("queries and vectors differ in dimensionality")
    n, d = x.shape
    k = min(k, n)
    norms = np.einsum("ij,ij->i", x, x, dtype=np.float64)
    max_norm = float(np.sqrt(norms.max()))
    # |fl(x.q) - x.q| <= d * u * |x| |q| for float32 accumulation
    unit = d * float(np.finfo(np.float32).eps)
    out = np.empty((q.shape[0], k), dtype=np.int64)
    for lo in range(0, q.shape[0], block):
        qb = q[lo : lo + block]
        dots = (x @ qb.T).astype(np.float64)
        for j in range(qb.shape[0]):
            q64 = qb[j].astype(np.float64)
            approx = norms - 2.0 * dots[:, j]
            slack = 4.0 * unit * max_norm * float(np.sqrt(q64 @ q64)) + 1e-9
            kth = np.partition(approx, k - 1)[k - 1] if k < n else approx.max()
            cand = np.flatnonzero(approx <= kth + slack)
            diff = x[cand].astype(np.float64) - q64
            exact = np.einsum("ij,ij->i", diff, diff)
            out[lo + j] = cand[np.lexsort((cand, exact))[:k]]
    return GroundTruth(out)


def recall_at_k(result, truth, k: int) -> float:
    """``|result[:k] ∩ truth[:k]| / k``."""
    if k < 1:
        raise ValueError("k must be >= 1")
    r = set(int(i) for i in list(result)[:k])
    t = set(int(i) for i in list(truth)[:k])
    return len(r & t) / k


def mean_recall(results, truth, k: int) -> float:
    if len(results) == 0:
        return 0.0
    return float(np.mean([recall_at_k(r, t, k) for r, t in zip(results, truth)]))


# Host retriever ---------------------------------------------------------------


@dataclass
class HostResult:
    indices: list
    latency_s: list
    load_s: float
    scan_s: list = field(default_factory=list)

    @property
    def mean_latency_s(self) -> float:
        return float(np.mean(self.latency_s)) if self.latency_s else 0.0


def host_search(
    queries,
    db: DeployedDatabase,
    *,
    k: int = 10,
    mode: str | None = None,
    nprobe: int = 1,
    candidate_multiplier: int = 10,
    cost: HostCostModel | None = None,
) -> HostResult:
    """Binary scan plus INT8 rerank on the host over a deployed image.

    ``mode`` defaults to the deployment's own layout. Results are ordered by
    ``(int8 distance, dataset index)``.
    """
    cost = cost or HostCostModel()
    mode = mode or ("ivf" if db.is_ivf else "flat")
    q = as_fp32_matrix(queries, name="queries") if len(queries) else np.empty((0, db.dim), np.float32)
    n = db.n_vectors
    codes = db.binary.slot_view().reshape(-1, db.binary.slot_bytes)[:n]
    m = k * candidate_multiplier
    load_s = cost.load_time_s(db.footprint_bytes())
    out, lat, scans = [], [], []
    for row in q:
        qb = binarize(row, db.quantizer)
        if mode == "flat":
            pos = np.arange(n)
            scanned = n
        elif mode == "ivf":
            if not db.is_ivf:
                raise ValueError("ivf host search needs an IVF deployment")
            cent = db.centroids.slot_view().reshape(-1, db.centroids.slot_bytes)[: db.nlist]
            cd = hamming_to_many(qb, cent)
            probe = np.lexsort((np.arange(db.nlist), cd))[:nprobe]
            pos = np.concatenate([np.arange(db.rivf[c].first_emb_index, db.rivf[c].last_emb_index + 1) for c in probe])
            scanned = pos.size + db.nlist
        else:
            raise ValueError(f"unknown mode {mode!r}")
        d = hamming_to_many(qb, codes[pos])
        cand = pos[np.lexsort((pos, d))[:m]]
        ids = db.order[cand]
        if db.int8 is not None:
            q8 = quantize_int8(row, db.quantizer)
            d8 = int8_squared_l2_many(q8, db.int8_vectors(db.radr_of(cand)))
            ids = ids[np.lexsort((ids, d8))]
            rerank_us = cand.size * db.dim / cost.int8_macs_per_us
        else:
            rerank_us = 0.0
        out.append(ids[:k].tolist())
        scan_s = (scanned / cost.hamming_vectors_per_us + rerank_us) * 1e-6
        scans.append(scan_s)
        lat.append(scan_s + (load_s if cost.load_per_query else 0.0))
    if not cost.load_per_query and lat:
        lat = [t + load_s / len(lat) for t in lat]
    return HostResult(out, lat, load_s, scans)


# End-to-end breakdown -------------------------------------------------------


@dataclass(frozen=True)
class PipelineConstants:
    """Fixed non-retrieval stage times (s) of a RAG pipeline.

    Defaults describe an 18.97 s pipeline in which generation takes 92%
    and in-storage retrieval is negligible.
    """

    embedding_model_loading: float = 0.0326 * 18.97
    encoding: float = 0.0058 * 18.97
    generation_model_loading: float = 0.0416 * 18.97
    generation: float = 0.920 * 18.97


BREAKDOWN_ROWS = (
    "Embedding Model Loading",
    "Encoding",
    "Dataset Loading",
    "Search (and retrieval)",
    "Generation Model Loading",
    "Generation",
)


def end_to_end_breakdown(constants: PipelineConstants, retrieval_s: float, dataset_loading_s: float = 0.0):
    """Six-row stage table: ``[(label, seconds, percent), ...]`` plus total."""
    if retrieval_s < 0 or dataset_loading_s < 0:
        raise ValueError("stage times must be non-negative")
    secs = [
        constants.embedding_model_loading,
        constants.encoding,
        dataset_loading_s,
        retrieval_s,
        constants.generation_model_loading,
        constants.generation,
    ]
    total = math.fsum(secs)
    rows = [(label, s, 100.0 * s / total if total else 0.0) for label, s in zip(BREAKDOWN_ROWS, secs)]
    return rows, total
