"""Dataset files and the synthetic clustered-embedding generator.

File formats (little-endian):

* vectors: ``b"RVEC"``, u32 D, u64 n, then ``n * D`` f32 values row-major.
* documents: a sequence of ``u32 length`` + UTF-8 bytes records.
* manifest: JSON describing the above plus optional queries / ground truth.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .vectors import as_fp32_matrix

VECTOR_MAGIC = b"RVEC"
VECTOR_HEADER = struct.Struct("<4sIQ")
GEN_CHUNK = 8192


class DataError(ValueError):
    """Malformed or inconsistent dataset files."""


def write_vectors(path, vectors) -> Path:
    x = as_fp32_matrix(vectors)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(VECTOR_HEADER.pack(VECTOR_MAGIC, x.shape[1], x.shape[0]))
        fh.write(x.astype("<f4").tobytes())
    return path


def read_vectors(path, mmap: bool = False) -> np.ndarray:
    path = Path(path)
    size = path.stat().st_size
    with open(path, "rb") as fh:
        head = fh.read(VECTOR_HEADER.size)
    if len(head) < VECTOR_HEADER.size:
        raise DataError(f"{path}: truncated header")
    magic, d, n = VECTOR_HEADER.unpack(head)
    if magic != VECTOR_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    if d == 0 or n == 0:
        raise DataError(f"{path}: empty vector file (D={d}, n={n})")
    if size != VECTOR_HEADER.size + 4 * d * n:
        raise DataError(f"{path}: header says {n}x{d} but file holds {size - VECTOR_HEADER.size} payload bytes")
    if mmap:
        return np.memmap(path, dtype="<f4", mode="r", offset=VECTOR_HEADER.size, shape=(n, d))
    return np.fromfile(path, dtype="<f4", offset=VECTOR_HEADER.size).reshape(n, d).astype(np.float32)


def write_documents(path, documents) -> Path:
    path = Path(path)
    with open(path, "wb") as fh:
        for doc in documents:
            raw = doc.encode("utf-8") if isinstance(doc, str) else bytes(doc)
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
    return path


def read_documents(path) -> list[bytes]:
    raw = Path(path).read_bytes()
    out = []
    off = 0
    while off < len(raw):
        if off + 4 > len(raw):
            raise DataError(f"{path}: truncated length prefix at byte {off}")
        (ln,) = struct.unpack_from("<I", raw, off)
        if off + 4 + ln > len(raw):
            raise DataError(f"{path}: record at byte {off} runs past end of file")
        out.append(raw[off + 4 : off + 4 + ln])
        off += 4 + ln
    return out


@dataclass
class DatasetManifest:
    name: str
    D: int
    n_vectors: int
    vectors: str
    documents: str
    queries: str | None = None
    ground_truth: str | None = None
    n_queries: int = 0
    seed: int | None = None

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        try:
            meta = json.loads(Path(path).read_text())
            return cls(**meta)
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"{path}: not a dataset manifest ({exc})") from None

    def resolve(self, base, field: str) -> Path | None:
        value = getattr(self, field)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else Path(base) / p

    def validate(self, base, page_size: int | None = None):
        """Check header counts against the manifest and document sizes."""
        x = read_vectors(self.resolve(base, "vectors"), mmap=True)
        if x.shape != (self.n_vectors, self.D):
            raise DataError(f"vector file holds {x.shape}, manifest says ({self.n_vectors}, {self.D})")
        docs = read_documents(self.resolve(base, "documents"))
        if len(docs) != self.n_vectors:
            raise DataError(f"{len(docs)} documents for {self.n_vectors} vectors")
        if page_size is not None:
            big = max((len(d) for d in docs), default=0)
            if big > page_size:
                raise DataError(f"document of {big} B exceeds the {page_size} B page")


# Synthetic data --------------------------------------------------------------


@dataclass(frozen=True)
class BlobModel:
    """Gaussian blobs, each spread along its own low-rank subspace."""

    centers: np.ndarray
    bases: np.ndarray
    spread: float
    noise: float
    seed: int

    @classmethod
    def create(cls, d, clusters, *, latent=16, spread=1.0, noise=0.3, seed=0) -> "BlobModel":
        if d < 1 or clusters < 1 or latent < 1:
            raise ValueError("d, clusters and latent must be positive")
        rng = np.random.default_rng([seed, 0])
        centers = rng.standard_normal((clusters, d)).astype(np.float32)
        bases = (rng.standard_normal((clusters, latent, d)) / np.sqrt(latent)).astype(np.float32)
        return cls(centers, bases, float(spread), float(noise), int(seed))

    def chunk(self, index: int, size: int) -> np.ndarray:
        """Rows of chunk ``index``; each chunk has its own RNG stream."""
        rng = np.random.default_rng([self.seed, 1, index])
        clusters, latent, d = self.bases.shape
        labels = rng.integers(0, clusters, size)
        z = rng.standard_normal((size, latent), dtype=np.float32)
        out = self.noise * rng.standard_normal((size, d), dtype=np.float32)
        out += self.centers[labels]
        for b in np.unique(labels):
            rows = np.flatnonzero(labels == b)
            out[rows] += self.spread * (z[rows] @ self.bases[b])
        return out


def iter_clustered(n, d, clusters, *, seed=0, latent=16, spread=1.0, noise=0.3):
    """Yield ``n`` synthetic rows in chunks of at most 8192.

    Every chunk is drawn at full size and truncated, so a smaller ``n``
    yields a prefix of a larger one.
    """
    model = BlobModel.create(d, clusters, latent=latent, spread=spread, noise=noise, seed=seed)
    for i, lo in enumerate(range(0, n, GEN_CHUNK)):
        yield model.chunk(i, GEN_CHUNK)[: n - lo]


def make_clustered(n, d, clusters, *, seed=0, latent=16, spread=1.0, noise=0.3) -> np.ndarray:
    """Clustered embeddings, bit-identical for a given seed and shape."""
    if n < 1:
        raise ValueError("n must be positive")
    return np.concatenate(
        list(iter_clustered(n, d, clusters, seed=seed, latent=latent, spread=spread, noise=noise))
    )


def make_documents(n, chunk_bytes: int = 0, seed: int = 0) -> list[bytes]:
    """Placeholder chunks ``"doc-<i>"``, padded with filler to ``chunk_bytes``."""
    filler = b"abcdefghijklmnopqrstuvwxyz" * (chunk_bytes // 26 + 2)
    docs = []
    for i in range(n):
        head = f"doc-{i}".encode()
        if chunk_bytes > len(head) + 1:
            off = (i * 7 + seed) % 26
            head += b" " + filler[off : off + chunk_bytes - len(head) - 1]
        docs.append(head)
    return docs


def generate_dataset(
    out_dir,
    *,
    n,
    d,
    clusters,
    seed=0,
    n_queries=100,
    latent=16,
    spread=1.0,
    noise=0.3,
    chunk_bytes=0,
    name="synthetic",
) -> DatasetManifest:
    """Write vectors, documents, queries and a manifest into ``out_dir``.

    Queries are extra rows drawn from the same model.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x = make_clustered(n + n_queries, d, clusters, seed=seed, latent=latent, spread=spread, noise=noise)
    q, x = x[:n_queries], x[n_queries:]
    write_vectors(out / "vectors.rvec", x)
    write_documents(out / "documents.bin", make_documents(n, chunk_bytes, seed))
    manifest = DatasetManifest(
        name=name, D=d, n_vectors=n, vectors="vectors.rvec", documents="documents.bin", seed=seed
    )
    if n_queries:
        write_vectors(out / "queries.rvec", q)
        manifest.queries = "queries.rvec"
        manifest.n_queries = n_queries
    manifest.save(out / "manifest.json")
    return manifest
