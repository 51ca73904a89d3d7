"""Database deployment onto the modeled flash array.

An embedding region holds up to three sub-regions (binary centroids,
binary embeddings, INT8 embeddings); a separate document region holds the
chunks. Every sub-region starts on a plane-aligned address, so region page
``j`` always sits on plane ``j % P`` and consecutive pages stripe across
all planes.

OOB layout of a binary-embedding page with ``N`` slots (little-endian)::

    [0, 4N)    u32 DADR per slot   (document slot, relative to the document region)
    [4N, 8N)   u32 RADR per slot   (INT8 slot, relative to the INT8 sub-region)

The RADR table is absent when a database is deployed without INT8 copies.
Centroid pages carry one u8 cluster tag per slot at offset 0.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ivf import IvfIndex
from .ssd import (
    MINI_PAGE_BYTES,
    FlashArray,
    MiniPageAddress,
    SsdConfig,
    pack_mini_page,
    preset,
    slots_per_page,
    unpack_mini_page,
)
from .vectors import DimensionError, QuantizerModel, as_fp32_matrix, binarize, quantize_int8

RDB_BYTES = 21
RIVF_BYTES = 15
LINK_ADDR_BYTES = 4
END_OF_REGION = None


class CapacityError(ValueError):
    pass


class LayoutError(ValueError):
    pass


@dataclass(frozen=True)
class RdbEntry:
    db_id: int
    emb_region_first: MiniPageAddress
    emb_region_last: MiniPageAddress
    doc_region_first: MiniPageAddress
    doc_region_last: MiniPageAddress

    def __post_init__(self):
        if not 0 <= self.db_id < 256:
            raise ValueError("db_id must fit in 8 bits")


@dataclass(frozen=True)
class RivfEntry:
    centroid_addr: MiniPageAddress
    first_emb_index: int
    last_emb_index: int
    tag: int
    reserved: int = 0

    def __post_init__(self):
        for name in ("first_emb_index", "last_emb_index"):
            if not 0 <= getattr(self, name) < 2**32:
                raise ValueError(f"{name} must fit in 32 bits")
        if not (0 <= self.tag < 256 and 0 <= self.reserved < 256):
            raise ValueError("tag and reserved must fit in 8 bits")

    @property
    def size(self) -> int:
        return self.last_emb_index - self.first_emb_index + 1



def pack_rdb(entry: RdbEntry) -> bytes:
    return bytes([entry.db_id]) + b"".join(
        pack_mini_page(a)
        for a in (entry.emb_region_first, entry.emb_region_last, entry.doc_region_first, entry.doc_region_last)
    )


def unpack_rdb(raw: bytes) -> RdbEntry:
    if len(raw) != RDB_BYTES:
        raise ValueError(f"R-DB entry must be {RDB_BYTES} bytes, got {len(raw)}")
    addrs = [unpack_mini_page(raw[1 + i * MINI_PAGE_BYTES : 1 + (i + 1) * MINI_PAGE_BYTES]) for i in range(4)]
    return RdbEntry(raw[0], *addrs)


def pack_rivf(entry: RivfEntry) -> bytes:
    return pack_mini_page(entry.centroid_addr) + struct.pack(
        "<IIBB", entry.first_emb_index, entry.last_emb_index, entry.tag, entry.reserved
    )


def unpack_rivf(raw: bytes) -> RivfEntry:
    if len(raw) != RIVF_BYTES:
        raise ValueError(f"R-IVF entry must be {RIVF_BYTES} bytes, got {len(raw)}")
    first, last, tag, reserved = struct.unpack_from("<IIBB", raw, MINI_PAGE_BYTES)
    return RivfEntry(unpack_mini_page(raw[:MINI_PAGE_BYTES]), first, last, tag, reserved)


def link_table_bytes(slots: int, with_radr: bool = True) -> int:
    """OOB bytes used by the link tables of one embedding page."""
    return slots * LINK_ADDR_BYTES * (2 if with_radr else 1)


@dataclass(frozen=True)
class OobLinkRecord:
    dadr: int
    radr: int | None = None
    tag: int | None = None


@dataclass
class DenseRegion:
    """Fixed-size slots packed into pages, backed by one ``(n_pages, page)`` array."""

    name: str
    first: int
    data: np.ndarray
    slot_bytes: int
    slots: int
    n_items: int
    cell: str = "slc"
    oob: np.ndarray | None = None

    @property
    def n_pages(self) -> int:
        return int(self.data.shape[0])

    @property
    def last(self) -> int:
        return self.first + self.n_pages - 1

    def page(self, index: int):
        if not 0 <= index < self.n_pages:
            raise IndexError(f"page {index} outside region {self.name}")
        oob = self.oob[index] if self.oob is not None else np.zeros(0, dtype=np.uint8)
        return self.data[index], oob

    def slot_view(self) -> np.ndarray:
        """``(n_pages, slots, slot_bytes)`` view of the occupied page prefix."""
        used = self.data[:, : self.slots * self.slot_bytes]
        return used.reshape(self.n_pages, self.slots, self.slot_bytes)

    def item(self, position: int) -> np.ndarray:
        if not 0 <= position < self.n_items:
            raise IndexError(f"slot {position} outside region {self.name}")
        page, off = divmod(position, self.slots)
        lo = off * self.slot_bytes
        return self.data[page, lo : lo + self.slot_bytes]

    def mini_page(self, position: int) -> MiniPageAddress:
        page, off = divmod(position, self.slots)
        return MiniPageAddress(self.first + page, off)


@dataclass
class DocumentRegion:
    """Document chunks, one per subpage or one per page; stored unpadded."""

    first: int
    chunks: list
    slot_bytes: int
    slots: int
    page_size: int
    cell: str = "tlc"
    name: str = "documents"

    @property
    def n_pages(self) -> int:
        return max(1, math.ceil(len(self.chunks) / self.slots))

    @property
    def last(self) -> int:
        return self.first + self.n_pages - 1

    @property
    def n_items(self) -> int:
        return len(self.chunks)

    def page(self, index: int):
        if not 0 <= index < self.n_pages:
            raise IndexError(f"page {index} outside document region")
        buf = np.zeros(self.page_size, dtype=np.uint8)
        for s in range(self.slots):
            i = index * self.slots + s
            if i >= len(self.chunks):
                break
            c = self.chunks[i]
            buf[s * self.slot_bytes : s * self.slot_bytes + len(c)] = np.frombuffer(c, dtype=np.uint8)
        return buf, np.zeros(0, dtype=np.uint8)

    def chunk(self, dadr: int) -> bytes:
        if not 0 <= dadr < len(self.chunks):
            raise LayoutError(f"DADR {dadr} outside the document region")
        return self.chunks[dadr]

    def page_of(self, dadr: int) -> int:
        return self.first + dadr // self.slots

    def footprint_bytes(self) -> int:
        return self.n_pages * self.page_size


@dataclass
class DeployedDatabase:
    db_id: int
    config: SsdConfig
    quantizer: QuantizerModel
    flash: FlashArray
    binary: DenseRegion
    documents: DocumentRegion
    rdb: RdbEntry
    # binary-region position -> dataset index
    order: np.ndarray
    int8: DenseRegion | None = None
    centroids: DenseRegion | None = None
    rivf: list[RivfEntry] = field(default_factory=list)
    nprobe_for_recall: dict = field(default_factory=dict)

    @property
    def dim(self) -> int:
        return self.quantizer.dim

    @property
    def n_vectors(self) -> int:
        return self.binary.n_items

    @property
    def is_ivf(self) -> bool:
        return self.centroids is not None

    @property
    def nlist(self) -> int:
        return len(self.rivf)

    @property
    def geometry(self):
        return self.config.geometry

    @property
    def end_address(self) -> int:
        return self.documents.last + 1

    def sub_regions(self) -> dict:
        out = {}
        for r in (self.centroids, self.binary, self.int8):
            if r is not None:
                out[r.name] = (r.first, r.last)
        out["documents"] = (self.documents.first, self.documents.last)
        return out

    def footprint_bytes(self) -> int:
        page = self.geometry.page_size
        dense = sum(r.n_pages * page for r in (self.centroids, self.binary, self.int8) if r is not None)
        return dense + self.documents.footprint_bytes()

    # OOB decoding -------------------------------------------------------

    def oob_dadr(self) -> np.ndarray:
        """``(n_pages, slots)`` DADR table of the binary sub-region."""
        s = self.binary.slots
        return self.binary.oob[:, : 4 * s].copy().view("<u4").reshape(-1, s)

    def oob_radr(self) -> np.ndarray | None:
        if self.int8 is None:
            return None
        s = self.binary.slots
        return self.binary.oob[:, 4 * s : 8 * s].copy().view("<u4").reshape(-1, s)

    def oob_tags(self) -> np.ndarray | None:
        if self.centroids is None:
            return None
        return self.centroids.oob[:, : self.centroids.slots].copy()

    def link_record(self, position: int) -> OobLinkRecord:
        page, off = divmod(position, self.binary.slots)
        raw = self.binary.oob[page]
        s = self.binary.slots
        dadr = int.from_bytes(raw[4 * off : 4 * off + 4].tobytes(), "little")
        radr = None
        if self.int8 is not None:
            radr = int.from_bytes(raw[4 * s + 4 * off : 4 * s + 4 * off + 4].tobytes(), "little")
        return OobLinkRecord(dadr, radr)

    def _oob_u32(self, positions, table: int) -> np.ndarray:
        s = self.binary.slots
        page, off = np.divmod(np.asarray(positions, dtype=np.int64), s)
        cols = (table * 4 * s + 4 * off)[:, None] + np.arange(4)
        raw = self.binary.oob[page[:, None], cols]
        return raw.copy().view("<u4").reshape(-1).astype(np.int64)

    def dadr_of(self, positions) -> np.ndarray:
        """DADR of each binary-region position, read from the OOB tables."""
        return self._oob_u32(positions, 0)

    def radr_of(self, positions) -> np.ndarray:
        if self.int8 is None:
            raise LayoutError("database was deployed without INT8 embeddings")
        return self._oob_u32(positions, 1)

    def int8_vectors(self, radr) -> np.ndarray:
        page, off = np.divmod(np.asarray(radr, dtype=np.int64), self.int8.slots)
        return self.int8.slot_view()[page, off].view(np.int8)

    def lookup_document(self, dadr: int) -> bytes:
        return self.documents.chunk(dadr)

    def int8_vector(self, radr: int) -> np.ndarray:
        if self.int8 is None:
            raise LayoutError("database was deployed without INT8 embeddings")
        if not 0 <= radr < self.int8.n_items:
            raise LayoutError(f"RADR {radr} outside the INT8 sub-region")
        return self.int8.item(radr).view(np.int8)

    def int8_page_of(self, radr) -> np.ndarray:
        return self.int8.first + np.asarray(radr) // self.int8.slots

    def cluster_of_centroid(self) -> dict:
        return {e.centroid_addr: c for c, e in enumerate(self.rivf)}


def next_page_address(current: int, region_bounds: tuple[int, int]):
    """The page after ``current`` inside ``[first, last]``, or ``END_OF_REGION``."""
    first, last = region_bounds
    if not first <= current <= last:
        raise LayoutError(f"page {current} outside region {region_bounds}")
    return current + 1 if current < last else END_OF_REGION


def iter_region_pages(region_bounds: tuple[int, int]):
    addr = region_bounds[0]
    while addr is not END_OF_REGION:
        yield addr
        addr = next_page_address(addr, region_bounds)


def _align_up(x: int, p: int) -> int:
    return -(-x // p) * p


def _pack_slots(rows: np.ndarray, slots: int, page_size: int) -> np.ndarray:
    n, width = rows.shape
    n_pages = max(1, math.ceil(n / slots))
    data = np.zeros((n_pages, page_size), dtype=np.uint8)
    padded = np.zeros((n_pages * slots, width), dtype=np.uint8)
    padded[:n] = rows.view(np.uint8)
    data[:, : slots * width] = padded.reshape(n_pages, slots * width)
    return data


def _quantize_rows(x, order, fn, q, block=8192):
    parts = [fn(x[order[i : i + block]], q) for i in range(0, order.size, block)]
    return np.concatenate(parts, axis=0)


def _as_chunks(documents) -> list[bytes]:
    out = []
    for d in documents:
        if isinstance(d, str):
            d = d.encode("utf-8")
        out.append(bytes(d))
    return out


def _deploy(
    vectors,
    documents,
    quantizer: QuantizerModel,
    config: SsdConfig | None,
    *,
    db_id: int,
    start_address: int,
    order: np.ndarray,
    index: IvfIndex | None,
    with_int8: bool,
    doc_index,
) -> DeployedDatabase:
    config = config or preset("reis-ssd1")
    g = config.geometry
    x = as_fp32_matrix(vectors, byte_aligned=True)
    n, d = x.shape
    if d != quantizer.dim:
        raise DimensionError(f"vectors have D={d}, quantizer expects {quantizer.dim}")
    chunks = _as_chunks(documents)
    if doc_index is None:
        if len(chunks) != n:
            raise LayoutError(f"{n} vectors but {len(chunks)} documents")
        doc_index = np.arange(n)
    else:
        doc_index = np.asarray(doc_index, dtype=np.int64)
        if doc_index.shape != (n,) or doc_index.min() < 0 or doc_index.max() >= len(chunks):
            raise LayoutError("doc_index must map every vector to an existing document")
    longest = max((len(c) for c in chunks), default=0)
    if longest > g.page_size:
        raise LayoutError(f"document chunk of {longest} B exceeds the {g.page_size} B page")
    doc_slot_bytes = g.subpage_size if longest <= g.subpage_size else g.page_size

    emb_bytes = d // 8
    slots = slots_per_page(g, emb_bytes)
    if link_table_bytes(slots, with_int8) > g.oob_size:
        raise LayoutError("OOB link table does not fit the spare area")
    P = g.total_planes
    addr = _align_up(start_address, P)

    centroid_region = None
    rivf: list[RivfEntry] = []
    if index is not None:
        cbits = binarize(index.centroids, quantizer)
        cdata = _pack_slots(cbits, slots, g.page_size)
        coob = np.zeros((cdata.shape[0], g.oob_size), dtype=np.uint8)
        tags = index.tags
        flat = np.zeros(cdata.shape[0] * slots, dtype=np.uint8)
        flat[: index.nlist] = tags
        coob[:, :slots] = flat.reshape(-1, slots)
        centroid_region = DenseRegion("centroids", addr, cdata, emb_bytes, slots, index.nlist, "slc", coob)
        addr = _align_up(addr + centroid_region.n_pages, P)

    bits = _quantize_rows(x, order, binarize, quantizer)
    bdata = _pack_slots(bits, slots, g.page_size)
    n_bpages = bdata.shape[0]
    link = np.zeros((n_bpages * slots, 2), dtype="<u4")
    link[:n, 0] = doc_index[order]
    link[:n, 1] = np.arange(n)
    boob = np.zeros((n_bpages, g.oob_size), dtype=np.uint8)
    boob[:, : 4 * slots] = link[:, 0].copy().view(np.uint8).reshape(n_bpages, 4 * slots)
    if with_int8:
        boob[:, 4 * slots : 8 * slots] = link[:, 1].copy().view(np.uint8).reshape(n_bpages, 4 * slots)
    binary_region = DenseRegion("binary", addr, bdata, emb_bytes, slots, n, "slc", boob)
    addr = _align_up(addr + n_bpages, P)

    int8_region = None
    if with_int8:
        if d > g.page_size:
            raise LayoutError("INT8 embedding larger than a page")
        islots = slots_per_page(g, d)
        idata = _pack_slots(_quantize_rows(x, order, quantize_int8, quantizer), islots, g.page_size)
        int8_region = DenseRegion("int8", addr, idata, d, islots, n, "tlc", None)
        addr = _align_up(addr + int8_region.n_pages, P)

    doc_region = DocumentRegion(addr, chunks, doc_slot_bytes, g.page_size // doc_slot_bytes, g.page_size)
    if doc_region.last >= g.total_pages:
        raise CapacityError("database does not fit on the device")

    if index is not None:
        pos = 0
        for c, members in enumerate(index.cluster_members):
            rivf.append(
                RivfEntry(centroid_region.mini_page(c), pos, pos + members.size - 1, int(index.tags[c]))
            )
            pos += members.size

    flash = FlashArray(g)
    emb_first_region = centroid_region or binary_region
    emb_last_region = int8_region or binary_region
    for r in (centroid_region, binary_region, int8_region, doc_region):
        if r is not None:
            flash.add_region(r)
    rdb = RdbEntry(
        db_id,
        MiniPageAddress(emb_first_region.first, 0),
        emb_last_region.mini_page(emb_last_region.n_items - 1),
        MiniPageAddress(doc_region.first, 0),
        MiniPageAddress(doc_region.last, (len(chunks) - 1) % doc_region.slots if chunks else 0),
    )
    return DeployedDatabase(
        db_id=db_id,
        config=config,
        quantizer=quantizer,
        flash=flash,
        binary=binary_region,
        documents=doc_region,
        rdb=rdb,
        order=np.asarray(order, dtype=np.int64),
        int8=int8_region,
        centroids=centroid_region,
        rivf=rivf,
    )


def deploy_flat(
    vectors,
    documents,
    quantizer: QuantizerModel,
    config: SsdConfig | None = None,
    *,
    db_id: int = 0,
    start_address: int = 0,
    with_int8: bool = True,
    doc_index=None,
) -> DeployedDatabase:
    """Write a brute-force database: binary embeddings in dataset order."""
    n = as_fp32_matrix(vectors).shape[0]
    return _deploy(
        vectors,
        documents,
        quantizer,
        config,
        db_id=db_id,
        start_address=start_address,
        order=np.arange(n),
        index=None,
        with_int8=with_int8,
        doc_index=doc_index,
    )


def deploy_ivf(
    vectors,
    documents,
    index: IvfIndex,
    quantizer: QuantizerModel,
    config: SsdConfig | None = None,
    *,
    db_id: int = 0,
    start_address: int = 0,
    with_int8: bool = True,
    doc_index=None,
) -> DeployedDatabase:
    """Write an IVF database: cluster-major binary region plus centroids and R-IVF."""
    n = as_fp32_matrix(vectors).shape[0]
    if index.assignments.shape[0] != n:
        raise LayoutError(f"index covers {index.assignments.shape[0]} vectors, dataset has {n}")
    if index.dim != quantizer.dim:
        raise DimensionError("index and quantizer dimensionality differ")
    index.validate(n)
    order = np.concatenate([np.sort(m) for m in index.cluster_members]).astype(np.int64)
    return _deploy(
        vectors,
        documents,
        quantizer,
        config,
        db_id=db_id,
        start_address=start_address,
        order=order,
        index=index,
        with_int8=with_int8,
        doc_index=doc_index,
    )


# On-disk image ----------------------------------------------------------------

MANIFEST = "manifest.json"


def save_image(db: DeployedDatabase, directory) -> Path:
    """Write manifest, region and OOB files, R-DB/R-IVF records and documents."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    g = db.geometry

    def dense(r: DenseRegion | None):
        if r is None:
            return None
        (out / f"{r.name}.bin").write_bytes(r.data.tobytes())
        if r.oob is not None:
            (out / f"{r.name}.oob").write_bytes(r.oob.tobytes())
        return {
            "first": r.first,
            "n_pages": r.n_pages,
            "slot_bytes": r.slot_bytes,
            "slots": r.slots,
            "n_items": r.n_items,
            "cell": r.cell,
            "oob": r.oob is not None,
        }

    with open(out / "documents.bin", "wb") as fh:
        for c in db.documents.chunks:
            fh.write(struct.pack("<I", len(c)))
            fh.write(c)
    (out / "order.u32").write_bytes(db.order.astype("<u4").tobytes())
    (out / "rdb.bin").write_bytes(pack_rdb(db.rdb))
    (out / "rivf.bin").write_bytes(b"".join(pack_rivf(e) for e in db.rivf))
    (out / "quantizer.bin").write_bytes(db.quantizer.to_bytes())
    manifest = {
        "db_id": db.db_id,
        "D": db.dim,
        "n_vectors": db.n_vectors,
        "n_documents": db.documents.n_items,
        "nlist": db.nlist,
        "preset": db.config.name,
        "geometry": _asdict(g),
        "timing": _asdict(db.config.timing),
        "energy": _asdict(db.config.energy),
        "regions": {
            "centroids": dense(db.centroids),
            "binary": dense(db.binary),
            "int8": dense(db.int8),
            "documents": {
                "first": db.documents.first,
                "n_pages": db.documents.n_pages,
                "slot_bytes": db.documents.slot_bytes,
                "slots": db.documents.slots,
                "n_items": db.documents.n_items,
                "cell": db.documents.cell,
            },
        },
        "sub_regions": {k: list(v) for k, v in db.sub_regions().items()},
        "footprint_bytes": db.footprint_bytes(),
        "nprobe_for_recall": {str(k): v for k, v in sorted(db.nprobe_for_recall.items())},
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out


def _asdict(obj) -> dict:
    return dataclasses.asdict(obj)


def load_image(directory) -> DeployedDatabase:
    from .ssd import EnergyParams, SsdGeometry, TimingParams

    src = Path(directory)
    try:
        manifest = json.loads((src / MANIFEST).read_text())
    except FileNotFoundError:
        raise LayoutError(f"{src} is not a deployed image (no {MANIFEST})") from None
    g = SsdGeometry(**manifest["geometry"])
    config = SsdConfig(
        name=manifest["preset"],
        geometry=g,
        timing=TimingParams(**manifest["timing"]),
        energy=EnergyParams(**manifest["energy"]),
    )

    def dense(name):
        meta = manifest["regions"].get(name)
        if meta is None:
            return None
        data = np.fromfile(src / f"{name}.bin", dtype=np.uint8).reshape(meta["n_pages"], g.page_size)
        oob = None
        if meta["oob"]:
            oob = np.fromfile(src / f"{name}.oob", dtype=np.uint8).reshape(meta["n_pages"], g.oob_size)
        return DenseRegion(
            name, meta["first"], data, meta["slot_bytes"], meta["slots"], meta["n_items"], meta["cell"], oob
        )

    chunks = []
    raw = (src / "documents.bin").read_bytes()
    off = 0
    while off < len(raw):
        (ln,) = struct.unpack_from("<I", raw, off)
        chunks.append(raw[off + 4 : off + 4 + ln])
        off += 4 + ln
    dmeta = manifest["regions"]["documents"]
    docs = DocumentRegion(dmeta["first"], chunks, dmeta["slot_bytes"], dmeta["slots"], g.page_size, dmeta["cell"])
    rivf_raw = (src / "rivf.bin").read_bytes()
    rivf = [unpack_rivf(rivf_raw[i : i + RIVF_BYTES]) for i in range(0, len(rivf_raw), RIVF_BYTES)]
    centroids, binary, int8 = dense("centroids"), dense("binary"), dense("int8")
    flash = FlashArray(g)
    for r in (centroids, binary, int8, docs):
        if r is not None:
            flash.add_region(r)
    return DeployedDatabase(
        db_id=manifest["db_id"],
        config=config,
        quantizer=QuantizerModel.from_bytes((src / "quantizer.bin").read_bytes()),
        flash=flash,
        binary=binary,
        documents=docs,
        rdb=unpack_rdb((src / "rdb.bin").read_bytes()),
        order=np.fromfile(src / "order.u32", dtype="<u4").astype(np.int64),
        int8=int8,
        centroids=centroids,
        rivf=rivf,
        nprobe_for_recall={float(k): int(v) for k, v in manifest.get("nprobe_for_recall", {}).items()},
    )


def image_digest(directory) -> str:
    """SHA-256 over every file of an on-disk image, in name order."""
    h = hashlib.sha256()
    for p in sorted(Path(directory).iterdir()):
        if p.is_file():
            h.update(p.name.encode())
            h.update(p.read_bytes())
    return h.hexdigest()


__all__ = [
    "CapacityError",
    "DeployedDatabase",
    "DenseRegion",
    "DocumentRegion",
    "END_OF_REGION",
    "LayoutError",
    "OobLinkRecord",
    "RDB_BYTES",
    "RIVF_BYTES",
    "RdbEntry",
    "RivfEntry",
    "deploy_flat",
    "deploy_ivf",
    "image_digest",
    "iter_region_pages",
    "link_table_bytes",
    "load_image",
    "next_page_address",
    "pack_rdb",
    "pack_rivf",
    "save_image",
    "unpack_rdb",
    "unpack_rivf",
]
