"""In-storage ANNS engine: functional search plus latency/energy accounting.

A search runs input broadcasting (IBC), an optional coarse scan over the
binary centroids, a fine scan over the selected binary embeddings, INT8
reranking of ``candidate_multiplier * k`` candidates and document fetch.

Page scans are modeled per iteration: every plane senses one page per
iteration, in lockstep. An iteration has three arms,

* die arm: page sense + latch XOR + one fail-bit count per scanned slot,
* transfer arm: surviving TTL entries over each channel (channels in parallel),
* select arm: quickselect on the controller core over the retained plus new
  entries, and the DRAM traffic of touching them.

Without pipelining arms run back to back. With pipelining the three arms form
a three-stage flow shop and the iteration after ``i`` may start sensing as
soon as the die arm of ``i`` finishes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .layout import DenseRegion, DeployedDatabase, LayoutError, RivfEntry, deploy_flat, deploy_ivf
from .select import composite_keys, quickselect_smallest, quicksort
from .ssd import (
    MiniPageAddress,
    PlaneBuffer,
    SsdConfig,
    channel_transfer_time,
    pass_fail_compare,
    preset,
)
from .vectors import (
    DimensionError,
    as_fp32_matrix,
    binarize,
    hamming_to_many,
    int8_squared_l2_many,
    quantize_int8,
    train_quantizer,
)

DIST_BYTES = 2
EADR_BYTES = 5
TAG_BYTES = 1
LINK_BYTES = 4
DRAM_LINE = 64
STAGES = ("ibc", "scan", "transfer", "select", "rerank", "doc_fetch")


def ttl_c_entry_bytes(dim: int) -> int:
    return DIST_BYTES + dim // 8 + EADR_BYTES + TAG_BYTES


def ttl_e_entry_bytes(dim: int) -> int:
    return DIST_BYTES + dim // 8 + 2 * LINK_BYTES


@dataclass(frozen=True)
class TtlEntryC:
    """Coarse-phase staging entry: one binary centroid."""

    dist: int
    emb: bytes
    eadr: MiniPageAddress
    tag: int

    def pack(self) -> bytes:
        return (
            self.dist.to_bytes(DIST_BYTES, "little")
            + self.emb
            + self.eadr.packed.to_bytes(EADR_BYTES, "little")
            + bytes([self.tag])
        )


@dataclass(frozen=True)
class TtlEntryE:
    """Fine-phase staging entry: one binary embedding with its links."""

    dist: int
    emb: bytes
    radr: int
    dadr: int

    def pack(self) -> bytes:
        return (
            self.dist.to_bytes(DIST_BYTES, "little")
            + self.emb
            + self.radr.to_bytes(LINK_BYTES, "little")
            + self.dadr.to_bytes(LINK_BYTES, "little")
        )


@dataclass(frozen=True)
class SearchParams:
    """Query knobs.

    ``filter_threshold=None`` disables distance filtering even when
    ``enable_df`` is set; ``nprobe`` is ignored for flat databases.
    """

    k: int = 10
    nprobe: int = 1
    candidate_multiplier: int = 10
    filter_threshold: int | None = None
    enable_df: bool = True
    enable_pl: bool = True
    enable_mpibc: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.nprobe < 1:
            raise ValueError("nprobe must be >= 1")
        if self.candidate_multiplier < 1:
            raise ValueError("candidate_multiplier must be >= 1")
        if self.filter_threshold is not None and self.filter_threshold < 0:
            raise ValueError("filter_threshold must be >= 0")

    @property
    def n_candidates(self) -> int:
        return self.k * self.candidate_multiplier

    def effective_threshold(self, dim: int) -> int:
        if not self.enable_df or self.filter_threshold is None:
            return dim
        return min(self.filter_threshold, dim)

    def with_opts(self, level: str) -> "SearchParams":
        """Copy with one of the cumulative optimization levels applied."""
        flags = OPT_LEVELS[level]
        return replace(self, **flags)


OPT_LEVELS = {
    "none": dict(enable_df=False, enable_pl=False, enable_mpibc=False),
    "df": dict(enable_df=True, enable_pl=False, enable_mpibc=False),
    "df+pl": dict(enable_df=True, enable_pl=True, enable_mpibc=False),
    "df+pl+mpibc": dict(enable_df=True, enable_pl=True, enable_mpibc=True),
}


@dataclass(frozen=True)
class Hit:
    index: int
    distance: int
    document: bytes


@dataclass
class SearchResult:
    topk: list
    metrics: dict

    @property
    def indices(self) -> list[int]:
        return [h.index for h in self.topk]


# Latency bookkeeping -------------------------------------------------------


@dataclass
class Cost:
    """Accumulated latency (µs, per stage) and energy (µJ)."""

    stages: dict = field(default_factory=lambda: dict.fromkeys(STAGES, 0.0))
    energy_uj: float = 0.0

    def add(self, stage: str, us: float):
        self.stages[stage] += us

    @property
    def total_us(self) -> float:
        return float(sum(self.stages.values()))


def pipeline_schedule(a, b, c, pipelined: bool) -> tuple[float, float, float]:
    """Attribute iteration arms to ``(scan, transfer, select)`` stage time.

    Returns exposed time per stage; the three values sum to the phase
    makespan. Without pipelining every arm is exposed.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    seq = float(a.sum()), float(b.sum()), float(c.sum())
    if not pipelined:
        return seq
    fa = fb = fc = 0.0
    for ai, bi, ci in zip(a, b, c):
        fa += ai
        fb = max(fa, fb) + bi
        fc = max(fb, fc) + ci
    if fc >= sum(seq):
        # nothing overlapped; keep the sequential figures bit for bit
        return seq
    scan = seq[0]
    return scan, float(fb) - scan, float(fc - fb)


def total_latency(phases, ibc_us: float = 0.0, rerank_us: float = 0.0, doc_us: float = 0.0, pipelined=True):
    """Combine per-iteration arms of each scan phase into per-stage µs.

    ``phases`` is an iterable of ``(die_arm, transfer_arm, select_arm)``
    array triples, one per scan phase. Phases run one after another.
    """
    stages = dict.fromkeys(STAGES, 0.0)
    stages["ibc"] = ibc_us
    for a, b, c in phases:
        s, t, sel = pipeline_schedule(a, b, c, pipelined)
        stages["scan"] += s
        stages["transfer"] += t
        stages["select"] += sel
    stages["rerank"] = rerank_us
    stages["doc_fetch"] = doc_us
    return stages, float(sum(stages.values()))


def dram_time_us(nbytes: int, config: SsdConfig) -> float:
    return math.ceil(nbytes / DRAM_LINE) * config.timing.t_dram_access / 1000.0


def select_time_us(n_entries: int, config: SsdConfig) -> float:
    return n_entries / config.timing.core_select_throughput


def sort_time_us(n: int, config: SsdConfig) -> float:
    return n * math.log2(n) / config.timing.core_select_throughput if n > 1 else 0.0


# IBC -----------------------------------------------------------------------


@dataclass
class IbcResult:
    latency_us: float
    per_die_us: float
    cache_latch: np.ndarray
    bytes_moved: int
    energy_uj: float


def input_broadcast(query_bits, config: SsdConfig, mpibc: bool = True) -> IbcResult:
    """Fill every plane's cache latch with copies of the packed query.

    Dies on one channel load one after another; channels run in parallel.
    Without MPIBC each plane of a die receives its own page transfer.
    """
    g = config.geometry
    q = np.asarray(query_bits, dtype=np.uint8).ravel()
    n = g.page_size // q.size
    latch = np.zeros(g.page_size, dtype=np.uint8)
    latch[: n * q.size] = np.tile(q, n)
    page_us = channel_transfer_time(g.page_size, config.timing.channel_bw)
    per_die = page_us * (1 if mpibc else g.planes_per_die)
    transfers = g.total_dies * (1 if mpibc else g.planes_per_die)
    moved = transfers * g.page_size
    return IbcResult(
        latency_us=per_die * g.dies_per_channel,
        per_die_us=per_die,
        cache_latch=latch,
        bytes_moved=moved,
        energy_uj=moved * config.energy.e_channel_byte * 1e-3,
    )


# Region scan ---------------------------------------------------------------


@dataclass
class ScanResult:
    """Surviving slots of one phase and its per-iteration cost arms."""

    phase: str
    positions: np.ndarray  # region-relative slot positions of surviving entries
    dists: np.ndarray
    scanned: int
    pages_read: int
    die_arm: np.ndarray
    transfer_arm: np.ndarray
    select_arm: np.ndarray
    energy_uj: float
    bytes_transferred: int
    selected: np.ndarray | None = None  # indices into positions after quickselect

    @property
    def transferred(self) -> int:
        return int(self.positions.size)

    @property
    def filtered(self) -> int:
        return self.scanned - self.transferred


def _span_mask(spans, n_items: int, slots: int):
    """Scanned page indices and a ``(pages, slots)`` mask of scanned slots."""
    if spans is None:
        n_pages = math.ceil(n_items / slots)
        mask = np.zeros(n_pages * slots, dtype=bool)
        mask[:n_items] = True
        return np.arange(n_pages), mask.reshape(n_pages, slots)
    pos = np.zeros(math.ceil(n_items / slots) * slots, dtype=bool)
    for lo, hi in spans:
        if not 0 <= lo <= hi < n_items:
            raise LayoutError(f"span ({lo}, {hi}) outside region of {n_items} items")
        pos[lo : hi + 1] = True
    pos = pos.reshape(-1, slots)
    pages = np.flatnonzero(pos.any(axis=1))
    return pages, pos[pages]


def _iteration_of(planes: np.ndarray) -> np.ndarray:
    """Per-plane rank of each page (pages given in ascending address order)."""
    order = np.argsort(planes, kind="stable")
    sp = planes[order]
    starts = np.r_[0, np.flatnonzero(np.diff(sp)) + 1]
    group_start = np.repeat(starts, np.diff(np.r_[starts, sp.size]))
    it = np.empty_like(order)
    it[order] = np.arange(sp.size) - group_start
    return it


def _distances(region: DenseRegion, pages: np.ndarray, query_bits: np.ndarray) -> np.ndarray:
    """XOR every scanned page with the cache latch and count fail bits per slot."""
    if pages.size == region.n_pages:
        view = region.slot_view()
    else:
        view = region.slot_view()[pages]
    npg, slots, width = view.shape
    # the cache latch holds one copy of the query per slot
    return hamming_to_many(query_bits, np.ascontiguousarray(view).reshape(npg * slots, width)).reshape(npg, slots)


def scan_region(
    query_bits,
    region: DenseRegion,
    config: SsdConfig,
    *,
    entry_bytes: int,
    keep: int,
    threshold: int,
    spans=None,
    pipelined: bool = True,
    trace: list | None = None,
    phase: str = "fine",
) -> ScanResult:
    """Scan ``region`` (or the given position spans) and stage survivors.

    Slots at Hamming distance ``<= threshold`` become TTL entries of
    ``entry_bytes`` each; after every iteration the core keeps the ``keep``
    smallest by ``(dist, position)``.
    """
    g = config.geometry
    t = config.timing
    e = config.energy
    if region.n_items == 0:
        raise LayoutError("cannot scan an empty region")
    q = np.asarray(query_bits, dtype=np.uint8)
    if q.size != region.slot_bytes:
        raise DimensionError(f"query has {q.size} bytes, region slots hold {region.slot_bytes}")

    pages, mask = _span_mask(spans, region.n_items, region.slots)
    dist = _distances(region, pages, q)
    passing = mask & (dist <= threshold)
    counted = mask.sum(axis=1)
    n_pass = passing.sum(axis=1)

    addr = region.first + pages
    planes = addr % g.total_planes
    channels = planes % g.channels
    it = _iteration_of(planes)
    n_iter = int(it.max()) + 1 if it.size else 0

    read_us = t.t_read_page if region.cell == "slc" else t.t_read_page_tlc
    count_us = counted * t.t_bit_count
    if pipelined and t.overlap_count_with_read:
        page_die = np.maximum(read_us, t.t_latch_xor + count_us)
    else:
        page_die = read_us + t.t_latch_xor + count_us
    die_arm = np.zeros(n_iter)
    np.maximum.at(die_arm, it, page_die)

    chan_bytes = np.bincount(it * g.channels + channels, weights=n_pass * entry_bytes, minlength=n_iter * g.channels)
    chan_bytes = chan_bytes.reshape(n_iter, g.channels).astype(np.int64)
    transfer_arm = np.array([max(channel_transfer_time(int(b), t.channel_bw) for b in row) for row in chan_bytes])

    new_per_iter = np.bincount(it, weights=n_pass, minlength=n_iter).astype(np.int64)
    select_arm = np.zeros(n_iter)
    retained = 0
    dram_bytes = 0
    core_us = 0.0
    for i, new in enumerate(new_per_iter):
        if new == 0:
            continue
        touched = retained + int(new)
        # entries land in DRAM, then the core reads every DIST it compares
        step_dram = int(new) * entry_bytes + touched * DIST_BYTES
        sel = select_time_us(touched, config)
        select_arm[i] = sel + dram_time_us(step_dram, config)
        core_us += sel
        dram_bytes += step_dram
        retained = min(keep, touched)

    page_idx, slot_idx = np.nonzero(passing)
    positions = pages[page_idx] * region.slots + slot_idx
    dists = dist[page_idx, slot_idx]
    # survivors stream in plane-id order within an iteration, as the core merges them
    merge = np.lexsort((slot_idx, planes[page_idx], it[page_idx]))
    positions = positions[merge]
    dists = dists[merge]

    selected = None
    if positions.size > keep:
        selected = quickselect_smallest(composite_keys(dists, positions), keep)

    scanned = int(counted.sum())
    total_bytes = int(n_pass.sum()) * entry_bytes
    energy = (
        pages.size * (e.e_read_page if region.cell == "slc" else e.e_read_page_tlc)
        + pages.size * e.e_latch_op
        + scanned * e.e_latch_op
        + total_bytes * e.e_channel_byte * 1e-3
        + math.ceil(dram_bytes / DRAM_LINE) * e.e_dram_access * 1e-3
        + core_us * e.e_core_active * 1e-3
    )

    if trace is not None:
        _trace_scan(trace, phase, region, pages, planes, it, mask, dist, passing, read_us, config)

    return ScanResult(
        phase=phase,
        positions=positions.astype(np.int64),
        dists=dists.astype(np.int64),
        scanned=scanned,
        pages_read=int(pages.size),
        die_arm=die_arm,
        transfer_arm=transfer_arm,
        select_arm=select_arm,
        energy_uj=float(energy),
        bytes_transferred=total_bytes,
        selected=selected,
    )


def _trace_scan(trace, phase, region, pages, planes, it, mask, dist, passing, read_us, config):
    t = config.timing
    for i in np.lexsort((planes, it)):
        page_addr = int(region.first + pages[i])
        plane = int(planes[i])
        base = {"phase": phase, "iteration": int(it[i]), "plane": plane}
        trace.append({"cmd": "READ", "address": page_addr, "latency_us": read_us, **base})
        trace.append({"cmd": "XOR", "address": page_addr, "latency_us": t.t_latch_xor, **base})
        for s in np.flatnonzero(mask[i]):
            eadr = MiniPageAddress(page_addr, int(s)).packed
            trace.append(
                {"cmd": "GEN_DIST", "eadr": eadr, "dist": int(dist[i, s]), "latency_us": t.t_bit_count, **base}
            )
            if passing[i, s]:
                trace.append({"cmd": "RD_TTL", "eadr": eadr, **base})


def verify_scan_with_latches(query_bits, region: DenseRegion, db: DeployedDatabase, threshold: int, max_pages=None):
    """Re-run a scan page by page through :class:`PlaneBuffer` latches.

    Slow reference path used by tests; returns ``(positions, dists)`` of
    passing slots in address order.
    """
    config = db.config
    g = config.geometry
    ibc = input_broadcast(query_bits, config)
    buffers = {}
    out_pos, out_dist = [], []
    n_pages = region.n_pages if max_pages is None else min(max_pages, region.n_pages)
    for p in range(n_pages):
        addr = region.first + p
        plane = g.plane_of(addr)
        buf = buffers.get(plane)
        if buf is None:
            buf = buffers[plane] = PlaneBuffer(plane, config)
            buf.load_cache(ibc.cache_latch)
        buf.read_page(db.flash, addr)
        buf.latch_xor()
        for s in range(region.slots):
            pos = p * region.slots + s
            if pos >= region.n_items:
                break
            d = buf.count_fail_bits(s, region.slot_bytes)
            if pass_fail_compare(d, threshold):
                out_pos.append(pos)
                out_dist.append(d)
    return np.array(out_pos, dtype=np.int64), np.array(out_dist, dtype=np.int64)


# Search phases -------------------------------------------------------------


def coarse_search(query_bits, db: DeployedDatabase, nprobe: int, params: SearchParams, trace=None):
    """Scan the centroid sub-region; returns ``(R-IVF entries, ScanResult)``.

    Every centroid is staged (no filtering); clusters are ranked by
    ``(dist, centroid address)``.
    """
    if not db.is_ivf:
        raise LayoutError("coarse search needs an IVF deployment")
    nprobe = min(nprobe, db.nlist)
    res = scan_region(
        query_bits,
        db.centroids,
        db.config,
        entry_bytes=ttl_c_entry_bytes(db.dim),
        keep=nprobe,
        threshold=db.dim,
        pipelined=params.enable_pl,
        trace=trace,
        phase="coarse",
    )
    pick = res.selected if res.selected is not None else np.arange(res.positions.size)
    pos, dist = res.positions[pick], res.dists[pick]
    order = np.lexsort((pos, dist))
    # centroid slot position == cluster id
    clusters = [db.rivf[int(c)] for c in pos[order]]
    return clusters, res


def fine_search(query_bits, db: DeployedDatabase, clusters, params: SearchParams, trace=None):
    """Scan the binary embeddings of ``clusters`` (``None``: the whole region).

    Returns ``(positions, dists, ScanResult)`` with the up to
    ``params.n_candidates`` closest surviving embeddings, ordered by
    ``(dist, position)``.
    """
    spans = None if clusters is None else [(c.first_emb_index, c.last_emb_index) for c in clusters]
    res = scan_region(
        query_bits,
        db.binary,
        db.config,
        entry_bytes=ttl_e_entry_bytes(db.dim),
        keep=params.n_candidates,
        threshold=params.effective_threshold(db.dim),
        spans=spans,
        pipelined=params.enable_pl,
        trace=trace,
        phase="fine",
    )
    pick = res.selected if res.selected is not None else np.arange(res.positions.size)
    pos, dist = res.positions[pick], res.dists[pick]
    order = np.lexsort((pos, dist))
    return pos[order], dist[order], res


def _plane_read_time(page_addrs: np.ndarray, config: SsdConfig, read_us: float) -> float:
    """Longest per-plane queue of page senses (planes work in parallel)."""
    if page_addrs.size == 0:
        return 0.0
    per_plane = np.bincount(page_addrs % config.geometry.total_planes)
    return float(per_plane.max()) * read_us


def _channel_time(page_addrs: np.ndarray, nbytes: np.ndarray, config: SsdConfig) -> float:
    if page_addrs.size == 0:
        return 0.0
    g = config.geometry
    ch = (page_addrs % g.total_planes) % g.channels
    per_ch = np.bincount(ch, weights=nbytes, minlength=g.channels).astype(np.int64)
    return max(channel_transfer_time(int(b), config.timing.channel_bw) for b in per_ch)


def rerank(positions, query_int8, db: DeployedDatabase, k: int, trace=None):
    """INT8 rerank of candidate binary positions.

    Returns ``(dataset indices, int8 distances, latency_us, energy_uj)``,
    the first two sorted by ``(dist, dataset index)`` and truncated to ``k``.
    """
    config = db.config
    t = config.timing
    e = config.energy
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return np.empty(0, np.int64), np.empty(0, np.int64), 0.0, 0.0
    radr = db.radr_of(positions)
    vecs = db.int8_vectors(radr)
    dists = int8_squared_l2_many(query_int8, vecs)
    ids = db.order[positions]
    perm = quicksort(list(zip(dists.tolist(), ids.tolist())))[:k]

    pages = np.unique(db.int8_page_of(radr))
    cand_pages = db.int8_page_of(radr)
    read = _plane_read_time(pages, config, t.t_read_page_tlc)
    xfer = _channel_time(cand_pages, np.full(cand_pages.size, db.dim), config)
    compute = positions.size * db.dim / t.core_int8_macs_per_us
    sort = sort_time_us(positions.size, config)
    latency = read + xfer + compute + sort
    nbytes = positions.size * db.dim
    energy = (
        pages.size * e.e_read_page_tlc
        + nbytes * e.e_channel_byte * 1e-3
        + math.ceil(nbytes / DRAM_LINE) * e.e_dram_access * 1e-3
        + (compute + sort) * e.e_core_active * 1e-3
    )
    if trace is not None:
        for p in pages:
            trace.append({"cmd": "READ", "phase": "rerank", "address": int(p), "latency_us": t.t_read_page_tlc})
        trace.append({"cmd": "RERANK", "candidates": int(positions.size), "latency_us": compute})
        trace.append({"cmd": "SORT", "items": int(positions.size), "latency_us": sort})
    return ids[perm], dists[perm], latency, float(energy)


def fetch_documents(positions, db: DeployedDatabase, trace=None):
    """Resolve DADRs from the OOB latch and read the chunks."""
    config = db.config
    e = config.energy
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0:
        return [], 0.0, 0.0
    dadr = db.dadr_of(positions)
    docs = [db.lookup_document(int(d)) for d in dadr]
    pages = db.documents.first + dadr // db.documents.slots
    uniq = np.unique(pages)
    read = _plane_read_time(uniq, config, config.timing.t_read_page_tlc)
    sizes = np.array([len(d) for d in docs], dtype=np.int64)
    xfer = _channel_time(pages, sizes, config)
    energy = uniq.size * e.e_read_page_tlc + int(sizes.sum()) * e.e_channel_byte * 1e-3
    if trace is not None:
        for p in uniq:
            trace.append(
                {"cmd": "READ", "phase": "doc_fetch", "address": int(p), "latency_us": config.timing.t_read_page_tlc}
            )
    return docs, read + xfer, float(energy)


def search(query, db: DeployedDatabase, params: SearchParams | None = None, trace: list | None = None) -> SearchResult:
    """Top-k retrieval of one FP32 query against a deployed database."""
    params = params or SearchParams()
    x = as_fp32_matrix(query, name="query")
    if x.shape[0] != 1:
        raise DimensionError("search takes a single query; use search_batch")
    if x.shape[1] != db.dim:
        raise DimensionError(f"query has D={x.shape[1]}, database has D={db.dim}")
    if params.k > db.n_vectors:
        raise ValueError(f"k={params.k} exceeds database size {db.n_vectors}")
    if db.is_ivf and params.nprobe > db.nlist:
        raise ValueError(f"nprobe={params.nprobe} exceeds nlist={db.nlist}")
    qbits = binarize(x[0], db.quantizer)
    q8 = quantize_int8(x[0], db.quantizer)
    config = db.config
    cost = Cost()

    ibc = input_broadcast(qbits, config, params.enable_mpibc)
    cost.energy_uj += ibc.energy_uj
    if trace is not None:
        trace.append(
            {"cmd": "IBC", "dies": config.geometry.total_dies, "mpibc": params.enable_mpibc, "latency_us": ibc.latency_us}
        )

    phases = []
    scanned = transferred = pages_read = 0
    clusters = None
    centroids_scanned = 0
    if db.is_ivf:
        clusters, cres = coarse_search(qbits, db, params.nprobe, params, trace)
        phases.append(cres)
        centroids_scanned = cres.scanned
        pages_read += cres.pages_read
    pos, dist, fres = fine_search(qbits, db, clusters, params, trace)
    phases.append(fres)
    scanned += fres.scanned
    transferred += fres.transferred
    pages_read += fres.pages_read
    for ph in phases:
        cost.energy_uj += ph.energy_uj

    if db.int8 is not None:
        ids, dists, rerank_us, rerank_uj = rerank(pos, q8, db, params.k, trace)
        by_id = {int(i): p for i, p in zip(db.order[pos], pos)}
        winners = np.array([by_id[int(i)] for i in ids], dtype=np.int64)
    else:
        winners = pos[: params.k]
        ids, dists = db.order[winners], dist[: params.k]
        rerank_us = rerank_uj = 0.0
    cost.energy_uj += rerank_uj
    docs, doc_us, doc_uj = fetch_documents(winners, db, trace)
    cost.energy_uj += doc_uj

    stages, total = total_latency(
        [(p.die_arm, p.transfer_arm, p.select_arm) for p in phases],
        ibc_us=ibc.latency_us,
        rerank_us=rerank_us,
        doc_us=doc_us,
        pipelined=params.enable_pl,
    )
    n_rerank_pages = int(np.unique(db.int8_page_of(db.radr_of(pos))).size) if db.int8 is not None else 0
    n_doc_pages = int(np.unique(db.documents.first + db.dadr_of(winners) // db.documents.slots).size)
    metrics = {
        "latency_us": total,
        "stages_us": stages,
        "energy_uj": cost.energy_uj,
        "embeddings_scanned": scanned,
        "entries_transferred": transferred,
        "entries_filtered": scanned - transferred,
        "centroids_scanned": centroids_scanned,
        "candidates": int(pos.size),
        "pages_read": pages_read + n_rerank_pages + n_doc_pages,
        "bytes_transferred": ibc.bytes_moved + sum(p.bytes_transferred for p in phases),
        "clusters": [db.rivf.index(c) for c in clusters] if clusters is not None else None,
    }
    topk = [Hit(int(i), int(d), doc) for i, d, doc in zip(ids, dists, docs)]
    return SearchResult(topk, metrics)


def search_batch(queries, db: DeployedDatabase, params: SearchParams | None = None, trace=None) -> list:
    """Queries run one after another; see :func:`batch_throughput`."""
    x = as_fp32_matrix(queries, name="queries")
    return [search(q, db, params, trace) for q in x]


def batch_throughput(results) -> float:
    """Queries per second for serially executed results."""
    total_us = sum(r.metrics["latency_us"] for r in results)
    return len(results) / (total_us * 1e-6) if total_us > 0 else float("inf")


# Calibration ---------------------------------------------------------------


def _binary_codes(db: DeployedDatabase) -> np.ndarray:
    return db.binary.slot_view().reshape(-1, db.binary.slot_bytes)[: db.n_vectors]


def calibrate_filter_threshold(db: DeployedDatabase, sample_queries, target_keep_fraction: float, k: int = 10) -> int:
    """Smallest Hamming threshold keeping ``target_keep_fraction`` of entries.

    The result is also raised until every sample query keeps its ``k``
    nearest binary neighbors. ``target_keep_fraction >= 1`` disables
    filtering and returns ``D``.
    """
    x = as_fp32_matrix(sample_queries, name="sample_queries")
    qcodes = binarize(x, db.quantizer)
    return threshold_from_codes(_binary_codes(db), qcodes, target_keep_fraction, k)


def threshold_from_codes(codes, query_codes, target_keep_fraction: float, k: int = 10, block: int = 1 << 16) -> int:
    """:func:`calibrate_filter_threshold` over raw packed codes.

    ``codes`` may be any ``(n, D/8)`` uint8 array, including a memory map;
    it is read in blocks of ``block`` rows.
    """
    if not 0 < target_keep_fraction:
        raise ValueError("target_keep_fraction must be positive")
    query_codes = np.atleast_2d(np.asarray(query_codes, dtype=np.uint8))
    dim = codes.shape[1] * 8
    if query_codes.shape[1] != codes.shape[1]:
        raise DimensionError("query codes and database codes differ in width")
    if target_keep_fraction >= 1:
        return dim
    n = codes.shape[0]
    k = min(k, n)
    hist = np.zeros(dim + 1, dtype=np.int64)
    # per query, the k smallest distances seen so far
    best = np.full((query_codes.shape[0], k), dim + 1, dtype=np.int64)
    for lo in range(0, n, block):
        chunk = np.ascontiguousarray(codes[lo : lo + block])
        for j, q in enumerate(query_codes):
            d = hamming_to_many(q, chunk)
            hist += np.bincount(d, minlength=dim + 1)
            merged = np.concatenate([best[j], d])
            best[j] = np.partition(merged, k - 1)[:k]
    floor = int(best.max())
    need = target_keep_fraction * hist.sum()
    thr = int(np.searchsorted(np.cumsum(hist), need - 1e-9 * hist.sum()))
    return max(thr, floor)


def calibrate_nprobe(db: DeployedDatabase, queries, truth, targets, params: SearchParams | None = None, nprobes=None):
    """Map each target recall to the smallest nprobe reaching it.

    ``truth`` holds the true top-k dataset indices per query. The mapping is
    stored on ``db.nprobe_for_recall`` and also returned, along with the
    measured ``{nprobe: recall}`` curve.
    """
    from .host import recall_at_k

    if not db.is_ivf:
        raise LayoutError("nprobe calibration needs an IVF deployment")
    params = params or SearchParams()
    x = as_fp32_matrix(queries, name="queries")
    if nprobes is None:
        nprobes = sorted({max(1, round(db.nlist * f)) for f in (0.01, 0.02, 0.05, 0.1, 0.2, 0.5, 1.0)})
    curve = {}
    for npb in nprobes:
        p = replace(params, nprobe=int(npb))
        rec = [recall_at_k(search(q, db, p).indices, t, p.k) for q, t in zip(x, truth)]
        curve[int(npb)] = float(np.mean(rec))
    mapping = {}
    for r in targets:
        ok = [n for n, v in sorted(curve.items()) if v >= r]
        mapping[float(r)] = ok[0] if ok else db.nlist
    db.nprobe_for_recall.update(mapping)
    return mapping, curve


def nprobe_for_target(db: DeployedDatabase, target_recall: float) -> int:
    """Calibrated nprobe for the smallest stored target at or above ``target_recall``."""
    table = db.nprobe_for_recall
    ok = [table[r] for r in sorted(table) if r >= target_recall]
    return ok[0] if ok else db.nlist


# Estimator -----------------------------------------------------------------


class ReisRetriever(BaseEstimator):
    """Deploy a vector database onto the modeled SSD and query it.

    Parameters
    ----------
    preset : str
        SSD preset name, ignored when ``config`` is given.
    mode : {"flat", "ivf"}
    nlist : int or None
        IVF cluster count (``None``: square root of the dataset size).
    nprobe, k, candidate_multiplier, filter_threshold : see :class:`SearchParams`
    opt_level : {"none", "df", "df+pl", "df+pl+mpibc"}
    seed : int
        k-means seed.
    config : SsdConfig or None
    """

    def __init__(
        self,
        preset="reis-ssd1",
        mode="flat",
        nlist=None,
        nprobe=1,
        k=10,
        candidate_multiplier=10,
        filter_threshold=None,
        opt_level="df+pl+mpibc",
        seed=0,
        config=None,
    ):
        self.preset = preset
        self.mode = mode
        self.nlist = nlist
        self.nprobe = nprobe
        self.k = k
        self.candidate_multiplier = candidate_multiplier
        self.filter_threshold = filter_threshold
        self.opt_level = opt_level
        self.seed = seed
        self.config = config

    def fit(self, X, y=None, documents=None):
        """Train the quantizer (and IVF index) on ``X`` and deploy it.

        ``documents`` defaults to ``y`` and then to the row numbers as text.
        """
        from .ivf import IVFKMeans

        x = as_fp32_matrix(X, name="X", byte_aligned=True)
        if documents is None:
            documents = y if y is not None else [str(i) for i in range(x.shape[0])]
        config = self.config or preset(self.preset)
        self.quantizer_ = train_quantizer(x)
        if self.mode == "flat":
            self.db_ = deploy_flat(x, documents, self.quantizer_, config)
        elif self.mode == "ivf":
            km = IVFKMeans(nlist=self.nlist, seed=self.seed).fit(x)
            self.index_ = km.index_
            self.db_ = deploy_ivf(x, documents, self.index_, self.quantizer_, config)
        else:
            raise ValueError(f"unknown mode {self.mode!r}; expected 'flat' or 'ivf'")
        self.n_features_in_ = x.shape[1]
        return self

    def search_params(self, k=None) -> SearchParams:
        base = SearchParams(
            k=k or self.k,
            nprobe=self.nprobe,
            candidate_multiplier=self.candidate_multiplier,
            filter_threshold=self.filter_threshold,
        )
        return base.with_opts(self.opt_level)

    def search(self, X, k=None) -> list:
        check_is_fitted(self, "db_")
        return search_batch(X, self.db_, self.search_params(k))

    def kneighbors(self, X, n_neighbors=None):
        """``(int8 distances, dataset indices)``, each of shape ``(n_queries, k)``."""
        res = self.search(X, n_neighbors)
        k = n_neighbors or self.k
        dist = np.full((len(res), k), -1, dtype=np.int64)
        ind = np.full((len(res), k), -1, dtype=np.int64)
        for i, r in enumerate(res):
            dist[i, : len(r.topk)] = [h.distance for h in r.topk]
            ind[i, : len(r.topk)] = r.indices
        return dist, ind

    def predict(self, X):
        """Dataset index of the nearest neighbor of each query."""
        return self.kneighbors(X, 1)[1][:, 0]


__all__ = [
    "Hit",
    "IbcResult",
    "OPT_LEVELS",
    "ReisRetriever",
    "RivfEntry",
    "ScanResult",
    "SearchParams",
    "SearchResult",
    "TtlEntryC",
    "TtlEntryE",
    "batch_throughput",
    "calibrate_filter_threshold",
    "calibrate_nprobe",
    "coarse_search",
    "fetch_documents",
    "fine_search",
    "input_broadcast",
    "nprobe_for_target",
    "pipeline_schedule",
    "rerank",
    "scan_region",
    "search",
    "search_batch",
    "threshold_from_codes",
    "total_latency",
    "ttl_c_entry_bytes",
    "ttl_e_entry_bytes",
    "verify_scan_with_latches",
]
