"""Parameterized SSD: geometry, timing/energy constants and page-buffer latches.

Physical page addresses interleave planes: address ``a`` lives on plane
``a % P`` at plane-local row ``a // P``, with ``P`` the total plane count.
Plane ids run channel-first, so consecutive addresses rotate across
channels, then dies, then planes within a die. Incrementing an address
therefore walks the array in parallelism-first order.
"""

from __future__ import annotations

import bisect
import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Protocol

import numpy as np

from .vectors import popcount

PAGE_ADDRESS_BITS = 33
OFFSET_BITS = 7
MAX_SLOTS_PER_PAGE = 1 << OFFSET_BITS
MINI_PAGE_BYTES = 5


@dataclass(frozen=True)
class SsdGeometry:
    channels: int = 8
    dies_per_channel: int = 16
    planes_per_die: int = 2
    page_size: int = 16384
    subpage_size: int = 4096
    oob_size: int = 2208
    pages_per_block: int = 1024
    blocks_per_plane: int = 2048

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 1:
                raise ValueError(f"{f.name} must be >= 1")
        if self.page_size % self.subpage_size:
            raise ValueError("page_size must be a multiple of subpage_size")
        if self.total_pages > 1 << PAGE_ADDRESS_BITS:
            raise ValueError("geometry exceeds the 33-bit page address space")

    @property
    def total_planes(self) -> int:
        return self.channels * self.dies_per_channel * self.planes_per_die

    @property
    def total_dies(self) -> int:
        return self.channels * self.dies_per_channel

    @property
    def pages_per_plane(self) -> int:
        return self.pages_per_block * self.blocks_per_plane

    @property
    def total_pages(self) -> int:
        return self.total_planes * self.pages_per_plane

    @property
    def subpages_per_page(self) -> int:
        return self.page_size // self.subpage_size

    def plane_of(self, address):
        return np.asarray(address) % self.total_planes if np.ndim(address) else int(address) % self.total_planes

    def row_of(self, address):
        return np.asarray(address) // self.total_planes if np.ndim(address) else int(address) // self.total_planes

    def channel_of_plane(self, plane):
        return plane % self.channels

    def die_of_plane(self, plane):
        """Global die id (channel-major) hosting ``plane``."""
        ch = plane % self.channels
        die_in_ch = (plane // self.channels) % self.dies_per_channel
        return ch * self.dies_per_channel + die_in_ch

    def plane_location(self, plane: int) -> tuple[int, int, int]:
        """(channel, die within channel, plane within die)."""
        c = self.channels
        return plane % c, (plane // c) % self.dies_per_channel, plane // (c * self.dies_per_channel)

    def check_address(self, address: int):
        if not 0 <= address < self.total_pages:
            raise IndexError(f"page address {address} outside device (0..{self.total_pages - 1})")


@dataclass(frozen=True)
class TimingParams:
    """Latency constants. Defaults marked (assumed) are modeling assumptions."""

    t_read_page: float = 22.5  # us, ESP-SLC page sense
    t_read_page_tlc: float = 60.0  # us (assumed)
    t_latch_xor: float = 2.0  # us per page (assumed)
    t_bit_count: float = 0.1  # us per Mini-Page (assumed)
    channel_bw: float = 1.2  # GB/s per channel
    t_dram_access: float = 50.0  # ns per 64 B (assumed)
    core_select_throughput: float = 10.0  # TTL entries/us (assumed)
    core_int8_macs_per_us: float = 1000.0  # (assumed)
    # overlap fail-bit counting with the next page sense under pipelining
    overlap_count_with_read: bool = False

    def __post_init__(self):
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if f.type in ("float", float) and not v > 0:
                raise ValueError(f"{f.name} must be strictly positive")


@dataclass(frozen=True)
class EnergyParams:
    """Energy constants, all assumed defaults."""

    e_read_page: float = 1.0  # uJ per SLC page sense
    e_read_page_tlc: float = 2.5  # uJ per TLC page sense
    e_latch_op: float = 0.02  # uJ per latch XOR or bit-count invocation
    e_channel_byte: float = 0.01  # nJ/B
    e_core_active: float = 300.0  # mW
    e_dram_access: float = 2.0  # nJ per 64 B

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")


@dataclass(frozen=True)
class SsdConfig:
    name: str = "custom"
    geometry: SsdGeometry = field(default_factory=SsdGeometry)
    timing: TimingParams = field(default_factory=TimingParams)
    energy: EnergyParams = field(default_factory=EnergyParams)


PRESETS = {
    "reis-ssd1": SsdConfig(
        name="reis-ssd1",
        geometry=SsdGeometry(channels=8, dies_per_channel=16, planes_per_die=2, blocks_per_plane=2048),
        timing=TimingParams(channel_bw=1.2),
    ),
    "reis-ssd2": SsdConfig(
        name="reis-ssd2",
        geometry=SsdGeometry(channels=16, dies_per_channel=8, planes_per_die=4, blocks_per_plane=1024),
        timing=TimingParams(channel_bw=2.0),
    ),
}


def preset(name: str) -> SsdConfig:
    try:
        return PRESETS[name]
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None


_SECTIONS = {"geometry": SsdGeometry, "timing": TimingParams, "energy": EnergyParams}


def _coerce(cls, key, raw):
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    if key not in types:
        raise ValueError(f"unknown key {key!r} for section {cls.__name__}")
    t = types[key]
    if t in ("int", int):
        return int(raw)
    if t in ("bool", bool):
        return raw.strip().lower() in ("1", "true", "yes", "on")
    return float(raw)


def load_config(path: str | os.PathLike | None = None, preset_name: str | None = None) -> SsdConfig:
    """Build an :class:`SsdConfig` from a preset overlaid with an INI file.

    The file has optional ``[ssd]`` (``preset = ...``), ``[geometry]``,
    ``[timing]`` and ``[energy]`` sections whose keys are the dataclass field
    names. Other sections (e.g. ``[host]``) are ignored here.
    """
    parser = configparser.ConfigParser()
    if path is not None:
        with open(path) as fh:
            parser.read_file(fh)
    name = preset_name or parser.get("ssd", "preset", fallback="reis-ssd1")
    base = preset(name)
    parts = {"geometry": base.geometry, "timing": base.timing, "energy": base.energy}
    overridden = False
    for section, cls in _SECTIONS.items():
        if parser.has_section(section):
            updates = {k: _coerce(cls, k, v) for k, v in parser.items(section)}
            if updates:
                overridden = True
                parts[section] = dataclasses.replace(parts[section], **updates)
    return SsdConfig(name=name if not overridden else f"{name}+custom", **parts)


def embeddings_per_page(geometry: SsdGeometry, embedding_bytes: int) -> int:
    if embedding_bytes < 1:
        raise ValueError("embedding_bytes must be positive")
    if embedding_bytes > geometry.page_size:
        raise ValueError(f"embedding of {embedding_bytes} B does not fit a {geometry.page_size} B page")
    return geometry.page_size // embedding_bytes


def slots_per_page(geometry: SsdGeometry, embedding_bytes: int) -> int:
    """Usable Mini-Page slots per page: capped by the 7-bit offset field."""
    return min(embeddings_per_page(geometry, embedding_bytes), MAX_SLOTS_PER_PAGE)


def channel_transfer_time(nbytes: int, channel_bw: float) -> float:
    """Microseconds to move ``nbytes`` at ``channel_bw`` GB/s, rounded to 1 ns."""
    if nbytes < 0:
        raise ValueError("byte count must be non-negative")
    if nbytes == 0:
        return 0.0
    # bytes / (GB/s) = ns; keep the division exact, then round to whole ns
    ns = Fraction(int(nbytes)) / Fraction(str(channel_bw))
    return round(ns) / 1000.0


def pass_fail_compare(value: int, threshold: int) -> bool:
    """Pass/fail checker: pass iff ``value <= threshold``."""
    return value <= threshold


@dataclass(frozen=True, order=True)
class MiniPageAddress:
    page_address: int
    offset: int

    def __post_init__(self):
        if not 0 <= self.page_address < 1 << PAGE_ADDRESS_BITS:
            raise ValueError(f"page address {self.page_address} exceeds {PAGE_ADDRESS_BITS} bits")
        if not 0 <= self.offset < MAX_SLOTS_PER_PAGE:
            raise ValueError(f"offset {self.offset} exceeds {OFFSET_BITS} bits")

    @property
    def packed(self) -> int:
        return (self.page_address << OFFSET_BITS) | self.offset

    @classmethod
    def from_int(cls, value: int) -> "MiniPageAddress":
        if not 0 <= value < 1 << (PAGE_ADDRESS_BITS + OFFSET_BITS):
            raise ValueError("Mini-Page value exceeds 40 bits")
        return cls(value >> OFFSET_BITS, value & (MAX_SLOTS_PER_PAGE - 1))


def pack_mini_page(addr: MiniPageAddress) -> bytes:
    return addr.packed.to_bytes(MINI_PAGE_BYTES, "little")


def unpack_mini_page(raw: bytes) -> MiniPageAddress:
    if len(raw) != MINI_PAGE_BYTES:
        raise ValueError(f"Mini-Page field must be {MINI_PAGE_BYTES} bytes")
    return MiniPageAddress.from_int(int.from_bytes(raw, "little"))


class Region(Protocol):
    first: int
    n_pages: int
    cell: str

    def page(self, index: int) -> tuple[np.ndarray, np.ndarray]: ...


class UnwrittenPageError(LookupError):
    pass


class FlashArray:
    """Sparse page store made of contiguous, non-overlapping regions."""

    def __init__(self, geometry: SsdGeometry):
        self.geometry = geometry
        self._starts: list[int] = []
        self._regions: list[Region] = []

    def add_region(self, region: Region):
        g = self.geometry
        if region.n_pages < 0 or region.first < 0 or region.first + region.n_pages > g.total_pages:
            raise ValueError("region falls outside the device")
        i = bisect.bisect_left(self._starts, region.first)
        for nb in self._regions[max(i - 1, 0) : i + 1]:
            if region.first < nb.first + nb.n_pages and nb.first < region.first + region.n_pages:
                raise ValueError("regions overlap")
        self._starts.insert(i, region.first)
        self._regions.insert(i, region)

    def region_at(self, address: int) -> Region:
        i = bisect.bisect_right(self._starts, address) - 1
        if i >= 0:
            r = self._regions[i]
            if address < r.first + r.n_pages:
                return r
        raise UnwrittenPageError(f"page {address} has not been written")

    def read(self, address: int) -> tuple[np.ndarray, np.ndarray]:
        self.geometry.check_address(address)
        r = self.region_at(address)
        return r.page(address - r.first)

    @property
    def regions(self) -> tuple[Region, ...]:
        return tuple(self._regions)


@dataclass
class FlashEvent:
    """One modeled flash/controller command."""

    cmd: str
    plane: int | None = None
    address: int | None = None
    latency_us: float = 0.0
    energy_uj: float = 0.0
    info: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {"cmd": self.cmd, "latency_us": round(self.latency_us, 6), "energy_uj": round(self.energy_uj, 9)}
        if self.plane is not None:
            d["plane"] = self.plane
        if self.address is not None:
            d["address"] = self.address
        d.update(self.info)
        return d


class PlaneBuffer:
    """Sensing, cache and data latches plus the OOB latch of one plane.

    Operations append :class:`FlashEvent` records to ``self.events``.
    """

    def __init__(self, plane: int, config: SsdConfig):
        g = config.geometry
        self.plane = plane
        self.config = config
        self.sensing = np.zeros(g.page_size, dtype=np.uint8)
        self.cache = np.zeros(g.page_size, dtype=np.uint8)
        self.data = np.zeros(g.page_size, dtype=np.uint8)
        self.oob = np.zeros(g.oob_size, dtype=np.uint8)
        self._sensed = self._cached = self._xored = False
        self.events: list[FlashEvent] = []

    def load_cache(self, content: np.ndarray, latency_us: float = 0.0, cmd: str = "IBC"):
        content = np.asarray(content, dtype=np.uint8)
        if content.shape != self.cache.shape:
            raise ValueError("cache latch content must be exactly one page")
        self.cache[:] = content
        self._cached = True
        self.events.append(FlashEvent(cmd, self.plane, latency_us=latency_us))

    def read_page(self, flash: FlashArray, address: int, cell: str | None = None) -> float:
        g = self.config.geometry
        g.check_address(address)
        if g.plane_of(address) != self.plane:
            raise ValueError(f"page {address} belongs to plane {g.plane_of(address)}, not {self.plane}")
        region = flash.region_at(address)
        data, oob = region.page(address - region.first)
        self.sensing[:] = data
        self.oob[:] = 0
        self.oob[: oob.size] = oob
        self._sensed = True
        cell = cell or region.cell
        t = self.config.timing
        e = self.config.energy
        lat = t.t_read_page if cell == "slc" else t.t_read_page_tlc
        en = e.e_read_page if cell == "slc" else e.e_read_page_tlc
        self.events.append(FlashEvent("READ", self.plane, address, lat, en))
        return lat

    def latch_xor(self) -> float:
        if not (self._sensed and self._cached):
            raise RuntimeError("XOR needs both the sensing and cache latches populated")
        np.bitwise_xor(self.sensing, self.cache, out=self.data)
        self._xored = True
        lat = self.config.timing.t_latch_xor
        self.events.append(FlashEvent("XOR", self.plane, latency_us=lat, energy_uj=self.config.energy.e_latch_op))
        return lat

    def count_fail_bits(self, slot: int, embedding_bytes: int) -> int:
        if not self._xored:
            raise RuntimeError("fail-bit count needs a populated data latch")
        lo = slot * embedding_bytes
        hi = lo + embedding_bytes
        if slot < 0 or hi > self.data.size:
            raise IndexError(f"slot {slot} outside the page")
        self.events.append(
            FlashEvent(
                "GEN_DIST",
                self.plane,
                latency_us=self.config.timing.t_bit_count,
                energy_uj=self.config.energy.e_latch_op,
                info={"slot": slot},
            )
        )
        return int(popcount(self.data[lo:hi]))
