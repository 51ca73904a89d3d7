import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reis_sim.ssd import (
    PRESETS,
    FlashArray,
    MiniPageAddress,
    PlaneBuffer,
    SsdConfig,
    SsdGeometry,
    TimingParams,
    UnwrittenPageError,
    channel_transfer_time,
    embeddings_per_page,
    load_config,
    pack_mini_page,
    pass_fail_compare,
    preset,
    slots_per_page,
    unpack_mini_page,
)
from reis_sim.vectors import hamming_distance


class FixedRegion:
    def __init__(self, first, pages, cell="slc", oob=None):
        self.first = first
        self.pages = pages
        self.n_pages = len(pages)
        self.cell = cell
        self.oob = oob

    def page(self, i):
        oob = self.oob[i] if self.oob is not None else np.zeros(0, np.uint8)
        return self.pages[i], oob


def tiny_config():
    g = SsdGeometry(channels=2, dies_per_channel=1, planes_per_die=2, page_size=256, subpage_size=64, oob_size=32,
                    pages_per_block=4, blocks_per_plane=2)
    return SsdConfig("tiny", g)


def test_geometry_defaults_and_counts():
    g = SsdGeometry()
    assert (g.page_size, g.subpage_size, g.oob_size) == (16384, 4096, 2208)
    assert g.total_planes == 8 * 16 * 2
    assert g.subpages_per_page == 4


@pytest.mark.parametrize("kw", [dict(channels=0), dict(page_size=10000), dict(blocks_per_plane=0)])
def test_geometry_invariants(kw):
    with pytest.raises(ValueError):
        SsdGeometry(**kw)


def test_plane_location_is_channel_first():
    g = preset("reis-ssd1").geometry
    assert g.plane_location(0) == (0, 0, 0)
    assert g.plane_location(1) == (1, 0, 0)
    assert g.plane_location(8) == (0, 1, 0)
    assert g.plane_location(128) == (0, 0, 1)
    assert g.die_of_plane(128) == g.die_of_plane(0)
    locs = {g.plane_location(p) for p in range(g.total_planes)}
    assert len(locs) == g.total_planes


def test_presets_match_device_configurations():
    s1, s2 = preset("reis-ssd1"), preset("reis-ssd2")
    assert (s1.geometry.channels, s1.geometry.dies_per_channel, s1.geometry.planes_per_die) == (8, 16, 2)
    assert (s2.geometry.channels, s2.geometry.dies_per_channel, s2.geometry.planes_per_die) == (16, 8, 4)
    assert s1.timing.channel_bw == 1.2 and s2.timing.channel_bw == 2.0
    assert s1.timing.t_read_page == 22.5
    with pytest.raises(KeyError):
        preset("nope")


def test_internal_read_bandwidth_exceeds_channels():
    for cfg in PRESETS.values():
        g, t = cfg.geometry, cfg.timing
        internal = g.total_planes * g.page_size / t.t_read_page  # bytes/us == MB/s
        channels = g.channels * t.channel_bw * 1000  # MB/s
        assert internal > channels


def test_timing_must_be_positive():
    with pytest.raises(ValueError):
        TimingParams(t_latch_xor=0)


def test_embeddings_per_page_examples():
    g = SsdGeometry()
    assert embeddings_per_page(g, 128) == 128
    assert embeddings_per_page(g, 4096) == 4
    assert embeddings_per_page(g, 16384) == 1
    with pytest.raises(ValueError):
        embeddings_per_page(g, 16385)


def test_slots_capped_by_offset_field():
    g = SsdGeometry()
    assert embeddings_per_page(g, 64) == 256
    assert slots_per_page(g, 64) == 128


def test_channel_transfer_time_examples():
    assert channel_transfer_time(1200, 1.2) == 1.0
    assert channel_transfer_time(0, 1.2) == 0.0
    assert channel_transfer_time(16384, 2.0) == 8.192
    # 16384 / 1.2 = 13653.33 ns -> 13.653 us
    assert channel_transfer_time(16384, 1.2) == 13.653


@given(st.integers(0, 10**7), st.integers(0, 10**7))
def test_channel_transfer_time_additive_within_rounding(a, b):
    t = channel_transfer_time(a, 1.2) + channel_transfer_time(b, 1.2)
    assert abs(t - channel_transfer_time(a + b, 1.2)) <= 0.001 + 1e-9


def test_pass_fail_boundary_and_sweep():
    assert pass_fail_compare(5, 5)
    assert not pass_fail_compare(6, 5)
    sweep = [pass_fail_compare(v, 512) for v in range(1025)]
    assert sweep == [True] * 513 + [False] * 512


def test_mini_page_packing_examples():
    assert pack_mini_page(MiniPageAddress(0, 0)) == bytes(5)
    raw = pack_mini_page(MiniPageAddress(1, 127))
    assert raw == bytes([0xFF, 0, 0, 0, 0])
    assert MiniPageAddress(1, 127).packed == 0xFF


@given(st.integers(0, 2**33 - 1), st.integers(0, 127))
def test_mini_page_round_trip(page, off):
    a = MiniPageAddress(page, off)
    raw = pack_mini_page(a)
    assert len(raw) == 5
    assert unpack_mini_page(raw) == a
    assert raw[0] & 0x7F == off


def test_mini_page_round_trip_10k(rng):
    pages = rng.integers(0, 2**33, 10_000)
    offs = rng.integers(0, 128, 10_000)
    for p, o in zip(pages, offs):
        a = MiniPageAddress(int(p), int(o))
        assert unpack_mini_page(pack_mini_page(a)) == a


def test_mini_page_range_checks():
    with pytest.raises(ValueError):
        MiniPageAddress(2**33, 0)
    with pytest.raises(ValueError):
        MiniPageAddress(0, 128)


def test_flash_read_and_unwritten_page(rng):
    cfg = tiny_config()
    pages = rng.integers(0, 256, (3, 256), dtype=np.uint8)
    oob = rng.integers(0, 256, (3, 32), dtype=np.uint8)
    flash = FlashArray(cfg.geometry)
    flash.add_region(FixedRegion(4, pages, oob=oob))
    data, o = flash.read(5)
    np.testing.assert_array_equal(data, pages[1])
    np.testing.assert_array_equal(o, oob[1])
    with pytest.raises(UnwrittenPageError):
        flash.read(0)
    with pytest.raises(IndexError):
        flash.read(cfg.geometry.total_pages)
    with pytest.raises(ValueError):
        flash.add_region(FixedRegion(6, pages))


def test_plane_buffer_read_xor_count(rng):
    cfg = tiny_config()
    pages = rng.integers(0, 256, (4, 256), dtype=np.uint8)
    oob = rng.integers(0, 256, (4, 32), dtype=np.uint8)
    flash = FlashArray(cfg.geometry)
    flash.add_region(FixedRegion(0, pages, oob=oob))
    buf = PlaneBuffer(1, cfg)
    with pytest.raises(RuntimeError):
        buf.latch_xor()
    query = rng.integers(0, 256, 32, dtype=np.uint8)
    buf.load_cache(np.tile(query, 8))
    assert buf.read_page(flash, 1) == cfg.timing.t_read_page
    np.testing.assert_array_equal(buf.oob, oob[1])
    sensed = buf.sensing.copy()
    buf.latch_xor()
    np.testing.assert_array_equal(buf.sensing, sensed)
    np.testing.assert_array_equal(buf.data, np.bitwise_xor(pages[1], np.tile(query, 8)))
    for s in range(8):
        assert buf.count_fail_bits(s, 32) == hamming_distance(query, pages[1][s * 32 : (s + 1) * 32])
    with pytest.raises(ValueError):
        buf.read_page(flash, 2)  # plane 2 page on plane-1 buffer
    with pytest.raises(IndexError):
        buf.count_fail_bits(8, 32)
    assert [e.cmd for e in buf.events] == ["IBC", "READ", "XOR"] + ["GEN_DIST"] * 8


def test_latch_xor_special_cases(rng):
    cfg = tiny_config()
    page = rng.integers(0, 256, (1, 256), dtype=np.uint8)
    flash = FlashArray(cfg.geometry)
    flash.add_region(FixedRegion(0, page))
    buf = PlaneBuffer(0, cfg)
    buf.load_cache(page[0])
    buf.read_page(flash, 0)
    buf.latch_xor()
    assert not buf.data.any()
    assert buf.count_fail_bits(0, 256) == 0
    buf.load_cache(np.full(256, 0xFF, np.uint8))
    buf.latch_xor()
    np.testing.assert_array_equal(buf.data, ~page[0])


def test_count_all_ones_slot():
    cfg = SsdConfig()
    buf = PlaneBuffer(0, cfg)
    buf.data[:128] = 0xFF
    buf._xored = True
    assert buf.count_fail_bits(0, 128) == 1024
    assert buf.count_fail_bits(1, 128) == 0


def test_tlc_read_uses_tlc_latency():
    cfg = tiny_config()
    flash = FlashArray(cfg.geometry)
    flash.add_region(FixedRegion(0, np.zeros((1, 256), np.uint8), cell="tlc"))
    assert PlaneBuffer(0, cfg).read_page(flash, 0) == cfg.timing.t_read_page_tlc


def test_load_config_overrides(tmp_path):
    ini = tmp_path / "sim.ini"
    ini.write_text("[ssd]\npreset = reis-ssd2\n[timing]\nt_latch_xor = 3.5\n[host]\nstorage_read_bw = 7\n")
    cfg = load_config(ini)
    assert cfg.name == "reis-ssd2+custom"
    assert cfg.timing.t_latch_xor == 3.5
    assert cfg.geometry.channels == 16
    assert load_config(None, "reis-ssd1") == preset("reis-ssd1")
    ini.write_text("[timing]\nbogus = 1\n")
    with pytest.raises(ValueError):
        load_config(ini)
