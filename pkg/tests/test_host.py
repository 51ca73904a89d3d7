import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reis_sim.engine import SearchParams, search_batch
from reis_sim.host import (
    BREAKDOWN_ROWS,
    GroundTruth,
    HostCostModel,
    PipelineConstants,
    end_to_end_breakdown,
    exact_ground_truth,
    host_search,
    mean_recall,
    recall_at_k,
)


def naive_top_k(queries, vectors, k):
    out = []
    for q in queries.astype(np.float64):
        scored = []
        for i, v in enumerate(vectors.astype(np.float64)):
            s = 0.0
            for a, b in zip(q, v):
                s += (a - b) * (a - b)
            scored.append((s, i))
        scored.sort()
        out.append([i for _, i in scored[:k]])
    return np.array(out)


def test_ground_truth_matches_naive_loop():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1000, 8)).astype(np.float32)
    x[500:520] = x[0]  # exact ties resolved by index
    q = np.vstack([x[0], rng.standard_normal((5, 8)).astype(np.float32)])
    got = exact_ground_truth(q, x, 25).indices
    np.testing.assert_array_equal(got, naive_top_k(q, x, 25))
    assert got[0][:21].tolist() == [0] + list(range(500, 520))


def test_ground_truth_1k_by_1k():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1000, 16)).astype(np.float32)
    q = rng.standard_normal((1000, 16)).astype(np.float32)
    got = exact_ground_truth(q, x, 10).indices
    diff = q[:, None, :].astype(np.float64) - x[None, :, :].astype(np.float64)
    d = np.einsum("qnd,qnd->qn", diff, diff)
    idx = np.broadcast_to(np.arange(1000), d.shape)
    oracle = np.lexsort((idx, d), axis=1)[:, :10]
    np.testing.assert_array_equal(got, oracle)
    np.testing.assert_array_equal(got[:20], naive_top_k(q[:20], x, 10))


def test_ground_truth_self_and_full_k(small_data):
    x, _ = small_data
    gt = exact_ground_truth(x[:10], x, 5)
    assert gt.indices[:, 0].tolist() == list(range(10))
    full = exact_ground_truth(x[:2, :], x[:50], 50)
    assert sorted(full[0].tolist()) == list(range(50))


def test_ground_truth_dim_mismatch():
    with pytest.raises(ValueError):
        exact_ground_truth(np.zeros((1, 3)), np.zeros((4, 4)), 1)


def test_ground_truth_file_round_trip(tmp_path):
    gt = GroundTruth(np.arange(30).reshape(3, 10))
    raw = gt.to_bytes()
    assert raw[:4] == b"RGTK" and len(raw) == 12 + 4 * 30
    path = gt.save(tmp_path / "gt.bin")
    back = GroundTruth.load(path)
    np.testing.assert_array_equal(back.indices, gt.indices)
    assert back.k == 10 and len(back) == 3
    with pytest.raises(ValueError):
        GroundTruth.from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        GroundTruth.from_bytes(raw[:-4])


def test_recall_examples():
    assert recall_at_k([1, 2, 3], [3, 2, 1], 3) == 1.0
    assert recall_at_k([1, 2, 3], [4, 5, 6], 3) == 0.0
    assert recall_at_k(list(range(10)), list(range(5, 15)), 10) == 0.5
    assert mean_recall([], [], 10) == 0.0
    with pytest.raises(ValueError):
        recall_at_k([1], [1], 0)


@given(st.lists(st.integers(0, 50), min_size=10, max_size=10, unique=True),
       st.lists(st.integers(0, 50), min_size=10, max_size=10, unique=True), st.randoms())
def test_recall_permutation_symmetric(result, truth, rnd):
    shuffled = list(result)
    rnd.shuffle(shuffled)
    r = recall_at_k(result, truth, 10)
    assert 0.0 <= r <= 1.0
    assert recall_at_k(shuffled, truth, 10) == r


def test_host_equals_engine_flat(small_data, small_flat):
    _, queries = small_data
    host = host_search(queries, small_flat, k=10)
    eng = search_batch(queries, small_flat, SearchParams(k=10))
    assert host.indices == [r.indices for r in eng]


def test_host_equals_engine_ivf(small_data, small_ivf):
    _, queries = small_data
    for nprobe in (1, 5):
        host = host_search(queries, small_ivf, k=10, nprobe=nprobe)
        eng = search_batch(queries, small_ivf, SearchParams(k=10, nprobe=nprobe))
        assert host.indices == [r.indices for r in eng]


def test_host_ivf_needs_ivf(small_data, small_flat):
    with pytest.raises(ValueError):
        host_search(small_data[1], small_flat, mode="ivf")


def test_load_time_14gb():
    assert HostCostModel().load_time_s(14e9) == pytest.approx(2.0588, abs=1e-4)
    assert round(HostCostModel().load_time_s(14e9), 2) == 2.06


def test_host_latency_structure(small_data, small_flat):
    _, queries = small_data
    cost = HostCostModel(hamming_vectors_per_us=10.0, int8_macs_per_us=1000.0)
    res = host_search(queries[:3], small_flat, cost=cost)
    load = small_flat.footprint_bytes() / 6.8e9
    scan = (small_flat.n_vectors / 10.0 + 100 * small_flat.dim / 1000.0) * 1e-6
    assert res.load_s == pytest.approx(load)
    assert res.latency_s == pytest.approx([load + scan] * 3)
    lazy = HostCostModel(hamming_vectors_per_us=10.0, int8_macs_per_us=1000.0, load_per_query=False)
    amortized = host_search(queries[:3], small_flat, cost=lazy)
    assert sum(amortized.latency_s) == pytest.approx(load + 3 * scan)


def test_empty_batch(small_flat):
    res = host_search(np.empty((0, small_flat.dim), np.float32), small_flat)
    assert res.indices == [] and res.scan_s == [] and res.mean_latency_s == 0.0


def test_cost_model_validation_and_calibration():
    with pytest.raises(ValueError):
        HostCostModel(storage_read_bw=0)
    c = HostCostModel.calibrate(dim=256, n=5000, repeats=1)
    assert c.hamming_vectors_per_us > 0 and c.fp32_vectors_per_us > 0 and c.int8_macs_per_us > 0
    assert c.storage_read_bw == 6.8


def test_breakdown_rows_and_reis_shape():
    c = PipelineConstants()
    rows, total = end_to_end_breakdown(c, retrieval_s=0.0002 * 18.97)
    assert [r[0] for r in rows] == list(BREAKDOWN_ROWS)
    assert total == pytest.approx(18.97, rel=1e-3)
    pct = {label: p for label, _, p in rows}
    assert pct["Generation"] == pytest.approx(92.0, abs=0.05)
    assert pct["Embedding Model Loading"] == pytest.approx(3.26, abs=0.01)
    assert pct["Generation Model Loading"] == pytest.approx(4.16, abs=0.01)
    assert pct["Dataset Loading"] == 0.0


def test_breakdown_zero_retrieval_sums_to_100():
    rows, total = end_to_end_breakdown(PipelineConstants(), 0.0)
    assert sum(p for _, _, p in rows) == pytest.approx(100.0)
    assert rows[3][1] == 0.0
    with pytest.raises(ValueError):
        end_to_end_breakdown(PipelineConstants(), -1.0)


def test_speedup_when_loading_dominates(small_data, small_flat):
    _, queries = small_data
    res = host_search(queries[:3], small_flat)
    eng = search_batch(queries[:3], small_flat)
    for h, e in zip(res.latency_s, eng):
        if res.load_s > e.metrics["latency_us"] * 1e-6:
            assert h > e.metrics["latency_us"] * 1e-6
