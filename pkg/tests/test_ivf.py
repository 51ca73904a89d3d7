import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reis_sim.ivf import (
    IVFKMeans,
    KmeansParams,
    assign_clusters,
    build_index,
    default_nlist,
    deserialize_index,
    kmeans_train,
    serialize_index,
)


def brute_assign(x, c):
    out = []
    for v in x.astype(np.float64):
        d = [float(((v - ci) ** 2).sum()) for ci in c.astype(np.float64)]
        out.append(min(range(len(d)), key=lambda i: (d[i], i)))
    return np.array(out)


def test_default_nlist():
    assert default_nlist(1) == 1
    assert default_nlist(10_000) == 100
    assert default_nlist(41_500_000) == 6442
    assert default_nlist(2) == 1


def test_square_corners_are_fixed_points():
    pts = np.array([[0, 0], [0, 10], [10, 0], [10, 10]], dtype=np.float32)
    c = kmeans_train(pts, KmeansParams(nlist=4, seed=3))
    assert sorted(map(tuple, c.tolist())) == sorted(map(tuple, pts.tolist()))


def test_single_cluster_is_mean(rng):
    x = rng.standard_normal((50, 8)).astype(np.float32)
    c = kmeans_train(x, KmeansParams(nlist=1))
    np.testing.assert_allclose(c[0], x.astype(np.float64).mean(axis=0), atol=1e-5)


def test_two_blobs_recovered(rng):
    a = rng.standard_normal((100, 4)) + 10
    b = rng.standard_normal((100, 4)) - 10
    c = kmeans_train(np.vstack([a, b]), KmeansParams(nlist=2, seed=1))
    means = [a.mean(axis=0), b.mean(axis=0)]
    for m in means:
        assert min(np.linalg.norm(ci - m) for ci in c) <= 0.5


def test_nlist_larger_than_dataset():
    with pytest.raises(ValueError):
        kmeans_train(np.zeros((3, 2)), KmeansParams(nlist=4))


def test_assign_ties_go_to_lower_id():
    c = np.array([[5, 5], [0, 0], [2, 0]], dtype=np.float32)
    assert assign_clusters(np.array([[1, 0]]), c).tolist() == [1]
    assert assign_clusters(np.array([[5, 5]]), c).tolist() == [0]


def test_assign_matches_exhaustive_argmin(rng):
    x = rng.standard_normal((300, 16)).astype(np.float32)
    c = rng.standard_normal((12, 16)).astype(np.float32)
    np.testing.assert_array_equal(assign_clusters(x, c), brute_assign(x, c))


def test_assign_with_duplicate_centroids_picks_lower(rng):
    c = rng.standard_normal((3, 8)).astype(np.float32)
    c = np.vstack([c, c])
    x = rng.standard_normal((100, 8)).astype(np.float32)
    assert assign_clusters(x, c).max() < 3


def test_build_index_partition():
    x = np.arange(16, dtype=np.float32).reshape(8, 2)
    idx = build_index(x, KmeansParams(nlist=2, seed=0))
    all_members = np.concatenate(idx.cluster_members)
    assert sorted(all_members.tolist()) == list(range(8))
    for m in idx.cluster_members:
        assert m.tolist() == sorted(m.tolist())
    idx.validate(8)


def test_tags_are_cluster_ids_mod_256(rng):
    x = rng.standard_normal((10_000, 8)).astype(np.float32)
    idx = build_index(x, KmeansParams(nlist=256, max_iters=3, seed=2))
    assert idx.tags.tolist() == list(range(256))
    assert idx.tags.dtype == np.uint8


def test_members_follow_assign_clusters(small_data):
    x, _ = small_data
    idx = build_index(x, KmeansParams(nlist=20, seed=4))
    labels = assign_clusters(x, idx.centroids)
    for cid, members in enumerate(idx.cluster_members):
        assert np.all(labels[members] == cid)
    assert all(m.size > 0 for m in idx.cluster_members)


def test_duplicate_points_never_leave_empty_clusters():
    x = np.vstack([np.zeros((20, 4)), np.ones((3, 4))]).astype(np.float32)
    idx = build_index(x, KmeansParams(nlist=5, seed=9))
    assert all(m.size > 0 for m in idx.cluster_members)
    idx.validate()


def test_training_is_deterministic(small_data):
    x, _ = small_data
    p = KmeansParams(nlist=16, seed=77)
    assert serialize_index(build_index(x, p)) == serialize_index(build_index(x, p))


def test_debug_mode_checks_monotone_sse(small_data):
    x, _ = small_data
    kmeans_train(x, KmeansParams(nlist=10, seed=1, debug=True))



@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**64 - 1))
def test_random_index_round_trip(n, nlist, seed):
    nlist = min(nlist, n)
    x = np.random.default_rng(seed % 1000).standard_normal((n, 8)).astype(np.float32)
    idx = build_index(x, KmeansParams(nlist=nlist, seed=seed, max_iters=5))
    blob = serialize_index(idx)
    back = deserialize_index(blob)
    assert back == idx
    assert serialize_index(back) == blob


def test_corrupted_index_rejected(rng):
    idx = build_index(rng.standard_normal((20, 8)), KmeansParams(nlist=3))
    blob = serialize_index(idx)
    assert blob[:4] == b"RIVF"
    with pytest.raises(ValueError):
        deserialize_index(b"XXXX" + blob[4:])
    with pytest.raises(ValueError):
        deserialize_index(blob[:-4])


def test_estimator_interface(small_data):
    x, q = small_data
    est = IVFKMeans(seed=3, max_iters=5).fit(x)
    assert est.index_.nlist == default_nlist(len(x))
    assert est.predict(q).shape == (len(q),)
    np.testing.assert_array_equal(est.predict(x), est.labels_)
    assert est.get_params()["seed"] == 3
