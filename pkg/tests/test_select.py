import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from reis_sim.select import composite_keys, quickselect_smallest, quicksort


def sort_prefix(dist, addr, m):
    order = sorted(range(len(dist)), key=lambda i: (dist[i], addr[i]))
    return sorted((dist[i], addr[i]) for i in order[:m])


def selected(dist, addr, idx):
    return sorted((dist[i], addr[i]) for i in idx)


def test_m_equal_size_is_identity():
    keys = np.array([5, 3, 9, 1])
    assert sorted(quickselect_smallest(keys, 4).tolist()) == [0, 1, 2, 3]
    assert sorted(quickselect_smallest(keys, 10).tolist()) == [0, 1, 2, 3]


def test_m_one_distinct_is_minimum():
    keys = np.array([7, 2, 8, 4, 3])
    assert quickselect_smallest(keys, 1).tolist() == [1]


def test_m_zero_is_empty():
    assert quickselect_smallest(np.arange(5), 0).size == 0


def test_random_10k_matches_sort_prefix(rng):
    dist = rng.integers(0, 1025, 10_000)
    addr = rng.permutation(10_000)
    idx = quickselect_smallest(composite_keys(dist, addr), 100)
    assert idx.size == 100
    assert selected(dist, addr, idx) == sort_prefix(dist, addr, 100)


@given(st.lists(st.tuples(st.integers(0, 20), st.integers(0, 2**40 - 1)), min_size=1, max_size=300), st.data())
def test_quickselect_with_duplicates(pairs, data):
    dist = [p[0] for p in pairs]
    addr = [p[1] for p in pairs]
    m = data.draw(st.integers(1, len(pairs)))
    idx = quickselect_smallest(composite_keys(dist, addr), m)
    assert len(set(idx.tolist())) == m
    assert selected(dist, addr, idx) == sort_prefix(dist, addr, m)


def test_composite_key_orders_lexicographically():
    keys = composite_keys([1, 1, 0], [5, 2, 2**40 - 1])
    assert np.argsort(keys).tolist() == [2, 1, 0]


def test_composite_key_range_checks():
    with pytest.raises(ValueError):
        composite_keys([1], [2**40])
    with pytest.raises(ValueError):
        composite_keys([-1], [0])


@given(st.lists(st.tuples(st.integers(0, 50), st.integers(0, 1000)), max_size=400))
def test_quicksort_matches_sorted(keys):
    perm = quicksort(keys)
    assert sorted(perm) == list(range(len(keys)))
    assert [keys[i] for i in perm] == sorted(keys)


def test_quicksort_is_stable_for_equal_keys():
    keys = [3, 1, 3, 1, 3] * 10
    perm = quicksort(keys)
    ones = [i for i in perm if keys[i] == 1]
    assert ones == sorted(ones)


def test_quicksort_large_adversarial_inputs():
    for keys in (list(range(10_000)), list(range(10_000, 0, -1)), [7] * 10_000):
        perm = quicksort(keys)
        assert [keys[i] for i in perm] == sorted(keys)
