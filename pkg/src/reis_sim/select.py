"""Selection and sorting kernels run by the controller core.

Both kernels order entries by a composite key; callers build keys so that
ties resolve deterministically (distance first, then address).
"""

from __future__ import annotations

import numpy as np

_INSERTION_CUTOFF = 16


def composite_keys(dist, addr, addr_bits: int = 40) -> np.ndarray:
    """Pack ``(dist, addr)`` into int64 keys ordered lexicographically."""
    dist = np.asarray(dist, dtype=np.int64)
    addr = np.asarray(addr, dtype=np.int64)
    if dist.size and (dist.min() < 0 or dist.max() >= 1 << (63 - addr_bits)):
        raise ValueError("distance does not fit the composite key")
    if addr.size and (addr.min() < 0 or addr.max() >= 1 << addr_bits):
        raise ValueError(f"address does not fit in {addr_bits} bits")
    return (dist << addr_bits) | addr


def _median_of_three(a, b, c):
    if a < b:
        return b if b < c else (c if a < c else a)
    return a if a < c else (c if b < c else b)


def quickselect_smallest(keys, m: int) -> np.ndarray:
    """Indices of the ``m`` smallest keys, in no particular order.

    Three-way partitioning around a median-of-three pivot; only the side
    holding the ``m``-th element is recursed into, so the expected work is
    linear. Equal keys at the boundary are taken in index order. ``m`` at or
    above the input size returns every index.
    """
    keys = np.asarray(keys)
    n = keys.shape[0]
    if m >= n:
        return np.arange(n)
    if m <= 0:
        return np.empty(0, dtype=np.int64)
    chosen = []
    cur = np.arange(n)
    need = m
    while True:
        k = keys[cur]
        pivot = _median_of_three(k[0], k[k.size // 2], k[-1])
        lt = k < pivot
        n_lt = int(lt.sum())
        if need <= n_lt:
            cur = cur[lt]
            continue
        eq = k == pivot
        n_eq = int(eq.sum())
        chosen.append(cur[lt])
        if need <= n_lt + n_eq:
            chosen.append(cur[eq][: need - n_lt])
            break
        chosen.append(cur[eq])
        need -= n_lt + n_eq
        cur = cur[k > pivot]
    return np.concatenate(chosen)


def quicksort(keys) -> list[int]:
    """Permutation sorting ``keys`` ascending (ties keep input order).

    Iterative quicksort over ``(key, index)`` pairs, finishing small
    partitions with insertion sort. Keys may be any mutually comparable
    values, e.g. tuples.
    """
    items = [(k, i) for i, k in enumerate(keys)]
    stack = [(0, len(items) - 1)]
    while stack:
        lo, hi = stack.pop()
        while hi - lo >= _INSERTION_CUTOFF:
            mid = (lo + hi) // 2
            pivot = _median_of_three(items[lo], items[mid], items[hi])
            i, j = lo, hi
            while i <= j:
                while items[i] < pivot:
                    i += 1
                while items[j] > pivot:
                    j -= 1
                if i <= j:
                    items[i], items[j] = items[j], items[i]
                    i += 1
                    j -= 1
            # recurse into the smaller half first to bound the stack
            if j - lo < hi - i:
                stack.append((i, hi))
                hi = j
            else:
                stack.append((lo, j))
                lo = i
        for a in range(lo + 1, hi + 1):
            cur = items[a]
            b = a - 1
            while b >= lo and items[b] > cur:
                items[b + 1] = items[b]
                b -= 1
            items[b + 1] = cur
    return [i for _, i in items]
