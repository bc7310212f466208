# distutils: language = c++
# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Fused linear scan + top-k selection.

One pass over the corpus.  Small k keeps a bounded min-heap (O(n d + n log k),
no score buffer); when k is a large fraction of n the scores are buffered and
cut at the k-th value by a vectorised partition instead.  Each entry is
packed into a single uint64 whose integer order is (score descending, id
ascending), so the heap compares plain integers and the output matches the
tie-break of the numpy fallback.  The heap root is the worst kept entry.
"""

import numpy as np
cimport numpy as cnp
from libc.stdint cimport uint8_t, int32_t, uint32_t, uint64_t, int64_t
from libc.math cimport INFINITY, log, log2
from libc.string cimport memcpy
from libcpp.algorithm cimport sort

cnp.import_array()


cdef inline uint64_t _key(float s, int64_t i) noexcept nogil:
    # order-preserving map of (score desc, id asc) onto one unsigned integer
    cdef uint32_t bits
    s = s + 0.0  # folds -0.0 into +0.0 so both compare equal, as in numpy
    memcpy(&bits, &s, 4)
    # negative: flip all bits; non-negative: set the sign bit (branch-free)
    bits = bits ^ (<uint32_t>(-<int32_t>(bits >> 31)) | 0x80000000u)
    return (<uint64_t>bits << 32) | <uint64_t>(0xFFFFFFFFu - <uint32_t>i)


cdef inline float _score(uint64_t key) noexcept nogil:
    cdef uint32_t bits = <uint32_t>(key >> 32)
    cdef float s
    if bits & 0x80000000u:
        bits = bits & 0x7FFFFFFFu
    else:
        bits = ~bits
    memcpy(&s, &bits, 4)
    return s


cdef inline void _sift_down(uint64_t* h, Py_ssize_t size, Py_ssize_t pos) noexcept nogil:
    # min-heap on keys: the root is the worst kept entry
    cdef Py_ssize_t child
    cdef uint64_t x = h[pos]
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        if child + 1 < size and h[child + 1] < h[child]:
            child += 1
        if h[child] >= x:
            break
        h[pos] = h[child]
        pos = child
    h[pos] = x


cdef inline void _sift_up(uint64_t* h, Py_ssize_t pos) noexcept nogil:
    cdef Py_ssize_t parent
    cdef uint64_t x = h[pos]
    while pos > 0:
        parent = (pos - 1) // 2
        if h[parent] <= x:
            break
        h[pos] = h[parent]
        pos = parent
    h[pos] = x


cdef inline float _offer(uint64_t* h, Py_ssize_t* size, Py_ssize_t k, float s, int64_t i) noexcept nogil:
    """Push (s, i) if it beats the root; returns the new root score (the admission floor)."""
    cdef uint64_t x = _key(s, i)
    if size[0] < k:
        h[size[0]] = x
        _sift_up(h, size[0])
        size[0] += 1
        if size[0] < k:
            return -INFINITY
    elif x > h[0]:
        h[0] = x
        _sift_down(h, k, 0)
    return _score(h[0])


cdef inline void _heapsort(uint64_t* h, Py_ssize_t size) noexcept nogil:
    # repeatedly move the worst entry to the back: leaves h[0] the best
    cdef Py_ssize_t end
    cdef uint64_t x
    for end in range(size - 1, 0, -1):
        x = h[0]
        h[0] = h[end]
        h[end] = x
        _sift_down(h, end, 0)


cdef inline float _dot(const float* a, const float* b, Py_ssize_t d) noexcept nogil:
    # eight independent accumulators in a fixed order: breaks the add latency
    # chain while keeping results reproducible
    cdef float acc[8]
    cdef Py_ssize_t j = 0, r
    for r in range(8):
        acc[r] = 0
    while j + 8 <= d:
        for r in range(8):
            acc[r] += a[j + r] * b[j + r]
        j += 8
    while j < d:
        acc[0] += a[j] * b[j]
        j += 1
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))


cdef inline float _dot_codes(const uint8_t* c, const float* w, Py_ssize_t d) noexcept nogil:
    cdef float acc[8]
    cdef Py_ssize_t j = 0, r
    for r in range(8):
        acc[r] = 0
    while j + 8 <= d:
        for r in range(8):
            acc[r] += c[j + r] * w[j + r]
        j += 8
    while j < d:
        acc[0] += c[j] * w[j]
        j += 1
    return ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))


cdef _drain(uint64_t[::1] h, Py_ssize_t size):
    cdef Py_ssize_t j
    cdef int64_t[::1] ids = np.empty(size, dtype=np.int64)
    cdef float[::1] vals = np.empty(size, dtype=np.float32)
    with nogil:
        _heapsort(&h[0], size)
        for j in range(size):
            ids[j] = <int64_t>(0xFFFFFFFFu - <uint32_t>(h[j] & 0xFFFFFFFFu))
            vals[j] = _score(h[j])
    return np.asarray(ids), np.asarray(vals)


cdef _finish(const float[::1] s, Py_ssize_t k):
    # buffered path: a vectorised partition finds the k-th score, then only
    # entries at or above it are packed and sorted (ties resolved by id)
    cdef Py_ssize_t n = s.shape[0], i, m = 0
    cdef float kth = -INFINITY
    if k < n:
        kth = np.partition(np.asarray(s), n - k)[n - k]
    cdef uint64_t[::1] buf = np.empty(n, dtype=np.uint64)
    cdef uint64_t* b = &buf[0]
    cdef int64_t[::1] ids = np.empty(k, dtype=np.int64)
    cdef float[::1] vals = np.empty(k, dtype=np.float32)
    with nogil:
        for i in range(n):
            if s[i] >= kth:
                b[m] = ~_key(s[i], i)
                m += 1
        sort(b, b + m)
        for i in range(k):
            ids[i] = <int64_t>(0xFFFFFFFFu - <uint32_t>(~b[i] & 0xFFFFFFFFu))
            vals[i] = _score(~b[i])
    return np.asarray(ids), np.asarray(vals)


def _check(Py_ssize_t k, Py_ssize_t n):
    if k < 1 or k > n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if n > 0xFFFFFFFF:
        raise ValueError("corpus too large for 32-bit ids")


# The heap admits about k * (1 + ln(n / k)) entries on random order, each
# costing log2(k) sifts.  Past this share of n it loses to buffering.
HEAP_BUDGET = 0.5


cdef inline bint _use_heap(Py_ssize_t k, Py_ssize_t n, double budget) noexcept nogil:
    return k * (1.0 + log(<double>n / k)) * log2(k + 1.0) < budget * n


def topk_select(scores, Py_ssize_t k, double budget=HEAP_BUDGET):
    cdef const float[::1] s = np.ascontiguousarray(scores, dtype=np.float32)
    cdef Py_ssize_t n = s.shape[0], i, size = 0
    _check(k, n)
    if not _use_heap(k, n, budget):
        return _finish(s, k)
    cdef uint64_t[::1] h = np.empty(k, dtype=np.uint64)
    cdef float floor = -INFINITY
    with nogil:
        for i in range(n):
            if s[i] >= floor:
                floor = _offer(&h[0], &size, k, s[i], i)
    return _drain(h, size)


def topk_dense(vectors, query, Py_ssize_t k, double budget=HEAP_BUDGET):
    cdef const float[:, ::1] v = np.ascontiguousarray(vectors, dtype=np.float32)
    cdef const float[::1] q = np.ascontiguousarray(query, dtype=np.float32)
    cdef Py_ssize_t n = v.shape[0], d = v.shape[1], i, size = 0
    _check(k, n)
    if q.shape[0] != d:
        raise ValueError(f"query width {q.shape[0]} != corpus width {d}")
    cdef uint64_t[::1] h
    cdef float[::1] buf
    cdef float x, floor = -INFINITY
    if not _use_heap(k, n, budget):
        buf = np.empty(n, dtype=np.float32)
        with nogil:
            for i in range(n):
                buf[i] = _dot(&v[i, 0], &q[0], d)
        return _finish(buf, k)
    h = np.empty(k, dtype=np.uint64)
    with nogil:
        for i in range(n):
            x = _dot(&v[i, 0], &q[0], d)
            if x >= floor:
                floor = _offer(&h[0], &size, k, x, i)
    return _drain(h, size)


def topk_codes(codes, scale, offset, query, Py_ssize_t k, double budget=HEAP_BUDGET):
    cdef const uint8_t[:, ::1] c = np.ascontiguousarray(codes, dtype=np.uint8)
    qa = np.ascontiguousarray(query, dtype=np.float32)
    cdef Py_ssize_t n = c.shape[0], d = c.shape[1], i, size = 0
    _check(k, n)
    if qa.shape[0] != d:
        raise ValueError(f"query width {qa.shape[0]} != corpus width {d}")
    cdef const float[::1] w = np.ascontiguousarray(qa * np.asarray(scale, dtype=np.float32), dtype=np.float32)
    cdef float bias = np.float32(np.dot(qa.astype(np.float64), np.asarray(offset, dtype=np.float64)))
    cdef uint64_t[::1] h
    cdef float[::1] buf
    cdef float x, floor = -INFINITY
    if not _use_heap(k, n, budget):
        buf = np.empty(n, dtype=np.float32)
        with nogil:
            for i in range(n):
                buf[i] = _dot_codes(&c[i, 0], &w[0], d) + bias
        return _finish(buf, k)
    h = np.empty(k, dtype=np.uint64)
    with nogil:
        for i in range(n):
            x = _dot_codes(&c[i, 0], &w[0], d) + bias
            if x >= floor:
                floor = _offer(&h[0], &size, k, x, i)
    return _drain(h, size)
