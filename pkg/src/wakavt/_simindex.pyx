# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loop for max-Dice search over an inverted index.

Same contract as wakavt._simindex_py: queries and posting lists arrive
in CSR form (int32 indices, int64 offsets); one candidate-count scratch
pass per query, touching only poems that share at least one word.
"""

import numpy as np


def max_dice_many(
    const int[:] q_idx,
    const long long[:] q_ptr,
    const int[:] q_sizes,
    const int[:] post_idx,
    const long long[:] post_ptr,
    const int[:] c_sizes,
    const long long[:] exclude,
):
    """For each query i: max over corpus poems j != exclude[i] of
    2*|Q_i & C_j| / (|Q_i| + |C_j|). Zero-overlap poems contribute 0.
    """
    cdef Py_ssize_t n_queries = q_sizes.shape[0]
    cdef Py_ssize_t n_poems = c_sizes.shape[0]
    out = np.zeros(n_queries, dtype=np.float64)
    cdef double[:] out_v = out
    counts_arr = np.zeros(n_poems, dtype=np.intc)
    touched_arr = np.zeros(n_poems, dtype=np.int64)
    cdef int[:] counts = counts_arr
    cdef long long[:] touched = touched_arr
    cdef Py_ssize_t i, t, n_touched
    cdef long long k, p, w, j, skip
    cdef double best, d
    for i in range(n_queries):
        n_touched = 0
        for k in range(q_ptr[i], q_ptr[i + 1]):
            w = q_idx[k]
            for p in range(post_ptr[w], post_ptr[w + 1]):
                j = post_idx[p]
                if counts[j] == 0:
                    touched[n_touched] = j
                    n_touched += 1
                counts[j] += 1
        best = 0.0
        skip = exclude[i]
        for t in range(n_touched):
            j = touched[t]
            if j != skip:
                d = 2.0 * counts[j] / (c_sizes[j] + q_sizes[i])
                if d > best:
                    best = d
            counts[j] = 0
        out_v[i] = best
    return out
