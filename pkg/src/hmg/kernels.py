"""Fused single-threaded kernels for the per-edge hot path.

All loops run over destination segments in ascending order, so every
aggregation has a fixed, reproducible accumulation order.  numpy's fancy
indexing would materialize (edges, dim) temporaries that dominate runtime;
these kernels stream rows instead.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def segment_softmax_fwd(logits, indptr, out):
    for i in range(indptr.shape[0] - 1):
        lo, hi = indptr[i], indptr[i + 1]
        if lo == hi:
            continue
        m = logits[lo]
        for e in range(lo + 1, hi):
            if logits[e] > m:
                m = logits[e]
        total = 0.0
        for e in range(lo, hi):
            v = np.exp(logits[e] - m)
            out[e] = v
            total += v
        for e in range(lo, hi):
            out[e] /= total


@numba.njit(cache=True)
def segment_softmax_bwd(alpha, g, indptr, gx):
    for i in range(indptr.shape[0] - 1):
        lo, hi = indptr[i], indptr[i + 1]
        inner = 0.0
        for e in range(lo, hi):
            inner += alpha[e] * g[e]
        for e in range(lo, hi):
            gx[e] = alpha[e] * (g[e] - inner)


@numba.njit(cache=True)
def edge_weighted_sum_fwd(w, src, indptr, values, out):
    d = values.shape[1]
    for i in range(indptr.shape[0] - 1):
        for e in range(indptr[i], indptr[i + 1]):
            we = w[e]
            s = src[e]
            for k in range(d):
                out[i, k] += we * values[s, k]


@numba.njit(cache=True)
def edge_weighted_sum_bwd_values(w, src, indptr, g, gvalues):
    d = g.shape[1]
    for i in range(indptr.shape[0] - 1):
        for e in range(indptr[i], indptr[i + 1]):
            we = w[e]
            s = src[e]
            for k in range(d):
                gvalues[s, k] += we * g[i, k]


@numba.njit(cache=True)
def edge_dot(values, g, src, indptr, out):
    d = values.shape[1]
    for i in range(indptr.shape[0] - 1):
        for e in range(indptr[i], indptr[i + 1]):
            s = src[e]
            acc = 0.0
            for k in range(d):
                acc += values[s, k] * g[i, k]
            out[e] = acc
