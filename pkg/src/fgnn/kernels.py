"""Segment and scatter kernels for ragged graph batches.

Edges (or nodes) are stored sorted by their owning segment so each segment is
a contiguous run described by a CSR-style ``offsets`` array of length
``n_segments + 1``.  Every segment must be non-empty: the callers guarantee
this (self-loops for attention neighbourhoods, at least one eligible node per
graph for readout).

Two implementations exist for each kernel: a pure-numpy one built on
``ufunc.reduceat`` and a numba ``@njit`` one.  The numba path is used when
numba imports cleanly and the ``FGNN_DISABLE_NUMBA`` environment variable is
not set; ``BACKEND`` records which path won.  ``benchmarks/bench_kernels.py``
times the two against each other.
"""

from __future__ import annotations

import os

import numpy as np


def _env_disabled() -> bool:
    return os.environ.get("FGNN_DISABLE_NUMBA", "").strip().lower() in (
        "1", "true", "yes", "on",
    )


try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAS_NUMBA = False

USE_NUMBA = HAS_NUMBA and not _env_disabled()


# ---------------------------------------------------------------------------
# pure-numpy implementations
# ---------------------------------------------------------------------------

def _repeat_per_segment(values: np.ndarray, offsets: np.ndarray) -> np.ndarray:
    return np.repeat(values, np.diff(offsets), axis=0)


def _segment_softmax_np(scores, offsets):
    starts = offsets[:-1]
    seg_max = np.maximum.reduceat(scores, starts)
    shifted = scores - _repeat_per_segment(seg_max, offsets)
    e = np.exp(shifted)
    seg_sum = np.add.reduceat(e, starts)
    return e / _repeat_per_segment(seg_sum, offsets)


def _masked_segment_softmax_np(scores, offsets, mask):
    starts = offsets[:-1]
    masked = np.where(mask, scores, -np.inf)
    seg_max = np.maximum.reduceat(masked, starts)
    shifted = masked - _repeat_per_segment(seg_max, offsets)
    e = np.exp(shifted)  # exact 0.0 where ineligible
    seg_sum = np.add.reduceat(e, starts)
    return e / _repeat_per_segment(seg_sum, offsets)


def _segment_softmax_grad_np(alpha, grad, offsets):
    starts = offsets[:-1]
    seg_dot = np.add.reduceat(alpha * grad, starts)
    return alpha * (grad - _repeat_per_segment(seg_dot, offsets))


def _segment_weighted_sum_np(weights, rows, offsets):
    return np.add.reduceat(weights[:, None] * rows, offsets[:-1], axis=0)


def _segment_weighted_sum_grad_np(weights, rows, grad_seg, offsets):
    g = _repeat_per_segment(grad_seg, offsets)
    grad_weights = np.einsum("ed,ed->e", rows, g)
    grad_rows = weights[:, None] * g
    return grad_weights, grad_rows


def _scatter_add_rows_np(out, idx, rows):
    np.add.at(out, idx, rows)


def _scatter_add_1d_np(out, idx, values):
    np.add.at(out, idx, values)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAS_NUMBA:

    @njit(cache=True)
    def _segment_softmax_nb(scores, offsets):
        out = np.empty_like(scores)
        for s in range(offsets.size - 1):
            lo, hi = offsets[s], offsets[s + 1]
            m = scores[lo]
            for e in range(lo + 1, hi):
                if scores[e] > m:
                    m = scores[e]
            total = 0.0
            for e in range(lo, hi):
                v = np.exp(scores[e] - m)
                out[e] = v
                total += v
            for e in range(lo, hi):
                out[e] /= total
        return out

    @njit(cache=True)
    def _masked_segment_softmax_nb(scores, offsets, mask):
        out = np.zeros_like(scores)
        for s in range(offsets.size - 1):
            lo, hi = offsets[s], offsets[s + 1]
            m = -np.inf
            for e in range(lo, hi):
                if mask[e] and scores[e] > m:
                    m = scores[e]
            total = 0.0
            for e in range(lo, hi):
                if mask[e]:
                    v = np.exp(scores[e] - m)
                    out[e] = v
                    total += v
            for e in range(lo, hi):
                if mask[e]:
                    out[e] /= total
        return out

    @njit(cache=True)
    def _segment_softmax_grad_nb(alpha, grad, offsets):
        out = np.empty_like(alpha)
        for s in range(offsets.size - 1):
            lo, hi = offsets[s], offsets[s + 1]
            dot = 0.0
            for e in range(lo, hi):
                dot += alpha[e] * grad[e]
            for e in range(lo, hi):
                out[e] = alpha[e] * (grad[e] - dot)
        return out

    @njit(cache=True)
    def _segment_weighted_sum_nb(weights, rows, offsets):
        n_seg = offsets.size - 1
        d = rows.shape[1]
        out = np.zeros((n_seg, d))
        for s in range(n_seg):
            for e in range(offsets[s], offsets[s + 1]):
                w = weights[e]
                for c in range(d):
                    out[s, c] += w * rows[e, c]
        return out

    @njit(cache=True)
    def _segment_weighted_sum_grad_nb(weights, rows, grad_seg, offsets):
        n_edges, d = rows.shape
        grad_weights = np.empty(n_edges)
        grad_rows = np.empty((n_edges, d))
        for s in range(offsets.size - 1):
            for e in range(offsets[s], offsets[s + 1]):
                dot = 0.0
                for c in range(d):
                    grad_rows[e, c] = weights[e] * grad_seg[s, c]
                    dot += rows[e, c] * grad_seg[s, c]
                grad_weights[e] = dot
        return grad_weights, grad_rows

    @njit(cache=True)
    def _scatter_add_rows_nb(out, idx, rows):
        for e in range(idx.size):
            for c in range(rows.shape[1]):
                out[idx[e], c] += rows[e, c]

    @njit(cache=True)
    def _scatter_add_1d_nb(out, idx, values):
        for e in range(idx.size):
            out[idx[e]] += values[e]


if USE_NUMBA:
    BACKEND = "numba"
    segment_softmax = _segment_softmax_nb
    masked_segment_softmax = _masked_segment_softmax_nb
    segment_softmax_grad = _segment_softmax_grad_nb
    segment_weighted_sum = _segment_weighted_sum_nb
    segment_weighted_sum_grad = _segment_weighted_sum_grad_nb
    scatter_add_rows = _scatter_add_rows_nb
    scatter_add_1d = _scatter_add_1d_nb
else:
    BACKEND = "numpy"
    segment_softmax = _segment_softmax_np
    masked_segment_softmax = _masked_segment_softmax_np
    segment_softmax_grad = _segment_softmax_grad_np
    segment_weighted_sum = _segment_weighted_sum_np
    segment_weighted_sum_grad = _segment_weighted_sum_grad_np
    scatter_add_rows = _scatter_add_rows_np
    scatter_add_1d = _scatter_add_1d_np
