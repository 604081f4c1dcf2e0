# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: bounded-heap top-k selection, the masked MSE pass, and
the fused AdamW update.

Each function mirrors its counterpart in ``polyrec._pykernels``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


cdef inline bint _after(double sa, cnp.int64_t ra, double sb, cnp.int64_t rb) noexcept nogil:
    # does entry a rank after entry b? (lower similarity, or tie with larger key)
    return sa < sb or (sa == sb and ra > rb)


cdef void _sift_down(cnp.int64_t* heap, Py_ssize_t size, Py_ssize_t pos,
                     const double* sims, const cnp.int64_t* key) noexcept nogil:
    # min-heap on rank order: the root is the worst kept entry
    cdef Py_ssize_t child, right
    cdef cnp.int64_t item = heap[pos]
    while True:
        child = 2 * pos + 1
        if child >= size:
            break
        right = child + 1
        if right < size and _after(sims[heap[right]], key[heap[right]],
                                   sims[heap[child]], key[heap[child]]):
            child = right
        if _after(sims[heap[child]], key[heap[child]], sims[item], key[item]):
            heap[pos] = heap[child]
            pos = child
        else:
            break
    heap[pos] = item


cdef void _sift_up(cnp.int64_t* heap, Py_ssize_t pos,
                   const double* sims, const cnp.int64_t* key) noexcept nogil:
    cdef Py_ssize_t parent
    cdef cnp.int64_t item = heap[pos]
    while pos > 0:
        parent = (pos - 1) >> 1
        if _after(sims[item], key[item], sims[heap[parent]], key[heap[parent]]):
            heap[pos] = heap[parent]
            pos = parent
        else:
            break
    heap[pos] = item


def topk_select(const double[::1] sims, const cnp.int64_t[::1] key,
                Py_ssize_t k, Py_ssize_t exclude=-1):
    """Indices of the k best entries by (similarity desc, key asc)."""
    cdef Py_ssize_t n = sims.shape[0]
    if key.shape[0] != n:
        raise ValueError("sims and key lengths differ")
    if k < 1:
        raise ValueError("k must be >= 1")
    cdef Py_ssize_t cap = k if k < n else n
    out = np.empty(cap, dtype=np.int64)
    cdef cnp.int64_t[::1] heap = out
    cdef Py_ssize_t size = 0, i, last
    cdef const double* s = &sims[0] if n > 0 else NULL
    cdef const cnp.int64_t* kk = &key[0] if n > 0 else NULL
    cdef cnp.int64_t* h = &heap[0] if cap > 0 else NULL
    cdef cnp.int64_t top

    with nogil:
        for i in range(n):
            if i == exclude:
                continue
            if size < cap:
                h[size] = i
                _sift_up(h, size, s, kk)
                size += 1
            elif _after(s[h[0]], kk[h[0]], s[i], kk[i]):
                h[0] = i
                _sift_down(h, size, 0, s, kk)
        # heapsort: repeatedly move the worst entry to the tail
        last = size
        while last > 1:
            last -= 1
            top = h[0]
            h[0] = h[last]
            _sift_down(h, last, 0, s, kk)
            h[last] = top
    return out[:size]


def masked_mse_grad(const double[:, ::1] preds, const double[:, ::1] labels,
                    const cnp.uint8_t[:, ::1] mask):
    """Masked mean squared error and its gradient w.r.t. ``preds``."""
    cdef Py_ssize_t b = preds.shape[0], t = preds.shape[1], i, j
    if labels.shape[0] != b or labels.shape[1] != t or mask.shape[0] != b or mask.shape[1] != t:
        raise ValueError("preds, labels and mask must share a shape")
    grad = np.zeros((b, t), dtype=np.float64)
    cdef double[:, ::1] g = grad
    cdef double total = 0.0, d, scale
    cdef Py_ssize_t count = 0
    with nogil:
        for i in range(b):
            for j in range(t):
                if mask[i, j]:
                    d = preds[i, j] - labels[i, j]
                    total += d * d
                    g[i, j] = d
                    count += 1
        if count > 0:
            scale = 2.0 / count
            for i in range(b):
                for j in range(t):
                    g[i, j] *= scale
    if count == 0:
        raise ValueError("batch has no present labels")
    return total / count, grad


def adamw_update(double[::1] p, const double[::1] g, double[::1] m, double[::1] v,
                 double lr, double beta1, double beta2, double eps, double weight_decay,
                 double c1, double c2):
    """One fused AdamW update over flat contiguous buffers, in place.

    ``c1``/``c2`` are the bias-correction denominators ``1 - beta**t``.
    """
    cdef Py_ssize_t n = p.shape[0], i
    if g.shape[0] != n or m.shape[0] != n or v.shape[0] != n:
        raise ValueError("adamw buffers differ in length")
    cdef double a1 = 1.0 - beta1, a2 = 1.0 - beta2
    cdef double inv_c1 = 1.0 / c1, inv_sqrt_c2 = 1.0 / sqrt(c2)
    cdef double gi, mi, vi
    cdef double* pp = &p[0] if n > 0 else NULL
    cdef const double* gp = &g[0] if n > 0 else NULL
    cdef double* mp = &m[0] if n > 0 else NULL
    cdef double* vp = &v[0] if n > 0 else NULL
    with nogil:
        for i in range(n):
            gi = gp[i]
            mi = mp[i] * beta1 + a1 * gi
            vi = vp[i] * beta2 + a2 * (gi * gi)
            mp[i] = mi
            vp[i] = vi
            pp[i] = pp[i] - lr * ((mi * inv_c1) / (sqrt(vi) * inv_sqrt_c2 + eps) + weight_decay * pp[i])
