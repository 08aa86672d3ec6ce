# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled per-transition kernels; same API and arithmetic as ``_pykernels``."""
from libc.math cimport sqrt, log, exp
from libc.stdlib cimport malloc, free

SBCGD = 0
BCTD = 1

cdef enum:
    MAXD = 64


cdef inline void _index(const long long[:] dims, int D, int n_sm,
                        long long s, long long a, long long h, long long* idx) nogil:
    cdef int j
    for j in range(n_sm - 1, -1, -1):
        idx[j] = s % dims[j]
        s = s // dims[j]
    for j in range(D - 2, n_sm - 1, -1):
        idx[j] = a % dims[j]
        a = a // dims[j]
    idx[D - 1] = h


cdef inline double _entry(double[:] theta, const long long[:] offsets, int K, int D,
                          long long* idx) nogil:
    cdef int k, d
    cdef double total = 0.0, p
    for k in range(K):
        p = 1.0
        for d in range(D):
            p *= theta[offsets[d] + idx[d] * K + k]
        total += p
    return total


def entry(double[:] theta, const long long[:] offsets, const long long[:] dims, int K,
          int n_sm, long long s, long long a, long long h):
    cdef long long idx[MAXD]
    cdef int D = dims.shape[0]
    _index(dims, D, n_sm, s, a, h, idx)
    return _entry(theta, offsets, K, D, idx)


def action_values(double[:] theta, const long long[:] offsets, const long long[:] dims,
                  int K, int n_sm, long long s, long long h, double[:] out):
    """Fill ``out[a] = Q(s, a, h)`` for every flat action ``a``."""
    cdef long long idx[MAXD]
    cdef int D = dims.shape[0]
    cdef int k, d
    cdef long long a, nA = out.shape[0], rem
    cdef double total, p
    cdef double* base = <double*>malloc(K * sizeof(double))
    _index(dims, D, n_sm, s, 0, h, idx)
    for k in range(K):
        p = theta[offsets[D - 1] + h * K + k]
        for d in range(n_sm):
            p *= theta[offsets[d] + idx[d] * K + k]
        base[k] = p
    for a in range(nA):
        rem = a
        for d in range(D - 2, n_sm - 1, -1):
            idx[d] = rem % dims[d]
            rem = rem // dims[d]
        total = 0.0
        for k in range(K):
            p = base[k]
            for d in range(n_sm, D - 1):
                p *= theta[offsets[d] + idx[d] * K + k]
            total += p
        out[a] = total
    free(base)


def greedy_action(double[:] theta, const long long[:] offsets, const long long[:] dims,
                  int K, int n_sm, long long s, long long h, double[:] work):
    """Lowest-index maximizer of ``Q(s, ., h)``; returns ``(action, value)``."""
    action_values(theta, offsets, dims, K, n_sm, s, h, work)
    cdef long long a, best = 0
    cdef double v = work[0]
    for a in range(1, work.shape[0]):
        if work[a] > v:
            v = work[a]
            best = a
    return best, v


def transition_update(double[:] theta, const long long[:] offsets, const long long[:] dims,
                      int K, int n_sm, long long s, long long a, long long h,
                      long long s2, long long a2, double r, double alpha, int rule,
                      int scaled=0):
    """One cyclic pass of block updates over all modes for a single transition."""
    cdef int D = dims.shape[0]
    cdef long long H = dims[D - 1] - 1
    cdef bint terminal = a2 < 0 or h + 1 >= H
    cdef long long idx[MAXD]
    cdef long long idx2[MAXD]
    cdef int d, j, k
    cdef double boot = 0.0, first, q, q2, n1, n2, step, p1, p2
    cdef long long o1, o2
    cdef double* g1 = <double*>malloc(K * sizeof(double))
    cdef double* g2 = <double*>malloc(K * sizeof(double))
    _index(dims, D, n_sm, s, a, h, idx)
    if not terminal:
        _index(dims, D, n_sm, s2, a2, h + 1, idx2)
        boot = _entry(theta, offsets, K, D, idx2)
    first = r + boot - _entry(theta, offsets, K, D, idx)
    for d in range(D):
        o1 = offsets[d] + idx[d] * K
        q = 0.0
        q2 = 0.0
        n1 = 0.0
        n2 = 0.0
        for k in range(K):
            p1 = 1.0
            for j in range(D):
                if j != d:
                    p1 *= theta[offsets[j] + idx[j] * K + k]
            g1[k] = p1
            n1 += p1 * p1
            q += p1 * theta[o1 + k]
        if rule == 0 and not terminal:
            o2 = offsets[d] + idx2[d] * K
            for k in range(K):
                p2 = 1.0
                for j in range(D):
                    if j != d:
                        p2 *= theta[offsets[j] + idx2[j] * K + k]
                g2[k] = p2
                n2 += p2 * p2
                q2 += p2 * theta[o2 + k]
            step = 2.0 * alpha * (r + q2 - q)
            if scaled:
                step /= 1.0 + n1 + n2
            for k in range(K):
                theta[o1 + k] += step * g1[k]
            for k in range(K):
                theta[o2 + k] -= step * g2[k]
        else:
            step = 2.0 * alpha * (r + boot - q)
            if scaled:
                step /= 1.0 + n1
            for k in range(K):
                theta[o1 + k] += step * g1[k]
    free(g1)
    free(g2)
    return first


def normalize(double[:] theta, const long long[:] offsets, int K, int ndim):
    """Equalize factor norms in place; returns the common norm (0 if a factor is zero)."""
    cdef int d
    cdef long long i
    cdef double nrm, logsum = 0.0, target
    cdef double norms[MAXD]
    for d in range(ndim):
        nrm = 0.0
        for i in range(offsets[d], offsets[d + 1]):
            nrm += theta[i] * theta[i]
        nrm = sqrt(nrm)
        if nrm == 0.0:
            return 0.0
        norms[d] = nrm
        logsum += log(nrm)
    target = exp(logsum / ndim)
    for d in range(ndim):
        nrm = target / norms[d]
        for i in range(offsets[d], offsets[d + 1]):
            theta[i] *= nrm
    return target
