# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled gradient-descent kernels (see ``_pykernels`` for the NumPy twin).

Ensemble members are independent, so the outer loop over members runs in an
OpenMP ``prange``; each member's arithmetic is sequential and therefore
bit-identical for any thread count.
"""
import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange
from libc.math cimport exp, log1p, fabs, sqrt
from libc.stdlib cimport malloc, free
from libc.string cimport memset
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef inline double _expit(double u) noexcept nogil:
    cdef double e
    if u >= 0:
        return 1.0 / (1.0 + exp(-u))
    e = exp(u)
    return e / (1.0 + e)


cdef inline double _softplus(double u) noexcept nogil:
    return (u if u > 0 else 0.0) + log1p(exp(-fabs(u)))


cdef void _glm_one(double* th, const double* X, const double* cnt, const double* S,
                   const int* act, int n_act, int d, double lam, bint logistic,
                   int iters, double step, double* loss_out, double* grad) noexcept nogil:
    cdef int it, a, k, i
    cdef double u, mu, coef, loss
    cdef const double* x
    for it in range(iters + 1):
        if it == iters and loss_out == NULL:
            break
        loss = 0.0
        for i in range(d):
            grad[i] = lam * th[i]
            loss += th[i] * th[i]
        loss *= 0.5 * lam
        for a in range(n_act):
            k = act[a]
            x = X + k * d
            u = 0.0
            for i in range(d):
                u += x[i] * th[i]
            if logistic:
                mu = _expit(u)
                if loss_out != NULL:
                    loss -= S[k] * u - cnt[k] * _softplus(u)
            else:
                mu = u
                if loss_out != NULL:
                    loss -= S[k] * u - cnt[k] * 0.5 * u * u
            coef = cnt[k] * mu - S[k]
            for i in range(d):
                grad[i] += coef * x[i]
        if loss_out != NULL:
            loss_out[it] = loss
        if it == iters:
            break
        for i in range(d):
            th[i] -= step * grad[i]


def glm_gd(double[:, ::1] theta, const double[:, ::1] X, const double[::1] counts,
           const double[:, ::1] sums, double lam, bint logistic, int iters, double step,
           double[:, ::1] losses=None, int n_threads=1):
    cdef int m = theta.shape[0], d = theta.shape[1], K = X.shape[0]
    cdef int j, k, n_act = 0
    cdef bint record = losses is not None
    cdef int[::1] act = np.empty(K, dtype=np.intc)
    cdef double* grad
    for k in range(K):
        if counts[k] != 0:
            act[n_act] = k
            n_act += 1
        else:
            for j in range(m):
                if sums[j, k] != 0:
                    act[n_act] = k
                    n_act += 1
                    break
    if m == 0 or n_threads <= 1 or m == 1:
        grad = <double*> malloc(d * sizeof(double))
        try:
            for j in range(m):
                _glm_one(&theta[j, 0], &X[0, 0], &counts[0], &sums[j, 0], &act[0], n_act, d,
                         lam, logistic, iters, step, &losses[j, 0] if record else NULL, grad)
        finally:
            free(grad)
        return
    for j in prange(m, nogil=True, num_threads=n_threads, schedule="static"):
        grad = <double*> malloc(d * sizeof(double))
        _glm_one(&theta[j, 0], &X[0, 0], &counts[0], &sums[j, 0], &act[0], n_act, d,
                 lam, logistic, iters, step, &losses[j, 0] if record else NULL, grad)
        free(grad)


cdef inline void _gemm(char ta, char tb, int M, int Nc, int Kd, double alpha,
                       const double* A, int lda, const double* B, int ldb, double beta,
                       double* C, int ldc) noexcept nogil:
    # row-major C (M x Nc) = alpha op(A) op(B) + beta C, via column-major BLAS
    # applied to the transposed problem
    dgemm(&tb, &ta, &Nc, &M, &Kd, &alpha, <double*> B, &ldb, <double*> A, &lda, &beta, C, &ldc)


cdef void _neural_one(double* th, const double* th0, const double* Xa, const double* cnt,
                      const double* S, const double* Q, int n_act, int din, int N, int L,
                      double lam, int iters, double step, double* loss_out,
                      double* scratch) noexcept nogil:
    # Xa, cnt, S, Q are already restricted to the active rows
    cdef int P = N * din + (L - 2) * N * N + N
    cdef int offL = N * din + (L - 2) * N * N
    cdef int KN = n_act * N
    cdef double* grad = scratch
    cdef double* acts = grad + P          # (L-1) blocks of (n_act x N)
    cdef double* delta = acts + (L - 1) * KN
    cdef double* dnext = delta + KN
    cdef double* coef = dnext + KN
    cdef double* tmp
    cdef double sq = sqrt(<double> N)
    cdef double reg = lam * N
    cdef int it, k, l, r, i
    cdef double acc, f, loss, diff, ck
    cdef double* cur
    cdef double* prev
    cdef double* h
    cdef const double* wL = th + offL
    for it in range(iters + 1):
        if it == iters and loss_out == NULL:
            break
        # forward: acts[0] = relu(Xa W1^T), acts[l] = relu(acts[l-1] W_{l+1}^T)
        if n_act > 0:
            _gemm(b'N', b'T', n_act, N, din, 1.0, Xa, din, th, din, 0.0, acts, N)
            for i in range(KN):
                if acts[i] < 0:
                    acts[i] = 0.0
            for l in range(1, L - 1):
                prev = acts + (l - 1) * KN
                cur = acts + l * KN
                _gemm(b'N', b'T', n_act, N, N, 1.0, prev, N, th + N * din + (l - 1) * N * N, N,
                      0.0, cur, N)
                for i in range(KN):
                    if cur[i] < 0:
                        cur[i] = 0.0
        h = acts + (L - 2) * KN
        loss = 0.0
        for k in range(n_act):
            acc = 0.0
            for r in range(N):
                acc += h[k * N + r] * wL[r]
            f = sq * acc
            loss += 0.5 * (cnt[k] * f * f - 2.0 * f * S[k] + Q[k])
            coef[k] = (cnt[k] * f - S[k]) * sq
        acc = 0.0
        for i in range(P):
            diff = th[i] - th0[i]
            acc += diff * diff
            grad[i] = reg * diff
        loss += 0.5 * reg * acc
        if loss_out != NULL:
            loss_out[it] = loss
        if it == iters:
            break
        if n_act > 0:
            # backward
            for k in range(n_act):
                ck = coef[k]
                for r in range(N):
                    grad[offL + r] += ck * h[k * N + r]
                    delta[k * N + r] = ck * wL[r] if h[k * N + r] > 0 else 0.0
            for l in range(L - 2, 0, -1):
                prev = acts + (l - 1) * KN
                _gemm(b'T', b'N', N, N, n_act, 1.0, delta, N, prev, N, 1.0,
                      grad + N * din + (l - 1) * N * N, N)
                _gemm(b'N', b'N', n_act, N, N, 1.0, delta, N, th + N * din + (l - 1) * N * N, N,
                      0.0, dnext, N)
                for i in range(KN):
                    if prev[i] <= 0:
                        dnext[i] = 0.0
                tmp = delta
                delta = dnext
                dnext = tmp
            _gemm(b'T', b'N', N, din, n_act, 1.0, delta, N, Xa, din, 1.0, grad, din)
        for i in range(P):
            th[i] -= step * grad[i]


def neural_gd(double[:, ::1] params, const double[:, ::1] params0, const double[:, ::1] X,
              const double[::1] counts, const double[:, ::1] sums, const double[:, ::1] sumsq,
              int width, int depth, double lam, int iters, double step,
              double[:, ::1] losses=None, int n_threads=1):
    cdef int m = params.shape[0], P = params.shape[1], din = X.shape[1]
    cdef int N = width, L = depth
    cdef int j
    cdef bint record = losses is not None
    if P != N * din + (L - 2) * N * N + N:
        raise ValueError("parameter vector length does not match (din, width, depth)")
    active = np.flatnonzero((np.asarray(counts) != 0) | np.any(np.asarray(sums) != 0, axis=0))
    cdef int n_act = active.size
    cdef double[:, ::1] Xa = np.ascontiguousarray(np.asarray(X)[active])
    cdef double[::1] ca = np.ascontiguousarray(np.asarray(counts)[active])
    cdef double[:, ::1] Sa = np.ascontiguousarray(np.asarray(sums)[:, active])
    cdef double[:, ::1] Qa = np.ascontiguousarray(np.asarray(sumsq)[:, active])
    cdef int scratch_len = P + (L + 1) * max(n_act, 1) * N + max(n_act, 1)
    cdef double* scratch
    cdef double* xp = &Xa[0, 0] if n_act > 0 else NULL
    cdef double* cp = &ca[0] if n_act > 0 else NULL
    if n_threads <= 1 or m <= 1:
        scratch = <double*> malloc(scratch_len * sizeof(double))
        try:
            for j in range(m):
                _neural_one(&params[j, 0], &params0[j, 0], xp, cp,
                            &Sa[j, 0] if n_act > 0 else NULL, &Qa[j, 0] if n_act > 0 else NULL,
                            n_act, din, N, L, lam, iters, step,
                            &losses[j, 0] if record else NULL, scratch)
        finally:
            free(scratch)
        return
    for j in prange(m, nogil=True, num_threads=n_threads, schedule="static"):
        scratch = <double*> malloc(scratch_len * sizeof(double))
        _neural_one(&params[j, 0], &params0[j, 0], xp, cp,
                    &Sa[j, 0] if n_act > 0 else NULL, &Qa[j, 0] if n_act > 0 else NULL,
                    n_act, din, N, L, lam, iters, step,
                    &losses[j, 0] if record else NULL, scratch)
        free(scratch)


def neural_forward(const double[:, ::1] params, const double[:, ::1] X, int width, int depth):
    cdef int m = params.shape[0], K = X.shape[0], din = X.shape[1]
    cdef int N = width, L = depth
    cdef int offL = N * din + (L - 2) * N * N
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out = np.empty((m, K), dtype=np.float64)
    cdef double* acts = <double*> malloc((L - 1) * N * sizeof(double))
    cdef int j, k, l, r, s, i
    cdef double acc
    cdef const double* th
    cdef const double* W
    cdef const double* prev
    cdef const double* x
    cdef double sq = sqrt(<double> N)
    try:
        for j in range(m):
            th = &params[j, 0]
            for k in range(K):
                x = &X[k, 0]
                for r in range(N):
                    acc = 0.0
                    for i in range(din):
                        acc += th[r * din + i] * x[i]
                    acts[r] = acc if acc > 0 else 0.0
                for l in range(1, L - 1):
                    W = th + N * din + (l - 1) * N * N
                    prev = acts + (l - 1) * N
                    for r in range(N):
                        acc = 0.0
                        for s in range(N):
                            acc += W[r * N + s] * prev[s]
                        acts[l * N + r] = acc if acc > 0 else 0.0
                prev = acts + (L - 2) * N
                acc = 0.0
                for r in range(N):
                    acc += th[offL + r] * prev[r]
                out[j, k] = sq * acc
    finally:
        free(acts)
    return out
