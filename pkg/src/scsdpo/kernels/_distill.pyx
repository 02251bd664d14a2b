# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-token distillation kernels (same contract as _distill_py)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

cdef double LOG_FLOOR = 1e-12
KL = 0
JSD = 1


cdef inline double _flog(double x) nogil:
    return log(x if x > LOG_FLOOR else LOG_FLOOR)


cdef inline double _xlogr(double a, double b) nogil:
    if a <= 0.0:
        return 0.0
    return a * (_flog(a) - _flog(b))


cdef inline void _softmax(const double[:] z, double[:] out) noexcept nogil:
    cdef Py_ssize_t j, v = z.shape[0]
    cdef double zmax = z[0], total = 0.0
    for j in range(1, v):
        if z[j] > zmax:
            zmax = z[j]
    for j in range(v):
        out[j] = exp(z[j] - zmax)
        total += out[j]
    for j in range(v):
        out[j] /= total


cdef inline void _top_k(const double[:] s, Py_ssize_t k, Py_ssize_t[:] order) noexcept nogil:
    # bounded insertion into a descending buffer of k ids, scanning ids upward;
    # strict compares keep the lower id first on ties (matches a stable sort)
    cdef Py_ssize_t j, pos, filled = 0, v = s.shape[0]
    for j in range(v):
        if filled == k and not s[j] > s[order[k - 1]]:
            continue
        pos = filled if filled < k else k - 1
        while pos > 0 and s[j] > s[order[pos - 1]]:
            order[pos] = order[pos - 1]
            pos -= 1
        order[pos] = j
        if filled < k:
            filled += 1


def distill_cells(student_logits, teacher_logits, int top_k, int divergence):
    cdef const double[:, :] zs = np.ascontiguousarray(student_logits, dtype=np.float64)
    cdef const double[:, :] zt = np.ascontiguousarray(teacher_logits, dtype=np.float64)
    cdef Py_ssize_t n = zs.shape[0], v = zs.shape[1], i, j, b
    cdef Py_ssize_t k = top_k if top_k < v else v
    if divergence != 0 and divergence != 1:
        raise ValueError(f"unknown divergence code {divergence!r}")
    out_div = np.zeros(n, dtype=np.float64)
    out_grad = np.zeros((n, v), dtype=np.float64)
    cdef double[:] div = out_div
    cdef double[:, :] grad = out_grad
    cdef double[:] s = np.empty(v, dtype=np.float64)
    cdef double[:] t = np.empty(v, dtype=np.float64)
    cdef double[:] a = np.empty(v, dtype=np.float64)
    cdef Py_ssize_t[:] order = np.empty(v, dtype=np.intp)
    cdef unsigned char[:] in_top = np.empty(v, dtype=np.uint8)
    cdef double s_tail, t_tail, m, total, a_tail, mean_a
    with nogil:
        for i in range(n):
            _softmax(zs[i], s)
            _softmax(zt[i], t)
            _top_k(s, k, order)
            for j in range(v):
                in_top[j] = 0
            for b in range(k):
                in_top[order[b]] = 1
            s_tail = 0.0
            t_tail = 0.0
            for j in range(v):
                if not in_top[j]:
                    s_tail += s[j]
                    t_tail += t[j]
            total = 0.0
            if divergence == 0:
                for j in range(v):
                    if in_top[j]:
                        total += _xlogr(s[j], t[j])
                        a[j] = _flog(s[j]) - _flog(t[j])
                total += _xlogr(s_tail, t_tail)
                a_tail = _flog(s_tail) - _flog(t_tail)
            else:
                for j in range(v):
                    if in_top[j]:
                        m = 0.5 * (s[j] + t[j])
                        total += 0.5 * _xlogr(s[j], m) + 0.5 * _xlogr(t[j], m)
                        a[j] = 0.5 * (_flog(s[j]) - _flog(m))
                m = 0.5 * (s_tail + t_tail)
                total += 0.5 * _xlogr(s_tail, m) + 0.5 * _xlogr(t_tail, m)
                a_tail = 0.5 * (_flog(s_tail) - _flog(m))
            div[i] = total
            mean_a = 0.0
            for j in range(v):
                if not in_top[j]:
                    a[j] = a_tail
                mean_a += s[j] * a[j]
            for j in range(v):
                grad[i, j] = s[j] * (a[j] - mean_a)
    return out_div, out_grad


def policy_gradient_cells(logits, tokens, advantages):
    cdef const double[:, :] z = np.ascontiguousarray(logits, dtype=np.float64)
    cdef const cnp.int64_t[:] tok = np.ascontiguousarray(tokens, dtype=np.int64)
    cdef const double[:] adv = np.ascontiguousarray(advantages, dtype=np.float64)
    cdef Py_ssize_t n = z.shape[0], v = z.shape[1], i, j
    out_loss = np.zeros(n, dtype=np.float64)
    out_grad = np.zeros((n, v), dtype=np.float64)
    cdef double[:] loss = out_loss
    cdef double[:, :] grad = out_grad
    cdef double zmax, total
    with nogil:
        for i in range(n):
            zmax = z[i, 0]
            for j in range(1, v):
                if z[i, j] > zmax:
                    zmax = z[i, j]
            total = 0.0
            for j in range(v):
                grad[i, j] = exp(z[i, j] - zmax)
                total += grad[i, j]
            for j in range(v):
                grad[i, j] = adv[i] * grad[i, j] / total
            grad[i, tok[i]] -= adv[i]
            loss[i] = -adv[i] * (z[i, tok[i]] - zmax - log(total))
    return out_loss, out_grad
