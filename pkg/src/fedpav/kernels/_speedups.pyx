# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counterparts of :mod:`fedpav.kernels.reference`.

``match_stats`` keeps the exact accumulation order of the reference so the
two backends agree bitwise; ``sgd_epoch`` agrees to float tolerance (the
reference delegates its matrix products to BLAS, which may reassociate).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

NAME = "compiled"


def sgd_epoch(double[:, ::1] w_b, double[::1] b_b,
              double[:, ::1] w_h, double[::1] b_h,
              double[:, ::1] m_wb, double[::1] m_bb,
              double[:, ::1] m_wh, double[::1] m_bh,
              double[:, ::1] inputs, cnp.int64_t[::1] labels,
              cnp.int64_t[::1] order, Py_ssize_t batch_size,
              double lr_backbone, double lr_head,
              double momentum, double weight_decay,
              double[::1] losses):
    cdef Py_ssize_t n = order.shape[0]
    cdef Py_ssize_t d = w_b.shape[0]
    cdef Py_ssize_t f = w_b.shape[1]
    cdef Py_ssize_t c = w_h.shape[1]
    cdef double[:, ::1] xb = np.empty((batch_size, d))
    cdef double[:, ::1] feats = np.empty((batch_size, f))
    cdef double[:, ::1] dz = np.empty((batch_size, c))
    cdef double[:, ::1] dfeat = np.empty((batch_size, f))
    cdef cnp.int64_t[::1] yb = np.empty(batch_size, dtype=np.int64)
    cdef Py_ssize_t pos = 0, batch = 0, m, i, j, k
    cdef cnp.int64_t gi
    cdef double acc, zmax, denom, corr, loss, gval

    while pos < n:
        m = n - pos
        if m > batch_size:
            m = batch_size
        for i in range(m):
            gi = order[pos + i]
            yb[i] = labels[gi]
            for j in range(d):
                xb[i, j] = inputs[gi, j]
        loss = 0.0
        for i in range(m):
            for j in range(f):
                acc = b_b[j]
                for k in range(d):
                    acc += xb[i, k] * w_b[k, j]
                feats[i, j] = acc
            for j in range(c):
                acc = b_h[j]
                for k in range(f):
                    acc += feats[i, k] * w_h[k, j]
                dz[i, j] = acc
            zmax = dz[i, 0]
            for j in range(1, c):
                if dz[i, j] > zmax:
                    zmax = dz[i, j]
            corr = dz[i, yb[i]]
            denom = 0.0
            for j in range(c):
                dz[i, j] = exp(dz[i, j] - zmax)
                denom += dz[i, j]
            loss += log(denom) + zmax - corr
            for j in range(c):
                dz[i, j] /= denom
            dz[i, yb[i]] -= 1.0
            for j in range(c):
                dz[i, j] /= m
        losses[batch] = loss / m
        # head gradient + momentum update
        for j in range(f):
            for k in range(c):
                acc = 0.0
                for i in range(m):
                    acc += feats[i, j] * dz[i, k]
                m_wh[j, k] = momentum * m_wh[j, k] + acc + weight_decay * w_h[j, k]
        for k in range(c):
            acc = 0.0
            for i in range(m):
                acc += dz[i, k]
            m_bh[k] = momentum * m_bh[k] + acc + weight_decay * b_h[k]
        # backprop into features uses the pre-update head weights
        for i in range(m):
            for j in range(f):
                acc = 0.0
                for k in range(c):
                    acc += dz[i, k] * w_h[j, k]
                dfeat[i, j] = acc
        for j in range(d):
            for k in range(f):
                acc = 0.0
                for i in range(m):
                    acc += xb[i, j] * dfeat[i, k]
                m_wb[j, k] = momentum * m_wb[j, k] + acc + weight_decay * w_b[j, k]
        for k in range(f):
            acc = 0.0
            for i in range(m):
                acc += dfeat[i, k]
            m_bb[k] = momentum * m_bb[k] + acc + weight_decay * b_b[k]
        for j in range(f):
            for k in range(c):
                w_h[j, k] -= lr_head * m_wh[j, k]
        for k in range(c):
            b_h[k] -= lr_head * m_bh[k]
        for j in range(d):
            for k in range(f):
                w_b[j, k] -= lr_backbone * m_wb[j, k]
        for k in range(f):
            b_b[k] -= lr_backbone * m_bb[k]
        pos += batch_size
        batch += 1


def match_stats(cnp.int64_t[:, ::1] order,
                cnp.int64_t[::1] q_ids, cnp.int64_t[::1] q_cams,
                cnp.int64_t[::1] g_ids, cnp.int64_t[::1] g_cams,
                double[::1] ap, cnp.int64_t[::1] hit_rank):
    cdef Py_ssize_t nq = order.shape[0]
    cdef Py_ssize_t ng = order.shape[1]
    cdef Py_ssize_t qi, col, kept, hits
    cdef cnp.int64_t qid, qcam, gi, first
    cdef double total
    for qi in range(nq):
        qid = q_ids[qi]
        qcam = q_cams[qi]
        kept = 0
        hits = 0
        total = 0.0
        first = -1
        for col in range(ng):
            gi = order[qi, col]
            if g_ids[gi] == qid:
                if g_cams[gi] == qcam:
                    continue
                if first < 0:
                    first = kept
                hits += 1
                total += (<double> hits) / (<double> (kept + 1))
            kept += 1
        if hits == 0:
            ap[qi] = 0.0
            hit_rank[qi] = -1
        else:
            ap[qi] = total / (<double> hits)
            hit_rank[qi] = first
