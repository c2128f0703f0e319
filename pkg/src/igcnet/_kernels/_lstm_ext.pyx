# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled LSTM recurrence: BLAS GEMMs for the recurrent products, one fused
pass over the gates per step.  Same layout and cache as ``lstm_py``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


# exp-based forms: scalar libm tanh is several times slower than exp
cdef inline double _sig(double x) nogil:
    return 1.0 / (1.0 + exp(-x))


cdef inline double _tanh(double x) nogil:
    return 2.0 / (1.0 + exp(-2.0 * x)) - 1.0


def lstm_forward(double[:, :, ::1] xw, double[:, ::1] w, double[:, ::1] mask):
    cdef int T = xw.shape[0]
    cdef int B = xw.shape[1]
    cdef int H4 = xw.shape[2]
    cdef int H = H4 // 4
    h_all_a = np.zeros((T, B, H))
    c_all_a = np.zeros((T, B, H))
    gates_a = np.empty((T, B, H4))
    tanh_c_a = np.empty((T, B, H))
    a_buf_a = np.empty((B, H4))
    h0_a = np.zeros((B, H))
    cdef double[:, :, ::1] h_all = h_all_a
    cdef double[:, :, ::1] c_all = c_all_a
    cdef double[:, :, ::1] gates = gates_a
    cdef double[:, :, ::1] tanh_c = tanh_c_a
    cdef double[:, ::1] a_buf = a_buf_a
    cdef double[:, ::1] h0 = h0_a
    cdef double *h_prev
    cdef double *c_prev
    cdef int t, b, j
    cdef double m, ig, fg, gg, og, cn, tc
    cdef char tr = b'N'
    cdef double one = 1.0
    cdef int ldw = H4
    with nogil:
        for t in range(T):
            if t == 0:
                h_prev = &h0[0, 0]
                c_prev = &h0[0, 0]
            else:
                h_prev = &h_all[t - 1, 0, 0]
                c_prev = &c_all[t - 1, 0, 0]
            for b in range(B):
                for j in range(H4):
                    a_buf[b, j] = xw[t, b, j]
            if H > 0 and B > 0:
                # a^T (4H x B) += W^T (4H x H) . h_prev^T (H x B), column-major view
                dgemm(&tr, &tr, &H4, &B, &H, &one, &w[0, 0], &ldw, h_prev, &H, &one, &a_buf[0, 0], &H4)
            for b in range(B):
                m = mask[t, b]
                for j in range(H):
                    ig = _sig(a_buf[b, j])
                    fg = _sig(a_buf[b, H + j])
                    gg = _tanh(a_buf[b, 2 * H + j])
                    og = _sig(a_buf[b, 3 * H + j])
                    cn = fg * c_prev[b * H + j] + ig * gg
                    tc = _tanh(cn)
                    gates[t, b, j] = ig
                    gates[t, b, H + j] = fg
                    gates[t, b, 2 * H + j] = gg
                    gates[t, b, 3 * H + j] = og
                    tanh_c[t, b, j] = tc
                    h_all[t, b, j] = m * (og * tc) + (1.0 - m) * h_prev[b * H + j]
                    c_all[t, b, j] = m * cn + (1.0 - m) * c_prev[b * H + j]
    return h_all_a, (gates_a, tanh_c_a, c_all_a)


def lstm_backward(double[:, :, ::1] dh_all, double[:, ::1] w, double[:, ::1] mask,
                  double[:, :, ::1] h_all, cache):
    gates_a, tanh_c_a, c_all_a = cache
    cdef double[:, :, ::1] gates = gates_a
    cdef double[:, :, ::1] tanh_c = tanh_c_a
    cdef double[:, :, ::1] c_all = c_all_a
    cdef int T = h_all.shape[0]
    cdef int B = h_all.shape[1]
    cdef int H = h_all.shape[2]
    cdef int H4 = 4 * H
    dxw_a = np.zeros((T, B, H4))
    dw_a = np.zeros((H, H4))
    dh_next_a = np.zeros((B, H))
    dc_next_a = np.zeros((B, H))
    dh_rec_a = np.zeros((B, H))
    zeros_a = np.zeros((B, H))
    cdef double[:, :, ::1] dxw = dxw_a
    cdef double[:, ::1] dw = dw_a
    cdef double[:, ::1] dh_next = dh_next_a
    cdef double[:, ::1] dc_next = dc_next_a
    cdef double[:, ::1] dh_rec = dh_rec_a
    cdef double[:, ::1] zeros = zeros_a
    cdef double *h_prev
    cdef double *c_prev
    cdef int t, b, j
    cdef double m, dh, dc, dhn, dcn, ig, fg, gg, og, tc
    cdef char tn = b'N'
    cdef char tt = b'T'
    cdef double one = 1.0
    cdef double zero = 0.0
    with nogil:
        for t in range(T - 1, -1, -1):
            if t == 0:
                h_prev = &zeros[0, 0]
                c_prev = &zeros[0, 0]
            else:
                h_prev = &h_all[t - 1, 0, 0]
                c_prev = &c_all[t - 1, 0, 0]
            for b in range(B):
                m = mask[t, b]
                for j in range(H):
                    dh = dh_all[t, b, j] + dh_next[b, j]
                    dc = dc_next[b, j]
                    ig = gates[t, b, j]
                    fg = gates[t, b, H + j]
                    gg = gates[t, b, 2 * H + j]
                    og = gates[t, b, 3 * H + j]
                    tc = tanh_c[t, b, j]
                    dhn = m * dh
                    dcn = m * dc + dhn * og * (1.0 - tc * tc)
                    dxw[t, b, j] = dcn * gg * ig * (1.0 - ig)
                    dxw[t, b, H + j] = dcn * c_prev[b * H + j] * fg * (1.0 - fg)
                    dxw[t, b, 2 * H + j] = dcn * ig * (1.0 - gg * gg)
                    dxw[t, b, 3 * H + j] = dhn * tc * og * (1.0 - og)
                    dh_next[b, j] = (1.0 - m) * dh
                    dc_next[b, j] = dcn * fg + (1.0 - m) * dc
            if H > 0 and B > 0:
                # dW^T (4H x H) += da^T (4H x B) . h_prev (B x H)
                dgemm(&tn, &tt, &H4, &H, &B, &one, &dxw[t, 0, 0], &H4, h_prev, &H, &one, &dw[0, 0], &H4)
                # dh_rec^T (H x B) = W (H x 4H) . da^T (4H x B)
                dgemm(&tt, &tn, &H, &B, &H4, &one, &w[0, 0], &H4, &dxw[t, 0, 0], &H4, &zero, &dh_rec[0, 0], &H)
                for b in range(B):
                    for j in range(H):
                        dh_next[b, j] += dh_rec[b, j]
    return dxw_a, dw_a
