"""Pure-numpy LSTM recurrence kernels (time-major layout).

Shapes: ``xw`` (T, B, 4H), ``w`` (H, 4H), ``mask`` (T, B).  The cache holds
activated gates (T, B, 4H) and the candidate cell states (T, B, H) with
``tanh`` applied, plus the carried cell states.
"""
from __future__ import annotations

import numpy as np


def _sig(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_forward(xw: np.ndarray, w: np.ndarray, mask: np.ndarray):
    T, B, H4 = xw.shape
    H = H4 // 4
    h_all = np.zeros((T, B, H))
    c_all = np.zeros((T, B, H))
    gates = np.zeros((T, B, H4))
    tanh_c = np.zeros((T, B, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    for t in range(T):
        a = xw[t] + h @ w
        i = _sig(a[:, :H])
        f = _sig(a[:, H:2 * H])
        g = np.tanh(a[:, 2 * H:3 * H])
        o = _sig(a[:, 3 * H:])
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        m = mask[t][:, None]
        h = m * h_new + (1.0 - m) * h
        c = m * c_new + (1.0 - m) * c
        gates[t, :, :H] = i
        gates[t, :, H:2 * H] = f
        gates[t, :, 2 * H:3 * H] = g
        gates[t, :, 3 * H:] = o
        tanh_c[t] = tc
        h_all[t] = h
        c_all[t] = c
    return h_all, (gates, tanh_c, c_all)


def lstm_backward(dh_all: np.ndarray, w: np.ndarray, mask: np.ndarray, h_all: np.ndarray, cache):
    gates, tanh_c, c_all = cache
    T, B, H = h_all.shape
    dxw = np.zeros((T, B, 4 * H))
    dw = np.zeros_like(w)
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    zeros = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        m = mask[t][:, None]
        dh = dh_all[t] + dh_next
        dc = dc_next
        i = gates[t, :, :H]
        f = gates[t, :, H:2 * H]
        g = gates[t, :, 2 * H:3 * H]
        o = gates[t, :, 3 * H:]
        tc = tanh_c[t]
        c_prev = c_all[t - 1] if t > 0 else zeros
        h_prev = h_all[t - 1] if t > 0 else zeros
        dhn = m * dh
        dcn = m * dc + dhn * o * (1.0 - tc * tc)
        da = dxw[t]
        da[:, :H] = dcn * g * i * (1.0 - i)
        da[:, H:2 * H] = dcn * c_prev * f * (1.0 - f)
        da[:, 2 * H:3 * H] = dcn * i * (1.0 - g * g)
        da[:, 3 * H:] = dhn * tc * o * (1.0 - o)
        dw += h_prev.T @ da
        dh_next = da @ w.T + (1.0 - m) * dh
        dc_next = dcn * f + (1.0 - m) * dc
    return dxw, dw
