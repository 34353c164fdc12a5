"""LSTM recurrence kernels.

Gate layout along the 4H axis is (input, forget, cell, output). The input
projection ``Z = X @ W.T + b`` is done by the caller with BLAS; these
kernels only run the time recurrence, which is inherently sequential.

``lstm_recurrence`` / ``lstm_recurrence_backward`` dispatch to the numba
versions unless ``SCATAROUSAL_NUMBA=0``.
"""
import math

import numpy as np

from ._accel import USE_NUMBA, njit


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_recurrence_numpy(Z, U):
    T, H4 = Z.shape
    H = H4 // 4
    Hs = np.zeros((T, H))
    Cs = np.zeros((T, H))
    G = np.zeros((T, H4))
    h = np.zeros(H)
    c = np.zeros(H)
    for t in range(T):
        a = Z[t] + U @ h
        i = _sigmoid(a[:H])
        f = _sigmoid(a[H:2 * H])
        g = np.tanh(a[2 * H:3 * H])
        o = _sigmoid(a[3 * H:])
        c = f * c + i * g
        h = o * np.tanh(c)
        G[t, :H], G[t, H:2 * H], G[t, 2 * H:3 * H], G[t, 3 * H:] = i, f, g, o
        Cs[t] = c
        Hs[t] = h
    return Hs, Cs, G


def lstm_recurrence_backward_numpy(dH, G, Cs, U):
    T, H4 = G.shape
    H = H4 // 4
    dZ = np.zeros((T, H4))
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in range(T - 1, -1, -1):
        i, f, g, o = G[t, :H], G[t, H:2 * H], G[t, 2 * H:3 * H], G[t, 3 * H:]
        c_prev = Cs[t - 1] if t > 0 else np.zeros(H)
        tc = np.tanh(Cs[t])
        dh = dH[t] + dh_next
        dc = dh * o * (1.0 - tc * tc) + dc_next
        dZ[t, :H] = dc * g * i * (1.0 - i)
        dZ[t, H:2 * H] = dc * c_prev * f * (1.0 - f)
        dZ[t, 2 * H:3 * H] = dc * i * (1.0 - g * g)
        dZ[t, 3 * H:] = dh * tc * o * (1.0 - o)
        dc_next = dc * f
        dh_next = U.T @ dZ[t]
    return dZ


@njit(cache=True, fastmath=False)
def _sig(x):
    return 0.5 * (1.0 + math.tanh(0.5 * x))


@njit(cache=True, fastmath=False)
def lstm_recurrence_numba(Z, U):
    T, H4 = Z.shape
    H = H4 // 4
    Hs = np.zeros((T, H))
    Cs = np.zeros((T, H))
    G = np.zeros((T, H4))
    h = np.zeros(H)
    c = np.zeros(H)
    for t in range(T):
        a = Z[t] + np.dot(U, h)
        for k in range(H):
            ig = _sig(a[k])
            fg = _sig(a[H + k])
            gg = math.tanh(a[2 * H + k])
            og = _sig(a[3 * H + k])
            c[k] = fg * c[k] + ig * gg
            G[t, k] = ig
            G[t, H + k] = fg
            G[t, 2 * H + k] = gg
            G[t, 3 * H + k] = og
        for k in range(H):
            h[k] = G[t, 3 * H + k] * math.tanh(c[k])
            Cs[t, k] = c[k]
            Hs[t, k] = h[k]
    return Hs, Cs, G


@njit(cache=True, fastmath=False)
def lstm_recurrence_backward_numba(dH, G, Cs, U):
    T, H4 = G.shape
    H = H4 // 4
    dZ = np.zeros((T, H4))
    UT = np.ascontiguousarray(U.T)
    dh_next = np.zeros(H)
    dc_next = np.zeros(H)
    for t in range(T - 1, -1, -1):
        for k in range(H):
            i = G[t, k]
            f = G[t, H + k]
            g = G[t, 2 * H + k]
            o = G[t, 3 * H + k]
            c_prev = Cs[t - 1, k] if t > 0 else 0.0
            tc = math.tanh(Cs[t, k])
            dh = dH[t, k] + dh_next[k]
            dc = dh * o * (1.0 - tc * tc) + dc_next[k]
            dZ[t, k] = dc * g * i * (1.0 - i)
            dZ[t, H + k] = dc * c_prev * f * (1.0 - f)
            dZ[t, 2 * H + k] = dc * i * (1.0 - g * g)
            dZ[t, 3 * H + k] = dh * tc * o * (1.0 - o)
            dc_next[k] = dc * f
        dh_next = np.dot(UT, dZ[t])
    return dZ


_c = np.ascontiguousarray

if USE_NUMBA:
    def lstm_recurrence(Z, U):
        return lstm_recurrence_numba(_c(Z, dtype=np.float64), _c(U, dtype=np.float64))

    def lstm_recurrence_backward(dH, G, Cs, U):
        return lstm_recurrence_backward_numba(_c(dH, dtype=np.float64), G, Cs,
                                              _c(U, dtype=np.float64))
else:
    lstm_recurrence = lstm_recurrence_numpy
    lstm_recurrence_backward = lstm_recurrence_backward_numpy
