"""Fused per-channel normalisation kernels on (N, C, L) views.

Plain numpy spends most of a training step making temporaries for these
elementwise passes; the loops below touch each activation twice at most.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def channel_stats(x):
    n, c, l = x.shape
    mean = np.empty(c)
    var = np.empty(c)
    m = n * l
    for j in range(c):
        s = 0.0
        for i in range(n):
            for k in range(l):
                s += x[i, j, k]
        mu = s / m
        ss = 0.0
        for i in range(n):
            for k in range(l):
                d = x[i, j, k] - mu
                ss += d * d
        mean[j] = mu
        var[j] = ss / m
    return mean, var


@njit(cache=True)
def affine_forward(x, mean, inv_std, gamma, beta, relu, out):
    n, c, l = x.shape
    for i in range(n):
        for j in range(c):
            a = inv_std[j] * gamma[j]
            b = beta[j] - mean[j] * a
            for k in range(l):
                y = x[i, j, k] * a + b
                if relu and y < 0:
                    y = 0.0
                out[i, j, k] = y


@njit(cache=True)
def affine_backward(g, x, out, mean, inv_std, gamma, relu, batch_stats, need_gx, gx):
    """Returns (dscale, dshift); writes d/dx into ``gx`` when ``need_gx``.

    ``out`` is the forward result, used only for the ReLU mask.
    """
    n, c, l = x.shape
    dscale = np.zeros(c)
    dshift = np.zeros(c)
    m = n * l
    for j in range(c):
        s0 = 0.0
        s1 = 0.0
        mu = mean[j]
        istd = inv_std[j]
        for i in range(n):
            for k in range(l):
                gv = g[i, j, k]
                if relu and out[i, j, k] <= 0:
                    gv = 0.0
                s0 += gv
                s1 += gv * (x[i, j, k] - mu) * istd
        dshift[j] = s0
        dscale[j] = s1
        if need_gx:
            a = gamma[j] * istd
            for i in range(n):
                for k in range(l):
                    gv = g[i, j, k]
                    if relu and out[i, j, k] <= 0:
                        gv = 0.0
                    if batch_stats:
                        xhat = (x[i, j, k] - mu) * istd
                        gx[i, j, k] = a * (gv - (s0 + xhat * s1) / m)
                    else:
                        gx[i, j, k] = a * gv
    return dscale, dshift
