"""Numba-jitted twins of the kernels in ``_kernels_np``.

Plain nested loops, no fastmath and no parallelism, so results are
deterministic.  Reductions run over particles in id order.
"""

import numpy as np
from numba import njit

DIVERGENCE_LIMIT = 1e12


@njit(cache=True)
def em_forward_path(x0, b0, b1, b2, bx, ba, s0, s1, s2, controls, dW, h):
    n_steps = controls.shape[0]
    m, n = x0.shape
    k = controls.shape[2]
    d = dW.shape[2]
    states = np.empty((n_steps + 1, m, n))
    states[0] = x0
    for i in range(n_steps):
        xm = np.zeros(n)
        am = np.zeros(k)
        for j in range(m):
            for p in range(n):
                xm[p] += states[i, j, p]
            for p in range(k):
                am[p] += controls[i, j, p]
        xm /= m
        am /= m
        mean_drift = bx[i] @ xm + ba[i] @ am
        mean_sig = np.zeros((n, d))
        for p in range(n):
            for q in range(d):
                acc = 0.0
                for r in range(n):
                    acc += s2[i, p, q, r] * xm[r]
                mean_sig[p, q] = acc
        bad = False
        for j in range(m):
            for p in range(n):
                drift = b0[i, p] + mean_drift[p]
                for r in range(n):
                    drift += b1[i, p, r] * states[i, j, r]
                for r in range(k):
                    drift += b2[i, p, r] * controls[i, j, r]
                diffu = 0.0
                for q in range(d):
                    sig = s0[i, p, q] + mean_sig[p, q]
                    for r in range(n):
                        sig += s1[i, p, q, r] * states[i, j, r]
                    diffu += sig * dW[i, j, q]
                xnew = states[i, j, p] + drift * h[i] + diffu
                states[i + 1, j, p] = xnew
                if not np.isfinite(xnew) or abs(xnew) > DIVERGENCE_LIMIT:
                    bad = True
        if bad:
            return states, i
    return states, -1


@njit(cache=True)
def em_single_step(x, a, b0_i, b1_i, b2_i, bx_i, ba_i, s0_i, s1_i, s2_i, dW_i, h_i):
    m, n = x.shape
    k = a.shape[1]
    d = dW_i.shape[1]
    xm = np.zeros(n)
    am = np.zeros(k)
    for j in range(m):
        for p in range(n):
            xm[p] += x[j, p]
        for p in range(k):
            am[p] += a[j, p]
    xm /= m
    am /= m
    mean_drift = bx_i @ xm + ba_i @ am
    mean_sig = np.zeros((n, d))
    for p in range(n):
        for q in range(d):
            acc = 0.0
            for r in range(n):
                acc += s2_i[p, q, r] * xm[r]
            mean_sig[p, q] = acc
    out = np.empty((m, n))
    for j in range(m):
        for p in range(n):
            drift = b0_i[p] + mean_drift[p]
            for r in range(n):
                drift += b1_i[p, r] * x[j, r]
            for r in range(k):
                drift += b2_i[p, r] * a[j, r]
            diffu = 0.0
            for q in range(d):
                sig = s0_i[p, q] + mean_sig[p, q]
                for r in range(n):
                    sig += s1_i[p, q, r] * x[j, r]
                diffu += sig * dW_i[j, q]
            out[j, p] = x[j, p] + drift * h_i + diffu
    return out


@njit(cache=True)
def adjoint_step(y_next, dW_i, dfx_total, dfa_total, b1_i, b2_i, bx_i, ba_i, s1_i, s2_i, h_i):
    m, n = y_next.shape
    k = dfa_total.shape[1]
    d = dW_i.shape[1]
    ybar = np.zeros(n)
    for j in range(m):
        for p in range(n):
            ybar[p] += y_next[j, p]
    ybar /= m
    s2_term = np.zeros(n)
    for j in range(m):
        for r in range(n):
            acc = 0.0
            for p in range(n):
                for q in range(d):
                    acc += s2_i[p, q, r] * y_next[j, p] * dW_i[j, q]
            s2_term[r] += acc
    s2_term /= m
    bx_ybar = bx_i.T @ ybar
    ba_ybar = ba_i.T @ ybar
    y = np.empty((m, n))
    stat = np.empty((m, k))
    for j in range(m):
        for r in range(n):
            b1_pair = 0.0
            s1_pair = 0.0
            for p in range(n):
                b1_pair += b1_i[p, r] * y_next[j, p]
                for q in range(d):
                    s1_pair += s1_i[p, q, r] * y_next[j, p] * dW_i[j, q]
            y[j, r] = (
                y_next[j, r]
                + h_i * (b1_pair + bx_ybar[r] + dfx_total[j, r])
                + s1_pair
                + s2_term[r]
            )
        for r in range(k):
            acc = 0.0
            for p in range(n):
                acc += b2_i[p, r] * y_next[j, p]
            stat[j, r] = acc + ba_ybar[r] + dfa_total[j, r]
    return y, stat
