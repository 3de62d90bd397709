"""Pure-numpy implementations of the hot particle kernels.

Same signatures as ``_kernels_numba``; selected via the MFCLAB_BACKEND
environment variable (see ``_backend``).  All reductions over particles
use numpy's pairwise summation, particles are kept in id order, so
results are deterministic for a fixed backend.

Shapes (N steps, M particles, n states, k controls, d noise dims):
  b0 (N,n)  b1 (N,n,n)  b2 (N,n,k)  bx (N,n,n)  ba (N,n,k)
  s0 (N,n,d)  s1 (N,n,d,n)  s2 (N,n,d,n)
  controls (N,M,k)  dW (N,M,d)  h (N,)
"""

import numpy as np

DIVERGENCE_LIMIT = 1e12


def em_forward_path(x0, b0, b1, b2, bx, ba, s0, s1, s2, controls, dW, h):
    """Explicit Euler sweep of the affine particle dynamics.

    Empirical means are taken before each step.  Returns
    (states (N+1,M,n), bad_step) where bad_step is -1 on success and the
    first step index producing a non-finite or oversized state otherwise.
    """
    n_steps = controls.shape[0]
    m, n = x0.shape
    states = np.empty((n_steps + 1, m, n), dtype=np.float64)
    states[0] = x0
    x = x0
    for i in range(n_steps):
        a = controls[i]
        xm = x.mean(axis=0)
        am = a.mean(axis=0)
        drift = b0[i] + x @ b1[i].T + a @ b2[i].T + (bx[i] @ xm + ba[i] @ am)
        sig = s0[i] + np.einsum("pdj,mj->mpd", s1[i], x) + (s2[i] @ xm)
        x = x + drift * h[i] + np.einsum("mpd,md->mp", sig, dW[i])
        states[i + 1] = x
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > DIVERGENCE_LIMIT:
            return states, i
    return states, -1


def em_single_step(x, a, b0_i, b1_i, b2_i, bx_i, ba_i, s0_i, s1_i, s2_i, dW_i, h_i):
    """One explicit Euler step; coefficient arguments are per-time slices."""
    xm = x.mean(axis=0)
    am = a.mean(axis=0)
    drift = b0_i + x @ b1_i.T + a @ b2_i.T + (bx_i @ xm + ba_i @ am)
    sig = s0_i + np.einsum("pdj,mj->mpd", s1_i, x) + (s2_i @ xm)
    return x + drift * h_i + np.einsum("mpd,md->mp", sig, dW_i)


def adjoint_step(y_next, dW_i, dfx_total, dfa_total, b1_i, b2_i, bx_i, ba_i, s1_i, s2_i, h_i):
    """One backward step of the discrete adjoint recursion.

    y = y⁺ + h (b1ᵀ y⁺ + bxᵀ ȳ⁺ + dfx_total) + S1ᵀ(y⁺ dWᵀ) + avg_j S2ᵀ(y⁺_j dW_jᵀ)

    dfx_total / dfa_total carry the cost derivative plus its cloud-averaged
    measure-derivative part, evaluated in the caller.  Returns (y, stat)
    where stat = b2ᵀ y⁺ + baᵀ ȳ⁺ + dfa_total is the per-particle control
    stationarity density (unscaled by step length or particle weight).
    """
    ybar = y_next.mean(axis=0)
    # S1ᵀ pairing: out[j] = sum_{p,d} s1[p,d,j] * y[p] * dW[d]
    s1_term = np.einsum("pdj,mp,md->mj", s1_i, y_next, dW_i)
    s2_term = np.einsum("pdj,mp,md->j", s2_i, y_next, dW_i) / y_next.shape[0]
    y = (
        y_next
        + h_i * (y_next @ b1_i + bx_i.T @ ybar + dfx_total)
        + s1_term
        + s2_term
    )
    stat = y_next @ b2_i + ba_i.T @ ybar + dfa_total
    return y, stat
