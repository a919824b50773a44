"""Inner loops of the selective-scan recurrence.

The recurrence is inherently sequential in t, so the loops are compiled
with numba when available; the numpy fallbacks compute the identical
float64 result (same operation order) and keep the package importable
without a JIT.  Set MTSCAN_NO_JIT=1 to force the fallbacks.
"""

from __future__ import annotations

import os

import numpy as np


def _scan_forward(a_bar, b_bar, c, x, d_skip, h_all, y):
    L, d, n = a_bar.shape
    h = np.zeros((d, n))
    for t in range(L):
        for i in range(d):
            acc = 0.0
            for j in range(n):
                h[i, j] = a_bar[t, i, j] * h[i, j] + b_bar[t, i, j] * x[t, i]
                h_all[t, i, j] = h[i, j]
                acc += h[i, j] * c[t, j]
            y[t, i] = acc + d_skip[i] * x[t, i]


def _scan_backward(a_bar, b_bar, c, x, d_skip, h_all, dy,
                   da_bar, db_bar, dc, dx, dd_skip):
    L, d, n = a_bar.shape
    g = np.zeros((d, n))
    for t in range(L - 1, -1, -1):
        for i in range(d):
            dd_skip[i] += dy[t, i] * x[t, i]
            dx[t, i] += dy[t, i] * d_skip[i]
            for j in range(n):
                g[i, j] += dy[t, i] * c[t, j]
                dc[t, j] += dy[t, i] * h_all[t, i, j]
        for i in range(d):
            for j in range(n):
                h_prev = h_all[t - 1, i, j] if t > 0 else 0.0
                da_bar[t, i, j] = g[i, j] * h_prev
                db_bar[t, i, j] = g[i, j] * x[t, i]
                dx[t, i] += g[i, j] * b_bar[t, i, j]
                g[i, j] *= a_bar[t, i, j]


def _fused_scan_forward(delta, a, b_in, c, x, d_skip, a_bar_all, h_all, y):
    """Whole head in one sweep: per-step scalar delta discretizes the diagonal
    state matrix in place; saves decays and states for the adjoint."""
    L, d = x.shape
    n = a.shape[1]
    h = np.zeros((d, n))
    for t in range(L):
        dt = delta[t]
        for i in range(d):
            acc = 0.0
            xt = x[t, i]
            for j in range(n):
                ab = np.exp(dt * a[i, j])
                a_bar_all[t, i, j] = ab
                h[i, j] = ab * h[i, j] + dt * b_in[t, j] * xt
                h_all[t, i, j] = h[i, j]
                acc += h[i, j] * c[t, j]
            y[t, i] = acc + d_skip[i] * xt


def _fused_scan_backward(delta, a, b_in, c, x, d_skip, a_bar_all, h_all, dy,
                         ddelta, da, db, dc, dx, dd_skip):
    L, d = x.shape
    n = a.shape[1]
    g = np.zeros((d, n))
    for t in range(L - 1, -1, -1):
        dt = delta[t]
        for i in range(d):
            dd_skip[i] += dy[t, i] * x[t, i]
            dx[t, i] += dy[t, i] * d_skip[i]
            for j in range(n):
                g[i, j] += dy[t, i] * c[t, j]
                dc[t, j] += dy[t, i] * h_all[t, i, j]
        for i in range(d):
            xt = x[t, i]
            for j in range(n):
                gij = g[i, j]
                h_prev = h_all[t - 1, i, j] if t > 0 else 0.0
                ab = a_bar_all[t, i, j]
                d_abar = gij * h_prev            # adjoint of the decay factor
                d_bbar = gij * xt                # adjoint of delta * B_t[j]
                ddelta[t] += d_abar * a[i, j] * ab + d_bbar * b_in[t, j]
                da[i, j] += d_abar * dt * ab
                db[t, j] += d_bbar * dt
                dx[t, i] += gij * dt * b_in[t, j]
                g[i, j] = gij * ab


scan_forward = _scan_forward
scan_backward = _scan_backward
fused_scan_forward = _fused_scan_forward
fused_scan_backward = _fused_scan_backward

if not os.environ.get("MTSCAN_NO_JIT"):
    try:
        from numba import njit

        scan_forward = njit(cache=True)(_scan_forward)
        scan_backward = njit(cache=True)(_scan_backward)
        fused_scan_forward = njit(cache=True)(_fused_scan_forward)
        fused_scan_backward = njit(cache=True)(_fused_scan_backward)
    except ImportError:  # pragma: no cover
        pass
