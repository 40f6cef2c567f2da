"""Numba-compiled hot loops. Inference-only: training uses the batched
numpy paths in nn.py."""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def lstm_rollout_kernel(Wt, U, b, fc_W, fc_b, head_W, head_b,
                        window, horizon, in_scale, out_scale):
    """Autoregressive sliding-window LSTM rollout.

    window is the raw (n, 19) state history (oldest first, float32). Gate
    rows in Wt (D, 4H), U and b are ordered [input, forget, output, cell] so
    the three sigmoids act on one contiguous block. Each prediction re-runs
    the recurrence from zero state over the current window, decodes the
    residual onto the newest row, renormalizes the quaternion, and feeds the
    result back. Stops after the first prediction below the ground plane.
    Returns the (k, 19) predicted rows.
    """
    n, D = window.shape
    H = U.shape[1]
    out = np.empty((horizon, D), dtype=np.float32)
    work = window.copy()
    feats = work / in_scale.reshape(1, D)
    one = np.float32(1.0)
    # input projections slide with the window: only one row is new per step
    wp = feats @ Wt + b.reshape(1, 4 * H)
    for k in range(horizon):
        h = np.zeros(H, dtype=np.float32)
        c = np.zeros(H, dtype=np.float32)
        for j in range(n):
            z = U @ h + wp[j]
            s = one / (one + np.exp(-z[:3 * H]))
            g = np.tanh(z[3 * H:])
            c = s[H:2 * H] * c + s[:H] * g
            h = s[2 * H:3 * H] * np.tanh(c)
        fc = np.tanh(fc_W @ h + fc_b)
        y = head_W @ fc + head_b
        nxt = work[n - 1] + y * out_scale
        qn = np.sqrt(nxt[3] ** 2 + nxt[4] ** 2 + nxt[5] ** 2 + nxt[6] ** 2)
        sign = one if nxt[3] >= 0.0 else -one
        for d in range(3, 7):
            nxt[d] = sign * nxt[d] / qn
        out[k] = nxt
        if nxt[2] < 0.0:
            return out[:k + 1]
        for j in range(n - 1):
            work[j] = work[j + 1]
            feats[j] = feats[j + 1]
            wp[j] = wp[j + 1]
        work[n - 1] = nxt
        feats[n - 1] = nxt / in_scale
        wp[n - 1] = feats[n - 1] @ Wt + b
    return out
