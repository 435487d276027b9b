"""Inner loops for the attention probability map.

The hot arrays are [batch, heads, N, N]; doing bias-add, max-subtraction,
exp, and normalization as separate numpy passes is memory-bound, so when
numba is available the whole chain runs as one pass per row (two threads,
row-parallel, deterministic since each row is reduced sequentially). The
numpy fallbacks compute exactly the same values; the test suite compares
the two paths directly.

Set CONVATTN_NO_NUMBA=1 to force the numpy fallbacks.

The pad slot is carried out-of-band: probability arrays stay [.., N] over
grid keys and the pad probability comes back as a separate [batch, heads, N]
array, which keeps every downstream matmul contiguous.
"""

from __future__ import annotations

import os

import numpy as np

HAVE_NUMBA = False
if not os.environ.get("CONVATTN_NO_NUMBA"):
    try:
        import warnings

        from numba import NumbaWarning, njit, prange

        # harmless "TBB too old, using another threading layer" notice fires
        # at first parallel execution, not at import
        warnings.filterwarnings("ignore", category=NumbaWarning, message=".*TBB.*")
        HAVE_NUMBA = True
    except ImportError:
        pass


def _probs_numpy(p: np.ndarray, grid: np.ndarray, pad: np.ndarray | None):
    p += grid
    if pad is None:
        p -= p.max(axis=-1, keepdims=True)
        np.exp(p, out=p)
        p /= p.sum(axis=-1, keepdims=True)
        return None
    pad_b = np.broadcast_to(pad, p.shape[:-1])
    m = np.maximum(p.max(axis=-1), pad_b)
    p -= m[..., None]
    np.exp(p, out=p)
    e_pad = np.exp(pad_b - m)
    s = p.sum(axis=-1) + e_pad
    p /= s[..., None]
    return (e_pad / s).astype(p.dtype)


def _softmax_bwd_numpy(p: np.ndarray, p_pad: np.ndarray | None, dp: np.ndarray):
    dot = np.einsum("bhqk,bhqk->bhq", p, dp)
    dp -= dot[..., None]
    dp *= p
    if p_pad is None:
        return None
    return p_pad * -dot


if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _probs_rows(p, grid, pad, p_pad, has_pad):
        b_n, heads, n_q, n_k = p.shape
        for r in prange(b_n * heads * n_q):
            b = r // (heads * n_q)
            rem = r % (heads * n_q)
            h = rem // n_q
            i = rem % n_q
            row = p[b, h, i]
            grow = grid[h, i]
            m = -np.inf
            for j in range(n_k):
                row[j] += grow[j]
                if row[j] > m:
                    m = row[j]
            pv = 0.0
            if has_pad:
                pv = pad[h, i]
                if pv > m:
                    m = pv
            s = 0.0
            for j in range(n_k):
                e = np.exp(row[j] - m)
                row[j] = e
                s += e
            e_pad = 0.0
            if has_pad:
                e_pad = np.exp(pv - m)
                s += e_pad
            inv = 1.0 / s
            for j in range(n_k):
                row[j] *= inv
            if has_pad:
                p_pad[b, h, i] = e_pad * inv

    @njit(parallel=True, cache=True)
    def _softmax_bwd_rows(p, p_pad, dp, dpad, has_pad):
        b_n, heads, n_q, n_k = p.shape
        for r in prange(b_n * heads * n_q):
            b = r // (heads * n_q)
            rem = r % (heads * n_q)
            h = rem // n_q
            i = rem % n_q
            prow = p[b, h, i]
            drow = dp[b, h, i]
            dot = 0.0
            for j in range(n_k):
                dot += prow[j] * drow[j]
            for j in range(n_k):
                drow[j] = prow[j] * (drow[j] - dot)
            if has_pad:
                dpad[b, h, i] = p_pad[b, h, i] * -dot

    def attn_probs_inplace(p, grid, pad):
        """Turn raw scores into probabilities in place; returns the pad
        probability array (or None when no pad slot exists)."""
        if pad is None:
            dummy2 = np.zeros((1, 1), dtype=p.dtype)
            dummy3 = np.zeros((1, 1, 1), dtype=p.dtype)
            _probs_rows(p, grid, dummy2, dummy3, False)
            return None
        p_pad = np.empty(p.shape[:-1], dtype=p.dtype)
        _probs_rows(p, grid, pad, p_pad, True)
        return p_pad

    def attn_softmax_backward(p, p_pad, dp):
        """Softmax-input gradient in place on ``dp``; returns the pad-logit
        gradient (or None)."""
        if p_pad is None:
            dummy3 = np.zeros((1, 1, 1), dtype=p.dtype)
            _softmax_bwd_rows(p, dummy3, dp, np.empty((1, 1, 1), dtype=p.dtype), False)
            return None
        dpad = np.empty_like(p_pad)
        _softmax_bwd_rows(p, p_pad, dp, dpad, True)
        return dpad

else:
    attn_probs_inplace = _probs_numpy
    attn_softmax_backward = _softmax_bwd_numpy
