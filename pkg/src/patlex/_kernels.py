"""Dynamic-programming kernels, compiled with numba.

All scores are natural-log. Left-to-right topology without skips: from state
s a pattern either stays (log_stay[s]) or advances (log_adv[s]); advancing
out of the last state exits the pattern.
"""

import numpy as np
from numba import njit

NEG_INF = -np.inf


@njit(cache=True, nogil=True)
def _logaddexp(a, b):
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    if a > b:
        return a + np.log1p(np.exp(b - a))
    return b + np.log1p(np.exp(a - b))


@njit(cache=True, nogil=True)
def viterbi_loop(emit, log_stay, log_adv, log_entry):
    """Best path through the pattern loop.

    emit: (T, n, m) per-state emission log-likelihoods.
    Returns (score, patterns, starts) with segments in time order.
    Ties prefer staying over a new transition, then the lowest pattern index.
    """
    T, n, m = emit.shape
    delta = np.full((n, m), NEG_INF)
    prev = np.empty((n, m))
    moved = np.zeros((T, n, m), dtype=np.bool_)
    loop_from = np.zeros(T, dtype=np.int64)

    for p in range(n):
        delta[p, 0] = log_entry + emit[0, p, 0]
        moved[0, p, 0] = True

    for t in range(1, T):
        prev[:, :] = delta
        best_p = 0
        best_exit = NEG_INF
        for p in range(n):
            ex = prev[p, m - 1] + log_adv[p, m - 1]
            if ex > best_exit:
                best_exit = ex
                best_p = p
        loop_from[t - 1] = best_p
        enter = best_exit + log_entry
        for p in range(n):
            for s in range(m):
                stay = prev[p, s] + log_stay[p, s]
                if s == 0:
                    other = enter
                else:
                    other = prev[p, s - 1] + log_adv[p, s - 1]
                if stay >= other:
                    delta[p, s] = stay + emit[t, p, s]
                    moved[t, p, s] = False
                else:
                    delta[p, s] = other + emit[t, p, s]
                    moved[t, p, s] = True

    best_p = 0
    score = NEG_INF
    for p in range(n):
        fin = delta[p, m - 1] + log_adv[p, m - 1]
        if fin > score:
            score = fin
            best_p = p

    patterns = np.empty(T, dtype=np.int64)
    starts = np.empty(T, dtype=np.int64)
    k = 0
    if score == NEG_INF:
        return score, patterns[:0], starts[:0]
    t = T - 1
    p = best_p
    s = m - 1
    while t >= 0:
        if moved[t, p, s]:
            if s > 0:
                s -= 1
                t -= 1
            else:
                patterns[k] = p
                starts[k] = t
                k += 1
                if t == 0:
                    break
                p = loop_from[t - 1]
                s = m - 1
                t -= 1
        else:
            t -= 1
    return score, patterns[:k][::-1].copy(), starts[:k][::-1].copy()


@njit(cache=True, nogil=True)
def forward_backward(emit, offsets, log_stay, log_adv):
    """State posteriors for a batch of segments of one pattern.

    emit: (N, m) emission log-likelihoods of the concatenated segment frames;
    segment i spans rows offsets[i]:offsets[i+1]. Each segment starts in state
    0 and exits from state m-1 at its last frame.
    Returns (gamma (N, m), per-segment log-likelihood).
    """
    N, m = emit.shape
    nseg = offsets.shape[0] - 1
    gamma = np.zeros((N, m))
    seg_ll = np.empty(nseg)
    for i in range(nseg):
        a = offsets[i]
        L = offsets[i + 1] - a
        alpha = np.full((L, m), NEG_INF)
        beta = np.full((L, m), NEG_INF)
        alpha[0, 0] = emit[a, 0]
        for t in range(1, L):
            for s in range(m):
                v = alpha[t - 1, s] + log_stay[s]
                if s > 0:
                    v = _logaddexp(v, alpha[t - 1, s - 1] + log_adv[s - 1])
                alpha[t, s] = v + emit[a + t, s]
        total = alpha[L - 1, m - 1] + log_adv[m - 1]
        seg_ll[i] = total
        if total == NEG_INF:
            continue
        beta[L - 1, m - 1] = log_adv[m - 1]
        for t in range(L - 2, -1, -1):
            for s in range(m):
                v = log_stay[s] + emit[a + t + 1, s] + beta[t + 1, s]
                if s + 1 < m:
                    v = _logaddexp(v, log_adv[s] + emit[a + t + 1, s + 1] + beta[t + 1, s + 1])
                beta[t, s] = v
        for t in range(L):
            for s in range(m):
                gamma[a + t, s] = np.exp(alpha[t, s] + beta[t, s] - total)
    return gamma, seg_ll


@njit(cache=True, nogil=True)
def segment_viterbi(emit, log_stay, log_adv):
    """Best single-pattern alignment score of one segment (start state 0,
    exit from state m-1)."""
    L, m = emit.shape
    delta = np.full(m, NEG_INF)
    delta[0] = emit[0, 0]
    for t in range(1, L):
        new = np.full(m, NEG_INF)
        for s in range(m):
            v = delta[s] + log_stay[s]
            if s > 0:
                w = delta[s - 1] + log_adv[s - 1]
                if w > v:
                    v = w
            new[s] = v + emit[t, s]
        delta = new
    return delta[m - 1] + log_adv[m - 1]
