"""Hot numeric kernels: monotonic-alignment dynamic programs and overlap-add.

Every kernel has two implementations with identical signatures:

* ``*_nb``  - explicit loops compiled with numba,
* ``*_np``  - vectorised numpy (loop over frames only).

The public names (``forward_backward``, ``viterbi``, ``overlap_add``) dispatch
to the numba version unless ``STYLEDIFF_DISABLE_NUMBA`` is set.

Alignment paths are monotonic and surjective: frame 0 sits on token 0, the last
frame on token ``n - 1``, and each frame either stays on the current token or
advances by one.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

NEG_INF = -np.inf


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------


@njit
def _logaddexp(a, b):
    if a == -np.inf:
        return b
    if b == -np.inf:
        return a
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


@njit
def _forward_backward_one(log_soft, m, n, alpha, beta):
    for j in range(m):
        for i in range(n):
            alpha[j, i] = -np.inf
            beta[j, i] = -np.inf
    alpha[0, 0] = log_soft[0, 0]
    for j in range(1, m):
        top = min(j, n - 1)
        for i in range(top + 1):
            a = alpha[j - 1, i]
            if i > 0:
                a = _logaddexp(a, alpha[j - 1, i - 1])
            alpha[j, i] = a + log_soft[j, i]
    beta[m - 1, n - 1] = 0.0
    for j in range(m - 2, -1, -1):
        low = max(0, n - (m - j))
        for i in range(low, n):
            b = beta[j + 1, i] + log_soft[j + 1, i]
            if i + 1 < n:
                b = _logaddexp(b, beta[j + 1, i + 1] + log_soft[j + 1, i + 1])
            beta[j, i] = b
    return alpha[m - 1, n - 1]


@njit
def forward_backward_nb(log_soft, m_lens, n_lens):
    B, M, N = log_soft.shape
    log_z = np.empty(B)
    post = np.zeros((B, M, N))
    alpha = np.empty((M, N))
    beta = np.empty((M, N))
    for b in range(B):
        m = m_lens[b]
        n = n_lens[b]
        lz = _forward_backward_one(log_soft[b], m, n, alpha, beta)
        log_z[b] = lz
        for j in range(m):
            for i in range(n):
                s = alpha[j, i] + beta[j, i]
                if s != -np.inf:
                    post[b, j, i] = math.exp(s - lz)
    return log_z, post


@njit
def viterbi_nb(log_soft, m_lens, n_lens):
    B, M, N = log_soft.shape
    path = np.zeros((B, M), dtype=np.int64)
    best = np.empty(B)
    delta = np.empty((M, N))
    for b in range(B):
        m = m_lens[b]
        n = n_lens[b]
        for j in range(m):
            for i in range(n):
                delta[j, i] = -np.inf
        delta[0, 0] = log_soft[b, 0, 0]
        for j in range(1, m):
            top = min(j, n - 1)
            for i in range(top + 1):
                stay = delta[j - 1, i]
                if i > 0 and delta[j - 1, i - 1] > stay:
                    stay = delta[j - 1, i - 1]
                delta[j, i] = stay + log_soft[b, j, i]
        best[b] = delta[m - 1, n - 1]
        i = n - 1
        path[b, m - 1] = i
        for j in range(m - 1, 0, -1):
            # on ties take the earlier token, so that read forward in time the
            # path stays on its current token as long as the optimum allows
            if i > 0 and (delta[j - 1, i - 1] >= delta[j - 1, i] or i > j - 1):
                i -= 1
            path[b, j - 1] = i
    return path, best


@njit
def overlap_add_nb(frames, hop, out_len):
    n_frames, width = frames.shape
    out = np.zeros(out_len)
    for f in range(n_frames):
        start = f * hop
        for k in range(width):
            idx = start + k
            if idx < out_len:
                out[idx] += frames[f, k]
    return out


# ---------------------------------------------------------------------------
# numpy fallbacks
# ---------------------------------------------------------------------------


def _shift_right(x):
    out = np.empty_like(x)
    out[0] = NEG_INF
    out[1:] = x[:-1]
    return out


def forward_backward_np(log_soft, m_lens, n_lens):
    B, M, N = log_soft.shape
    log_z = np.empty(B)
    post = np.zeros((B, M, N))
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        for b in range(B):
            m, n = int(m_lens[b]), int(n_lens[b])
            ls = log_soft[b, :m, :n]
            alpha = np.full((m, n), NEG_INF)
            alpha[0, 0] = ls[0, 0]
            for j in range(1, m):
                alpha[j] = np.logaddexp(alpha[j - 1], _shift_right(alpha[j - 1])) + ls[j]
            beta = np.full((m, n), NEG_INF)
            beta[m - 1, n - 1] = 0.0
            for j in range(m - 2, -1, -1):
                nxt = beta[j + 1] + ls[j + 1]
                adv = np.full(n, NEG_INF)
                adv[:-1] = nxt[1:]
                beta[j] = np.logaddexp(nxt, adv)
            # cells that cannot reach the end or cannot be reached are -inf
            rows = np.arange(m)[:, None]
            cols = np.arange(n)[None, :]
            feasible = (cols <= rows) & (cols >= n - (m - rows))
            alpha = np.where(feasible, alpha, NEG_INF)
            lz = alpha[m - 1, n - 1]
            log_z[b] = lz
            s = alpha + beta
            post[b, :m, :n] = np.where(np.isfinite(s), np.exp(s - lz), 0.0)
    return log_z, post


def viterbi_np(log_soft, m_lens, n_lens):
    B, M, N = log_soft.shape
    path = np.zeros((B, M), dtype=np.int64)
    best = np.empty(B)
    for b in range(B):
        m, n = int(m_lens[b]), int(n_lens[b])
        ls = log_soft[b, :m, :n]
        rows = np.arange(m)[:, None]
        cols = np.arange(n)[None, :]
        reach = cols <= rows
        delta = np.full((m, n), NEG_INF)
        delta[0, 0] = ls[0, 0]
        for j in range(1, m):
            prev = delta[j - 1]
            cand = np.maximum(prev, _shift_right(prev))
            delta[j] = np.where(reach[j], cand + ls[j], NEG_INF)
        best[b] = delta[m - 1, n - 1]
        i = n - 1
        path[b, m - 1] = i
        for j in range(m - 1, 0, -1):
            if i > 0 and (delta[j - 1, i - 1] >= delta[j - 1, i] or i > j - 1):
                i -= 1
            path[b, j - 1] = i
    return path, best


def overlap_add_np(frames, hop, out_len):
    n_frames, width = frames.shape
    out = np.zeros(out_len)
    for f in range(n_frames):
        start = f * hop
        stop = min(start + width, out_len)
        if stop > start:
            out[start:stop] += frames[f, : stop - start]
    return out


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _prep(log_soft, m_lens, n_lens):
    log_soft = np.ascontiguousarray(log_soft, dtype=np.float64)
    if log_soft.ndim == 2:
        log_soft = log_soft[None]
    B, M, N = log_soft.shape
    m_lens = np.full(B, M, dtype=np.int64) if m_lens is None else np.asarray(m_lens, dtype=np.int64)
    n_lens = np.full(B, N, dtype=np.int64) if n_lens is None else np.asarray(n_lens, dtype=np.int64)
    if np.any(n_lens < 1) or np.any(m_lens < n_lens):
        raise ValueError("monotonic alignment needs 1 <= n <= m for every example")
    if np.any(m_lens > M) or np.any(n_lens > N):
        raise ValueError("lengths exceed the padded shape")
    return log_soft, m_lens, n_lens


def forward_backward(log_soft, m_lens=None, n_lens=None, use_numba=None):
    """Log partition over monotonic paths and per-cell posterior occupancy.

    Args:
        log_soft: ``(B, M, N)`` (or ``(M, N)``) frame-to-token log posteriors.
        m_lens, n_lens: valid frame / token counts per example.

    Returns:
        ``(log_z, post)`` where ``log_z[b]`` is the log of the summed path
        probability and ``post[b, j, i]`` the probability that frame ``j`` sits
        on token ``i``.  ``-log_z`` is the forward-sum loss and ``-post`` its
        gradient with respect to ``log_soft``.
    """
    log_soft, m_lens, n_lens = _prep(log_soft, m_lens, n_lens)
    use_numba = USE_NUMBA if use_numba is None else use_numba
    fn = forward_backward_nb if use_numba else forward_backward_np
    return fn(log_soft, m_lens, n_lens)


def viterbi(log_soft, m_lens=None, n_lens=None, use_numba=None):
    """Most probable monotonic path. Returns ``(path, best_log_prob)``.

    ``path[b, j]`` is the token index of frame ``j`` (entries past ``m_lens[b]``
    are zero).
    """
    log_soft, m_lens, n_lens = _prep(log_soft, m_lens, n_lens)
    use_numba = USE_NUMBA if use_numba is None else use_numba
    fn = viterbi_nb if use_numba else viterbi_np
    return fn(log_soft, m_lens, n_lens)


def overlap_add(frames, hop, out_len, use_numba=None):
    frames = np.ascontiguousarray(frames, dtype=np.float64)
    use_numba = USE_NUMBA if use_numba is None else use_numba
    fn = overlap_add_nb if use_numba else overlap_add_np
    return fn(frames, int(hop), int(out_len))
