"""Hot inner loops, each in a numba flavour and a vectorised numpy flavour.

The public names (``uniforms``, ``stochastic_round_codes``, ...) dispatch to
the compiled loop when numba is active and to the numpy twin otherwise.  Both
flavours are always importable so tests and the benchmark can compare them.
"""

from __future__ import annotations

import numpy as np

from fqtlab._accel import HAVE_NUMBA, njit

# smallest lambda2 / lambda1 used when fitting Householder scales
LAMBDA2_FLOOR = 1e-12

# Philox4x32-10 constants (Salmon et al., Random123).
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_S32 = np.uint64(32)
_S5 = np.uint64(5)
_S6 = np.uint64(6)
_ROUNDS = 10
_TWO26 = 67108864.0
_TWO53 = 9007199254740992.0


def philox_block(counter, key):
    """Raw Philox4x32-10 on word arrays; ``counter`` is 4 arrays, ``key`` 2.

    Returns the four output words as uint64 arrays holding 32-bit values.
    """
    x0, x1, x2, x3 = (np.asarray(c, dtype=np.uint64) & _MASK for c in counter)
    k0, k1 = (np.uint64(int(k) & 0xFFFFFFFF) for k in key)
    for _ in range(_ROUNDS):
        p0 = _M0 * x0
        p1 = _M1 * x2
        x0, x1, x2, x3 = (
            (p1 >> _S32) ^ x1 ^ k0,
            p1 & _MASK,
            (p0 >> _S32) ^ x3 ^ k1,
            p0 & _MASK,
        )
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return x0, x1, x2, x3


def _words_to_unit(x0, x1):
    return ((x0 >> _S5).astype(np.float64) * _TWO26 + (x1 >> _S6).astype(np.float64)) / _TWO53


def uniforms_numpy(key0, key1, trials, c2, c3, n):
    """Uniforms in [0, 1) for counters (entry, trial, c2, c3); shape (T, n)."""
    trials = np.asarray(trials, dtype=np.uint64)
    entry = np.arange(n, dtype=np.uint64)[None, :]
    t = np.broadcast_to(trials[:, None], (trials.shape[0], n))
    e = np.broadcast_to(entry, t.shape)
    x0, x1, _, _ = philox_block(
        (e, t, np.full(t.shape, c2, np.uint64), np.full(t.shape, c3, np.uint64)),
        (key0, key1),
    )
    return _words_to_unit(x0, x1)


def _uniform_at(e, t, c2, c3, k0, k1):
    x0 = e
    x1 = t
    x2 = c2
    x3 = c3
    for _ in range(_ROUNDS):
        p0 = _M0 * x0
        p1 = _M1 * x2
        n0 = (p1 >> _S32) ^ x1 ^ k0
        n2 = (p0 >> _S32) ^ x3 ^ k1
        x1 = p1 & _MASK
        x3 = p0 & _MASK
        x0 = n0
        x2 = n2
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return (np.float64(x0 >> _S5) * _TWO26 + np.float64(x1 >> _S6)) / _TWO53


_uniform_at_jit = njit(_uniform_at)


def _uniforms_loop(key0, key1, trials, c2, c3, n):
    out = np.empty((trials.shape[0], n))
    k0 = np.uint64(key0)
    k1 = np.uint64(key1)
    w2 = np.uint64(c2)
    w3 = np.uint64(c3)
    for i in range(trials.shape[0]):
        t = np.uint64(trials[i])
        for e in range(n):
            out[i, e] = _uniform_at_jit(np.uint64(e), t, w2, w3, k0, k1)
    return out


uniforms_loop = njit(_uniforms_loop)


def stochastic_round_codes_numpy(values, key0, key1, trials, c2, c3):
    """Round ``values`` (T, n) up with probability equal to the fractional part."""
    u = uniforms_numpy(key0, key1, trials, c2, c3, values.shape[1])
    lo = np.floor(values)
    return lo + (u < values - lo)


def _stochastic_round_codes_loop(values, key0, key1, trials, c2, c3):
    out = np.empty_like(values)
    k0 = np.uint64(key0)
    k1 = np.uint64(key1)
    w2 = np.uint64(c2)
    w3 = np.uint64(c3)
    for i in range(values.shape[0]):
        t = np.uint64(trials[i])
        for e in range(values.shape[1]):
            x = values[i, e]
            lo = np.floor(x)
            u = _uniform_at_jit(np.uint64(e), t, w2, w3, k0, k1)
            out[i, e] = lo + 1.0 if u < x - lo else lo
    return out


stochastic_round_codes_loop = njit(_stochastic_round_codes_loop)


# -- block Householder application -------------------------------------------
#
# Groups are described by ``order`` (row indices, each group's large row first)
# and ``starts`` (len G + 1 offsets into ``order``).  Within a group of size n the
# reflection is Q = I - 2 v v^T / |v|^2 with v = 1/sqrt(n) - e_1, never formed.


def block_householder_numpy(m, order, starts, s1, s2, inverse):
    out = np.empty_like(m)
    for g in range(len(starts) - 1):
        idx = order[starts[g] : starts[g + 1]]
        n = idx.shape[0]
        scale = np.full(n, s2[g])
        scale[0] = s1[g]
        block = m[idx]
        if not inverse:
            block = block * scale[:, None]
        if n > 1:
            v = np.full(n, 1.0 / np.sqrt(n))
            v[0] -= 1.0
            coef = 2.0 / (v @ v)
            block = block - coef * np.outer(v, v @ block)
        if inverse:
            block = block / scale[:, None]
        out[idx] = block
    return out


def _block_householder_loop(m, order, starts, s1, s2, inverse):
    d = m.shape[1]
    out = np.empty_like(m)
    dots = np.empty(d)
    for g in range(starts.shape[0] - 1):
        a = starts[g]
        b = starts[g + 1]
        n = b - a
        if n == 1:
            r = order[a]
            for j in range(d):
                out[r, j] = m[r, j] / s1[g] if inverse else m[r, j] * s1[g]
            continue
        root = 1.0 / np.sqrt(n)
        vnorm2 = (root - 1.0) ** 2 + (n - 1) * root * root
        coef = 2.0 / vnorm2
        for j in range(d):
            dots[j] = 0.0
        for k in range(n):
            r = order[k + a]
            vk = root - 1.0 if k == 0 else root
            sk = 1.0 if inverse else (s1[g] if k == 0 else s2[g])
            for j in range(d):
                dots[j] += vk * sk * m[r, j]
        for k in range(n):
            r = order[k + a]
            vk = root - 1.0 if k == 0 else root
            sk = s1[g] if k == 0 else s2[g]
            for j in range(d):
                if inverse:
                    out[r, j] = (m[r, j] - coef * vk * dots[j]) / sk
                else:
                    out[r, j] = sk * m[r, j] - coef * vk * dots[j]
    return out


block_householder_loop = njit(_block_householder_loop)


# -- group-count search ------------------------------------------------------


def _round_half_up(x):
    return np.floor(x + 0.5)


def group_sizes_numpy(mags, g):
    """Small-row counts for the ``g`` largest rows of descending ``mags``."""
    n = mags.shape[0]
    n_small = n - g
    big = mags[:g]
    total = big.sum()
    if total > 0.0:
        sizes = _round_half_up(n_small * big / total).astype(np.int64)
    else:
        sizes = np.zeros(g, dtype=np.int64)
    floor_ = 1 if n_small >= g else 0
    sizes = np.maximum(sizes, floor_)
    diff = n_small - int(sizes.sum())
    i = 0
    while diff > 0:
        sizes[i % g] += 1
        diff -= 1
        i += 1
    while diff < 0:
        # take from the fullest group; ties go to the smaller magnitude (later index)
        cand = np.where(sizes > floor_)[0]
        j = cand[::-1][np.argmax(sizes[cand][::-1])]
        sizes[j] -= 1
        diff += 1
    return sizes


def _group_term(lam1, lam2, n):
    """(lambda1^(2/3) n^(-1/3) + lambda2^(2/3) n^(2/3))^3 with the degenerate-case rules."""
    if lam1 == 0.0 and lam2 == 0.0:
        return 0.0
    if lam1 == 0.0:
        lam1 = lam2
    if n > 1.0 and lam2 < LAMBDA2_FLOOR * lam1:
        lam2 = LAMBDA2_FLOOR * lam1
    return (lam1 ** (2.0 / 3.0) * n ** (-1.0 / 3.0) + lam2 ** (2.0 / 3.0) * n ** (2.0 / 3.0)) ** 3


def best_group_count_numpy(mags, ranges, use_bound=True):
    """Return (G, small-row sizes) with the smallest group score.

    ``mags`` (row sup-norms) is sorted descending and ``ranges`` holds the
    matching row ranges.  Group i leads with row i; its small rows are the
    next contiguous block after the G leaders, so its lambda2 is twice the
    magnitude of the first of them.  With ``use_bound`` the score is the summed
    closed-form group bound, otherwise the magnitude-only approximation
    sum M_i^2 / (1 + small_i).
    """
    n = mags.shape[0]
    best_g = 1
    best_sizes = np.array([n - 1], dtype=np.int64)
    best_score = np.inf
    for g in range(1, n + 1):
        sizes = group_sizes_numpy(mags, g)
        starts = g + np.concatenate(([0], np.cumsum(sizes)[:-1]))
        score = 0.0
        for i in range(g):
            if use_bound:
                lam2 = 2.0 * mags[starts[i]] if sizes[i] > 0 else 0.0
                score += _group_term(float(ranges[i]), float(lam2), 1.0 + sizes[i])
            else:
                score += mags[i] ** 2 / (1.0 + sizes[i])
        if score < best_score:
            best_g, best_sizes, best_score = g, sizes, score
    return best_g, best_sizes


def _group_sizes_loop(mags, g, sizes):
    n = mags.shape[0]
    n_small = n - g
    total = 0.0
    for i in range(g):
        total += mags[i]
    floor_ = 1 if n_small >= g else 0
    acc = 0
    for i in range(g):
        s = 0
        if total > 0.0:
            s = int(np.floor(n_small * mags[i] / total + 0.5))
        if s < floor_:
            s = floor_
        sizes[i] = s
        acc += s
    diff = n_small - acc
    i = 0
    while diff > 0:
        sizes[i % g] += 1
        diff -= 1
        i += 1
    while diff < 0:
        j = -1
        for k in range(g - 1, -1, -1):
            if sizes[k] > floor_ and (j < 0 or sizes[k] > sizes[j]):
                j = k
        sizes[j] -= 1
        diff += 1


def _best_group_count_loop(mags, ranges, use_bound=True):
    n = mags.shape[0]
    sizes = np.empty(n, dtype=np.int64)
    best = np.empty(n, dtype=np.int64)
    best_g = 1
    best_score = np.inf
    for g in range(1, n + 1):
        _group_sizes_loop(mags, g, sizes)
        score = 0.0
        cursor = g
        for i in range(g):
            if use_bound:
                lam2 = 2.0 * mags[cursor] if sizes[i] > 0 else 0.0
                score += _group_term_jit(ranges[i], lam2, 1.0 + sizes[i])
            else:
                score += mags[i] ** 2 / (1.0 + sizes[i])
            cursor += sizes[i]
        if score < best_score:
            best_score = score
            best_g = g
            for i in range(g):
                best[i] = sizes[i]
    return best_g, best[:best_g].copy()


_group_term_jit = njit(_group_term)
_group_sizes_loop = njit(_group_sizes_loop)
best_group_count_loop = njit(_best_group_count_loop)


if HAVE_NUMBA:
    uniforms = uniforms_loop
    stochastic_round_codes = stochastic_round_codes_loop
    block_householder = block_householder_loop
    best_group_count = best_group_count_loop
else:
    uniforms = uniforms_numpy
    stochastic_round_codes = stochastic_round_codes_numpy
    block_householder = block_householder_numpy
    best_group_count = best_group_count_numpy
