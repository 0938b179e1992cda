"""Pure-Python versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and bit-identical results; used when the extension is not
built or when ``MVP_PURE_PYTHON=1`` is set.
"""

import numpy as np

_MASK = (1 << 64) - 1
_TWO_M53 = 1.0 / (1 << 53)


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & _MASK


def splitmix64_state(seed):
    x = int(seed) & _MASK
    out = np.empty(4, dtype=np.uint64)
    for i in range(4):
        x = (x + 0x9E3779B97F4A7C15) & _MASK
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        out[i] = z ^ (z >> 31)
    return out


def _stream(state, n):
    s0, s1, s2, s3 = (int(w) for w in state)
    values = [0] * n
    for i in range(n):
        values[i] = (_rotl((s1 * 5) & _MASK, 7) * 9) & _MASK
        t = (s1 << 17) & _MASK
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
    state[:] = np.array([s0, s1, s2, s3], dtype=np.uint64)
    return values


def xoshiro_fill_u64(state, out):
    out[:] = np.array(_stream(state, out.shape[0]), dtype=np.uint64)


def xoshiro_fill_uniform(state, out):
    out[:] = [(w >> 11) * _TWO_M53 for w in _stream(state, out.shape[0])]


def jacobi_eigh(a, vt, tol, max_sweeps):
    n = a.shape[0]
    total = np.sqrt(np.sum(a * a))
    sweep = 0
    while sweep < max_sweeps:
        off = np.sqrt(2.0 * np.sum(np.triu(a, 1) ** 2))
        if off <= tol * total:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if apq == 0.0:
                    continue
                app = a[p, p]
                aqq = a[q, q]
                tau = (aqq - app) / (2.0 * apq)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = -1.0 / (-tau + np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = t * c
                x = a[p].copy()
                y = a[q]
                a[p] = c * x - s * y
                a[q] = s * x + c * y
                a[p, p] = app - t * apq
                a[q, q] = aqq + t * apq
                a[p, q] = 0.0
                a[q, p] = 0.0
                a[:, p] = a[p]
                a[:, q] = a[q]
                x = vt[p].copy()
                y = vt[q]
                vt[p] = c * x - s * y
                vt[q] = s * x + c * y
        sweep += 1
    return sweep


def momentum_step(theta, buf, grad, mu, lr):
    buf *= mu
    buf += grad
    theta -= lr * buf


_FNV_PRIME = 0x100000001B3


def fnv1a64(data, h=0xCBF29CE484222325):
    for b in bytes(data):
        h = ((h ^ b) * _FNV_PRIME) & _MASK
    return h
