"""Dense float64 numerics: activations, a portable seeded PRNG, eigensolver.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, row-major.
"""

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError

JACOBI_TOL = 1e-12
JACOBI_MAX_SWEEPS = 100
# Jacobi is O(sweeps * n^3) scalar work; above this size "auto" uses LAPACK.
JACOBI_AUTO_LIMIT = 160

_MASK64 = (1 << 64) - 1


class Rng:
    """xoshiro256** generator seeded through splitmix64.

    The stream is a pure function of the 64-bit seed, identical across
    platforms and kernel backends.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & _MASK64
        self.state = kernels.splitmix64_state(self.seed)

    def next_u64(self, n=None):
        out = np.empty(1 if n is None else n, dtype=np.uint64)
        kernels.xoshiro_fill_u64(self.state, out)
        return int(out[0]) if n is None else out

    def random(self, n):
        """``n`` doubles uniform on [0, 1), 53-bit resolution."""
        out = np.empty(n, dtype=np.float64)
        if n:
            kernels.xoshiro_fill_uniform(self.state, out)
        return out

    def normal(self, n):
        """``n`` standard normals by Box-Muller, both branches used."""
        m = (n + 1) // 2
        u = self.random(2 * m)
        r = np.sqrt(-2.0 * np.log1p(-u[0::2]))
        theta = 2.0 * np.pi * u[1::2]
        z = np.empty(2 * m)
        z[0::2] = r * np.cos(theta)
        z[1::2] = r * np.sin(theta)
        return z[:n]

    def integers(self, high, n=None):
        """Uniform integers in [0, high) via multiply-shift on 64-bit draws."""
        words = self.next_u64(1 if n is None else n)
        vals = [(int(w) * int(high)) >> 64 for w in words]
        return vals[0] if n is None else np.array(vals, dtype=np.int64)

    def permutation(self, n):
        """Fisher-Yates shuffle of ``range(n)``."""
        perm = list(range(n))
        if n > 1:
            words = self.next_u64(n - 1)
            for k, i in enumerate(range(n - 1, 0, -1)):
                j = (int(words[k]) * (i + 1)) >> 64
                perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)

    def fork(self):
        """Independent child generator seeded from one draw of this one."""
        return Rng(self.next_u64())

    def getstate(self):
        return tuple(int(w) for w in self.state)

    def setstate(self, words):
        self.state = np.array(words, dtype=np.uint64)


def derive_seed(*parts):
    """Mix integers into one 64-bit seed (splitmix64 finalizer chain)."""
    h = 0x6A09E667F3BCC909
    for part in parts:
        h = (h ^ (int(part) & _MASK64)) & _MASK64
        h = (h + 0x9E3779B97F4A7C15) & _MASK64
        h = ((h ^ (h >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
        h = ((h ^ (h >> 27)) * 0x94D049BB133111EB) & _MASK64
        h ^= h >> 31
    return h


def uniform(rng, rows, cols):
    return rng.random(rows * cols).reshape(rows, cols)


def gaussian(rng, rows, cols, mean=0.0, std=1.0):
    return mean + std * rng.normal(rows * cols).reshape(rows, cols)


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    # 1/(1+exp(-z)) is accurate on both tails; exp overflow to inf gives exactly 0
    out = np.negative(z)
    with np.errstate(over="ignore"):
        np.exp(out, out=out)
    out += 1.0
    return np.reciprocal(out, out=out)


def logsumexp(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    m = np.max(z, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))
    return np.squeeze(out, axis=axis)


def log_softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    return z - np.expand_dims(logsumexp(z, axis=axis), axis)


def softmax(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - np.max(z, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_row(z):
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 1:
        raise DimensionError(f"softmax_row expects a 1-D row, got shape {z.shape}")
    return softmax(z)


def sym_eigh(a, method="jacobi"):
    """Eigen-decomposition of a symmetric matrix.

    Returns ``(values, vectors)`` with eigenvalues in descending order and
    eigenvectors as the columns of ``vectors``. Each eigenvector is signed so
    that its largest-magnitude entry is positive.

    ``method`` is ``"jacobi"`` (cyclic Jacobi rotations, the default),
    ``"lapack"`` (``numpy.linalg.eigh``) or ``"auto"`` (Jacobi up to
    ``JACOBI_AUTO_LIMIT`` rows, LAPACK above).
    """
    a = np.array(a, dtype=np.float64, order="C")
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"sym_eigh needs a square matrix, got shape {a.shape}")
    n = a.shape[0]
    if n and np.max(np.abs(a - a.T)) > 1e-10 * max(1.0, np.max(np.abs(a))):
        raise ContractError("sym_eigh input is not symmetric")
    if method == "auto":
        method = "jacobi" if n <= JACOBI_AUTO_LIMIT else "lapack"
    if method == "jacobi":
        a = 0.5 * (a + a.T)
        vt = np.eye(n)
        kernels.jacobi_eigh(a, vt, JACOBI_TOL, JACOBI_MAX_SWEEPS)
        values = np.diag(a).copy()
        vectors = vt.T
    elif method == "lapack":
        values, vectors = np.linalg.eigh(a)
    else:
        raise ContractError(f"unknown eigensolver method {method!r}")
    order = np.argsort(-values, kind="stable")
    values = values[order]
    vectors = np.ascontiguousarray(vectors[:, order])
    if n:
        idx = np.argmax(np.abs(vectors), axis=0)
        signs = np.sign(vectors[idx, np.arange(n)])
        signs[signs == 0] = 1.0
        vectors *= signs
    return values, vectors
