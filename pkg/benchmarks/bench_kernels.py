"""Compare the compiled kernels against the pure-Python fallback.

Run with ``python benchmarks/bench_kernels.py``. Each kernel is timed on both
backends with identical inputs, and the outputs are checked for equality.
Exits nonzero if the extension is not built or any result differs.
"""

import argparse
import sys
import timeit

import numpy as np

from mvp import _pykernels as py
from mvp import kernels


def _cases(dim, n_uniform, n_params, n_bytes):
    rng = np.random.default_rng(0)
    a = rng.normal(size=(dim, dim))
    sym = a @ a.T
    theta = rng.normal(size=n_params)
    grad = rng.normal(size=n_params)
    blob = rng.integers(0, 256, size=n_bytes, dtype=np.uint8)

    def uniform(backend):
        state = backend.splitmix64_state(2015)
        out = np.empty(n_uniform)
        backend.xoshiro_fill_uniform(state, out)
        return out

    def jacobi(backend):
        m, vt = sym.copy(), np.eye(dim)
        backend.jacobi_eigh(m, vt, 1e-14, 60)
        return np.concatenate([np.diag(m), vt.ravel()])

    def momentum(backend):
        th, buf = theta.copy(), np.zeros(n_params)
        for _ in range(5):
            backend.momentum_step(th, buf, grad, 0.9, 0.01)
        return th

    def checksum(backend):
        return np.array([backend.fnv1a64(blob)], dtype=np.uint64)

    return {
        f"xoshiro uniform x{n_uniform}": uniform,
        f"jacobi eigh {dim}x{dim}": jacobi,
        f"momentum step x5, {n_params} params": momentum,
        f"fnv1a64 {n_bytes} bytes": checksum,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--dim", type=int, default=48)
    args = ap.parse_args(argv)
    if kernels.compiled_backend is None:
        print("compiled extension not available; build with pip install -e .", file=sys.stderr)
        return 1
    cc = kernels.compiled_backend
    ok = True
    print(f"{'kernel':40s} {'python s':>10s} {'compiled s':>11s} {'speedup':>8s}  match")
    for name, fn in _cases(args.dim, 200_000, 1_000_000, 1 << 20).items():
        same = np.array_equal(fn(py), fn(cc))
        ok &= same
        t_py = min(timeit.repeat(lambda: fn(py), number=1, repeat=args.repeat))
        t_cc = min(timeit.repeat(lambda: fn(cc), number=1, repeat=args.repeat))
        print(f"{name:40s} {t_py:10.4f} {t_cc:11.5f} {t_py / t_cc:7.1f}x  {'yes' if same else 'NO'}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
