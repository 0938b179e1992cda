"""Independent reference computations used by the tests.

Everything here uses Python scalars and loops (or mpmath) rather than the
package's vectorized code paths.
"""

import math

import mpmath


def sig(z):
    return 1.0 / (1.0 + math.exp(-z))


def affine(h, W, b, codes=None, V=None):
    out = []
    for j in range(len(b)):
        s = b[j]
        for i in range(len(h)):
            s += h[i] * W[i][j]
        if codes is not None:
            for i in range(len(codes)):
                s += codes[i] * V[i][j]
        out.append(s)
    return out


def forward(params, x, code_blocks):
    """Scalar-loop forward pass; returns (activations, y, view_out).

    ``code_blocks`` maps 1-based hybrid layer index to its code list.
    """
    arch = params.arch
    t = {k: v.tolist() for k, v in params.tensors.items()}
    h = list(x)
    acts = []
    L = len(arch.layers)
    for l in range(L):
        c = code_blocks.get(l)
        h = [sig(z) for z in affine(h, t[f"U{l}"], t[f"b{l}"], c, t.get(f"V{l}"))]
        acts.append(h)
    y = affine(h, t[f"U{L}"], t[f"b{L}"])
    flat = [v for l in sorted(code_blocks) for v in code_blocks[l]]
    view = affine(y, t["Wy"], t["bv"], flat, t["Wv"])
    return acts, y, view


def recon_ll(y_hat, y, sigma):
    return -len(y) * math.log(sigma) - sum((a - b) ** 2 for a, b in zip(y_hat, y)) / (2 * sigma**2)


def log_softmax_at(logits, k, dps=50):
    mpmath.mp.dps = dps
    z = [mpmath.mpf(float(v)) for v in logits]
    return float(z[k] - mpmath.log(sum(mpmath.e**v for v in z)))


def normalized_weights(log_w, dps=80):
    mpmath.mp.dps = dps
    e = [mpmath.e ** mpmath.mpf(float(v)) for v in log_w]
    s = sum(e)
    return [float(v / s) for v in e]
