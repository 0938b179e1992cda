"""Versioned binary checkpoints.

Layout (all integers and reals little-endian)::

    "MVPC"            magic
    u32               format version
    u32               flags (bit 0: trainer state section present)
    descriptor        architecture, head, sigma_y, sigma_v, view labels
    u64               number of parameter reals
    f64[...]          parameter tensors, row-major, canonical tensor order
    [trainer state]   epoch, step, rng words, momentum buffers (same order)
    u64               FNV-1a hash of every preceding byte

The descriptor fixes every tensor shape, so the payload length is checked
exactly before any tensor is read.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ChecksumError, FormatError
from .model import CONTINUOUS, DISCRETE, Architecture, Layer, Parameters

MAGIC = b"MVPC"
VERSION = 1
FLAG_STATE = 1
_HEADS = {DISCRETE: 0, CONTINUOUS: 1}


@dataclass
class TrainerState:
    epoch: int
    step: int
    rng_state: tuple  # four 64-bit words
    buffers: dict  # momentum buffers keyed like Parameters.tensors


def checksum(data):
    return kernels.fnv1a64(np.frombuffer(data, dtype=np.uint8))


def _descriptor(params):
    arch = params.arch
    out = [struct.pack("<III", arch.input_dim, arch.output_dim, len(arch.layers))]
    for layer in arch.layers:
        out.append(struct.pack("<II", layer.width, layer.random))
    out.append(struct.pack("<BI", _HEADS[arch.head], arch.n_views))
    out.append(struct.pack("<dd", params.sigma_y, params.sigma_v))
    out.append(struct.pack("<I", len(params.views)))
    out.append(np.asarray(params.views, dtype="<f8").tobytes())
    return b"".join(out)


def _tensor_bytes(arch, tensors):
    return b"".join(
        np.ascontiguousarray(tensors[name], dtype="<f8").tobytes() for name in arch.tensor_shapes()
    )


def dumps(params, state=None):
    """Serialize parameters (and optionally trainer state) to bytes."""
    arch = params.arch
    flags = FLAG_STATE if state is not None else 0
    parts = [MAGIC, struct.pack("<II", VERSION, flags), _descriptor(params)]
    parts.append(struct.pack("<Q", arch.parameter_count()))
    parts.append(_tensor_bytes(arch, params.tensors))
    if state is not None:
        parts.append(struct.pack("<QQ", state.epoch, state.step))
        parts.append(struct.pack("<4Q", *state.rng_state))
        parts.append(_tensor_bytes(arch, state.buffers))
    body = b"".join(parts)
    return body + struct.pack("<Q", checksum(body))


class _Reader:
    def __init__(self, data):
        self.data = data
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise FormatError(f"checkpoint truncated while reading {what}", offset=self.pos)
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def tensors(self, arch, what):
        out = {}
        for name, shape in arch.tensor_shapes().items():
            n = int(np.prod(shape))
            raw = self.take(8 * n, f"{what} {name}")
            out[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        return out


def loads(data):
    """Parse checkpoint bytes; returns ``(Parameters, TrainerState or None)``."""
    data = bytes(data)
    if len(data) < 16 or data[:4] != MAGIC:
        raise FormatError("not a checkpoint (bad magic)", offset=0)
    body, (stored,) = data[:-8], struct.unpack("<Q", data[-8:])
    actual = checksum(body)
    if actual != stored:
        raise ChecksumError(f"checkpoint checksum mismatch: stored {stored:016x}, computed {actual:016x}")
    r = _Reader(body)
    r.take(4, "magic")
    version, flags = r.unpack("<II", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", offset=4)
    input_dim, output_dim, n_layers = r.unpack("<III", "descriptor")
    layers = tuple(Layer(*r.unpack("<II", "layer")) for _ in range(n_layers))
    head_code, n_views = r.unpack("<BI", "view head")
    heads = {v: k for k, v in _HEADS.items()}
    if head_code not in heads:
        raise FormatError(f"unknown view head code {head_code}", offset=r.pos - 5)
    sigma_y, sigma_v = r.unpack("<dd", "sigmas")
    (n_labels,) = r.unpack("<I", "view label count")
    views = tuple(float(v) for v in np.frombuffer(r.take(8 * n_labels, "view labels"), dtype="<f8"))
    try:
        arch = Architecture(input_dim, layers, output_dim, heads[head_code], n_views)
    except ValueError as exc:
        raise FormatError(f"invalid architecture descriptor: {exc}") from None
    (count,) = r.unpack("<Q", "parameter count")
    if count != arch.parameter_count():
        raise FormatError(
            f"descriptor implies {arch.parameter_count()} reals but header says {count}", offset=r.pos - 8
        )
    params = Parameters(arch, r.tensors(arch, "tensor"), sigma_y, sigma_v, views)
    state = None
    if flags & FLAG_STATE:
        epoch, step = r.unpack("<QQ", "trainer state")
        rng_state = r.unpack("<4Q", "rng state")
        state = TrainerState(epoch, step, rng_state, r.tensors(arch, "momentum"))
    if r.pos != len(body):
        raise FormatError(f"{len(body) - r.pos} unexpected trailing bytes", offset=r.pos)
    return params, state


def save(path, params, state=None):
    data = dumps(params, state)
    with open(path, "wb") as fh:
        fh.write(data)
    return checksum(data[:-8])


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
