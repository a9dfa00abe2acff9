"""Inference straight from packed layers.

``decode`` materialises ``C[A]``. ``qmatvec``/``qmatmul`` never build the
dense matrix: each output row walks its slice of the bitstream, pulls
``log2 k`` bits per slot, gathers that codeword from the (small, hot)
codebook and accumulates it against the matching ``d`` inputs in float64.
Rows are independent units of work.
"""

from __future__ import annotations

import os
import time

import numpy as np

from .errors import ContractError
from .packfmt import PackedLayer, unpack

try:
    import numba
    from numba import njit, prange

    if "NUMBA_THREADING_LAYER" not in os.environ:
        # the system TBB is often too old for numba; skip it before probing
        numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False


def decode(layer: PackedLayer) -> np.ndarray:
    """Dense ``o x i`` float32 weights; slot ``(r, s)`` is a verbatim copy of codeword ``a[r, s]``."""
    idx = unpack(layer.bitstream, layer.count, layer.k)
    return layer.codebook[idx].reshape(layer.o, layer.i)


if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _kernel(stream, codebook, x, o, slots, d, bits, out):  # pragma: no cover - compiled
        mask = (np.int64(1) << bits) - 1
        b = x.shape[1]
        for r in prange(o):
            acc = np.zeros(b, dtype=np.float64)
            for s in range(slots):
                off = (r * slots + s) * bits
                byte = off >> 3
                sh = off & 7
                v = np.int64(0)
                for t in range((sh + bits + 7) >> 3):
                    v |= np.int64(stream[byte + t]) << (8 * t)
                a = (v >> sh) & mask
                base = s * d
                for j in range(d):
                    w = np.float64(codebook[a, j])
                    for c in range(b):
                        acc[c] += w * x[base + j, c]
            for c in range(b):
                out[r, c] = acc[c]


def _lut_path(layer: PackedLayer, x: np.ndarray) -> np.ndarray:
    # numpy fallback: per-slot lookup tables of codeword . input, decoded a row block at a time
    slots, d, k = layer.slots, layer.d, layer.k
    xs = x.reshape(slots, d, -1)
    lut = np.einsum("kd,sdb->skb", layer.codebook.astype(np.float64), xs)
    out = np.empty((layer.o, x.shape[1]), dtype=np.float64)
    idx = unpack(layer.bitstream, layer.count, k).reshape(layer.o, slots)
    cols = np.arange(slots)
    for r in range(layer.o):
        out[r] = lut[cols, idx[r]].sum(axis=0)
    return out


def qmatmul(layer: PackedLayer, x: np.ndarray, use_numba: bool = True) -> np.ndarray:
    """``decode(layer) @ x`` for an ``i x b`` input, without materialising the weights."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[0] != layer.i:
        raise ContractError(f"input shape {x.shape} incompatible with layer of {layer.i} columns")
    x64 = np.ascontiguousarray(x, dtype=np.float64)
    if use_numba and HAVE_NUMBA:
        stream = np.frombuffer(layer.bitstream + b"\0" * 8, dtype=np.uint8)
        out = np.empty((layer.o, x.shape[1]), dtype=np.float64)
        _kernel(stream, layer.codebook, x64, layer.o, layer.slots, layer.d, layer.bits, out)
    else:
        out = _lut_path(layer, x64)
    return out.astype(np.float32)


def qmatvec(layer: PackedLayer, x: np.ndarray, use_numba: bool = True) -> np.ndarray:
    """``decode(layer) @ x`` for a length-``i`` vector."""
    x = np.asarray(x)
    if x.ndim != 1 or x.shape[0] != layer.i:
        raise ContractError(f"input length {x.shape} does not match layer width {layer.i}")
    return qmatmul(layer, x[:, None], use_numba)[:, 0]


def bench(layer: PackedLayer, x: np.ndarray, repeats: int = 20) -> dict:
    """Wall-clock seconds per call: dense matvec on decoded weights vs decode-on-the-fly."""
    x = np.asarray(x, dtype=np.float32)
    qmatvec(layer, x)  # warm the JIT
    t0 = time.perf_counter()
    for _ in range(repeats):
        dense = decode(layer)
    t_decode = (time.perf_counter() - t0) / repeats
    t0 = time.perf_counter()
    for _ in range(repeats):
        dense @ x
    t_dense = (time.perf_counter() - t0) / repeats
    t0 = time.perf_counter()
    for _ in range(repeats):
        qmatvec(layer, x)
    t_fly = (time.perf_counter() - t0) / repeats
    return {
        "name": layer.name,
        "decode_s": t_decode,
        "dense_matvec_s": t_dense,
        "decode_plus_dense_s": t_decode + t_dense,
        "on_the_fly_s": t_fly,
    }
