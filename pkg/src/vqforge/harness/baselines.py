"""Round-to-nearest uniform quantization baseline."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError
from ..weightio import WeightMatrix


def _round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def rtn_quantize(values, bits: int):
    """Symmetric per-tensor RTN. Returns ``(dequantized float32 values, scale)``.

    ``bits >= 2`` uses the integer grid ``[-(2^(b-1)-1), 2^(b-1)-1]`` with
    scale ``max|w| / (2^(b-1)-1)``; ``bits == 1`` is sign quantization with
    scale ``mean|w|``. Grid ties round away from zero.
    """
    if not 1 <= bits <= 8:
        raise ContractError(f"bits must lie in [1, 8], got {bits}")
    v = np.asarray(values, dtype=np.float64)
    if not np.any(v):
        return np.zeros(v.shape, np.float32), 0.0
    if bits == 1:
        scale = float(np.abs(v).mean())
        return (np.where(v >= 0, scale, -scale)).astype(np.float32), scale
    qmax = 2 ** (bits - 1) - 1
    scale = float(np.abs(v).max()) / qmax
    q = np.clip(_round_half_away(v / scale), -qmax, qmax)
    return (q * scale).astype(np.float32), scale


def baseline_rtn(w: WeightMatrix, bits: int) -> WeightMatrix:
    q, _ = rtn_quantize(w.values, bits)
    return WeightMatrix(w.name, q)
