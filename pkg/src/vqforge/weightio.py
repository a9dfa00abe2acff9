"""Full-precision weight matrices, model bundles and the WTS container.

WTS layout (little-endian)::

    b"WTS1" | u32 layer_count
    per layer: u16 name_len | name (utf-8) | u32 o | u32 i | o*i float32
    u32 crc32 of every preceding byte
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List

import numpy as np

from .errors import CorruptionError, DataError, FormatError, PartitionError, TruncatedError

WTS_MAGIC = b"WTS1"


@dataclass(eq=False)
class WeightMatrix:
    """A dense ``o x i`` float32 weight matrix with a layer name."""

    name: str
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 2 or values.shape[0] == 0 or values.shape[1] == 0:
            raise DataError(f"layer {self.name!r}: expected a non-empty 2-d array, got shape {values.shape}")
        values = np.ascontiguousarray(values, dtype=np.float32)
        if not np.all(np.isfinite(values)):
            raise DataError(f"layer {self.name!r} contains non-finite values")
        self.values = values

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, WeightMatrix):
            return NotImplemented
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.values.tobytes() == other.values.tobytes()
        )


@dataclass(eq=False)
class ModelBundle:
    """Ordered collection of weight matrices plus free-form metadata."""

    layers: List[WeightMatrix] = field(default_factory=list)
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        names = [w.name for w in self.layers]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate layer names in bundle: {names}")

    def __iter__(self) -> Iterator[WeightMatrix]:
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, name: str) -> WeightMatrix:
        for w in self.layers:
            if w.name == name:
                return w
        raise KeyError(name)

    @property
    def names(self) -> List[str]:
        return [w.name for w in self.layers]

    def __eq__(self, other):
        if not isinstance(other, ModelBundle):
            return NotImplemented
        return self.layers == other.layers


@dataclass
class SubVectorTable:
    """Row-major view of a weight matrix as ``o * i/d`` sub-vectors of length ``d``.

    Sub-vector ``(r, s)`` lives at flat index ``r * slots + s`` and holds
    columns ``[s*d, (s+1)*d)`` of row ``r``. Sub-vectors never span rows.
    """

    name: str
    d: int
    rows: int
    cols: int
    vectors: np.ndarray  # (rows * slots, d), a view onto the source values

    @property
    def slots(self) -> int:
        return self.cols // self.d

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    def __getitem__(self, rs):
        r, s = rs
        return self.vectors[r * self.slots + s]

    def assemble(self) -> np.ndarray:
        """Reassemble the original ``o x i`` matrix."""
        return self.vectors.reshape(self.rows, self.cols)


def partition(w: WeightMatrix, d: int) -> SubVectorTable:
    """Split every row of ``w`` into consecutive length-``d`` sub-vectors."""
    if d <= 0 or w.cols % d != 0:
        raise PartitionError(f"layer {w.name!r}: d={d} does not divide row length {w.cols}")
    vectors = w.values.reshape(w.rows * (w.cols // d), d)
    return SubVectorTable(name=w.name, d=d, rows=w.rows, cols=w.cols, vectors=vectors)


def assemble(vectors: np.ndarray, rows: int, cols: int) -> np.ndarray:
    """Inverse of :func:`partition` for a raw ``(count, d)`` array."""
    return np.asarray(vectors).reshape(rows, cols)


# ---------------------------------------------------------------------------
# WTS container


def _encode_bundle(bundle: ModelBundle) -> bytes:
    parts = [WTS_MAGIC, struct.pack("<I", len(bundle.layers))]
    for w in bundle.layers:
        name = w.name.encode("utf-8")
        if len(name) > 0xFFFF:
            raise DataError(f"layer name too long: {len(name)} bytes")
        parts.append(struct.pack("<H", len(name)))
        parts.append(name)
        parts.append(struct.pack("<II", w.rows, w.cols))
        parts.append(w.values.astype("<f4", copy=False).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"unexpected end of data at byte {self.pos} (wanted {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _decode_bundle(buf: bytes) -> ModelBundle:
    if len(buf) < 4:
        raise TruncatedError("file too short for WTS header")
    if buf[:4] != WTS_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {WTS_MAGIC!r}")
    rd = _Reader(buf)
    rd.take(4)
    (count,) = rd.unpack("<I")
    raw = []
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        try:
            name = rd.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"layer name is not valid utf-8: {exc}") from None
        o, i = rd.unpack("<II")
        if o == 0 or i == 0:
            raise FormatError(f"layer {name!r} has empty shape {o}x{i}")
        values = np.frombuffer(rd.take(4 * o * i), dtype="<f4").reshape(o, i)
        raw.append((name, values))
    (crc,) = rd.unpack("<I")
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} trailing bytes after CRC")
    if zlib.crc32(buf[:-4]) != crc:
        raise CorruptionError("WTS checksum mismatch")
    layers = []
    for name, values in raw:
        if not np.all(np.isfinite(values)):
            raise DataError(f"layer {name!r} contains non-finite values")
        layers.append(WeightMatrix(name, values.astype(np.float32)))
    return ModelBundle(layers)


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write ``bundle`` to ``path`` in WTS format. Output is byte-deterministic."""
    Path(path).write_bytes(_encode_bundle(bundle))


def load_bundle(path) -> ModelBundle:
    """Read a WTS file written by :func:`save_bundle`."""
    return _decode_bundle(Path(path).read_bytes())


def bundle_to_bytes(bundle: ModelBundle) -> bytes:
    return _encode_bundle(bundle)


def bundle_from_bytes(buf: bytes) -> ModelBundle:
    return _decode_bundle(bytes(buf))


def layer_stats(w: WeightMatrix, outlier_sigma: float = 6.0) -> dict:
    """Summary statistics used by ``weights inspect``."""
    v = w.values.astype(np.float64)
    mean = float(v.mean())
    std = float(v.std())
    outliers = int(np.count_nonzero(np.abs(v - mean) > outlier_sigma * std)) if std > 0 else 0
    return {
        "name": w.name,
        "shape": [w.rows, w.cols],
        "min": float(v.min()),
        "max": float(v.max()),
        "mean": mean,
        "std": std,
        "outliers": outliers,
    }
