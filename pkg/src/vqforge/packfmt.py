"""Bit-packed assignments, the VQM container and bit-rate accounting.

Assignments are packed at ``log2(k)`` bits per index, LSB-first within each
byte, row-major over the assignment grid, and zero-padded to a whole byte.

VQM layout (little-endian)::

    b"VQM1" | u32 layer_count
    per layer: u16 name_len | name | u32 o | u32 i | u16 d | u32 k
               | k*d float32 codebook | packed assignments | u32 crc32
    where the CRC covers that layer's bytes from name_len through the bitstream.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List

import numpy as np

from .errors import ContractError, CorruptionError, DataError, FormatError
from .kmeans import Assignments, Codebook, is_power_of_two
from .weightio import _Reader

VQM_MAGIC = b"VQM1"
HEADER_BYTES = 8
LAYER_FIXED_BYTES = 2 + 4 + 4 + 2 + 4 + 4  # name_len, o, i, d, k, crc


def index_bits(k: int) -> int:
    if not is_power_of_two(k):
        raise ContractError(f"k={k} is not a power of two")
    return k.bit_length() - 1


def packed_size(count: int, k: int) -> int:
    """Bytes needed for ``count`` indices at ``log2(k)`` bits each."""
    return (count * index_bits(k) + 7) // 8


def pack(indices, k: int) -> bytes:
    """Pack indices (any shape, row-major order) LSB-first at ``log2(k)`` bits each."""
    b = index_bits(k)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= k):
        raise ContractError(f"index out of range [0, {k})")
    if b == 0 or idx.size == 0:
        return b""
    bits = ((idx[:, None] >> np.arange(b)) & 1).astype(np.uint8)
    return np.packbits(bits.reshape(-1), bitorder="little").tobytes()


def unpack(buf, count: int, k: int) -> np.ndarray:
    """Inverse of :func:`pack`. Rejects short buffers and nonzero padding bits."""
    b = index_bits(k)
    need = packed_size(count, k)
    buf = bytes(buf)
    if len(buf) != need:
        raise FormatError(f"bitstream is {len(buf)} bytes, expected {need} for {count} x {b}-bit indices")
    if b == 0:
        return np.zeros(count, dtype=np.int64)
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8), bitorder="little")
    if bits[count * b:].any():
        raise FormatError("nonzero padding bits after the last index")
    bits = bits[: count * b].reshape(count, b).astype(np.int64)
    return bits @ (np.int64(1) << np.arange(b, dtype=np.int64))


@dataclass(frozen=True)
class BitRate:
    bits_per_weight: float
    assignment_bits: int
    codebook_bits: int

    @property
    def total_bits(self) -> int:
        return self.assignment_bits + self.codebook_bits


def bitrate(o: int, i: int, d: int, k: int) -> BitRate:
    """Storage cost of an ``o x i`` layer as a ``k x d`` codebook plus assignments."""
    b = index_bits(k)
    if d <= 0 or i % d:
        raise ContractError(f"d={d} does not divide i={i}")
    return BitRate(b / d, (o * i // d) * b, k * d * 32)


@dataclass(eq=False)
class PackedLayer:
    name: str
    o: int
    i: int
    d: int
    k: int
    codebook: np.ndarray  # (k, d) float32
    bitstream: bytes

    def __post_init__(self):
        index_bits(self.k)
        if self.d <= 0 or self.i % self.d:
            raise ContractError(f"layer {self.name!r}: d={self.d} does not divide i={self.i}")
        cb = np.ascontiguousarray(self.codebook, dtype=np.float32)
        if cb.shape != (self.k, self.d):
            raise ContractError(f"layer {self.name!r}: codebook shape {cb.shape} != ({self.k}, {self.d})")
        self.codebook = cb
        self.bitstream = bytes(self.bitstream)
        if len(self.bitstream) != packed_size(self.count, self.k):
            raise FormatError(f"layer {self.name!r}: bitstream length {len(self.bitstream)} "
                              f"!= {packed_size(self.count, self.k)}")

    @classmethod
    def from_parts(cls, name: str, codebook: Codebook, assignments: Assignments, i: int = None) -> "PackedLayer":
        o = assignments.rows
        i = i if i is not None else assignments.slots * codebook.d
        if assignments.k != codebook.k:
            raise ContractError(f"assignments were made for k={assignments.k}, codebook has k={codebook.k}")
        return cls(name, o, i, codebook.d, codebook.k, codebook.entries, pack(assignments.indices, codebook.k))

    @property
    def count(self) -> int:
        return self.o * self.i // self.d

    @property
    def slots(self) -> int:
        return self.i // self.d

    @property
    def bits(self) -> int:
        return index_bits(self.k)

    def assignments(self) -> Assignments:
        return Assignments(unpack(self.bitstream, self.count, self.k).reshape(self.o, self.slots), self.k)

    def rate(self) -> BitRate:
        return bitrate(self.o, self.i, self.d, self.k)

    def encoded_size(self) -> int:
        return LAYER_FIXED_BYTES + len(self.name.encode("utf-8")) + self.k * self.d * 4 + len(self.bitstream)

    def __eq__(self, other):
        if not isinstance(other, PackedLayer):
            return NotImplemented
        return (
            (self.name, self.o, self.i, self.d, self.k) == (other.name, other.o, other.i, other.d, other.k)
            and self.codebook.tobytes() == other.codebook.tobytes()
            and self.bitstream == other.bitstream
        )


@dataclass(eq=False)
class PackedModel:
    layers: List[PackedLayer] = field(default_factory=list)

    def __post_init__(self):
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise DataError(f"duplicate layer names: {names}")

    def __getitem__(self, name: str) -> PackedLayer:
        for l in self.layers:
            if l.name == name:
                return l
        raise KeyError(name)

    def __iter__(self):
        return iter(self.layers)

    def __len__(self):
        return len(self.layers)

    def __eq__(self, other):
        if not isinstance(other, PackedModel):
            return NotImplemented
        return self.layers == other.layers

    @classmethod
    def from_results(cls, codebooks: Dict[str, Codebook], assignments: Dict[str, Assignments]) -> "PackedModel":
        return cls([PackedLayer.from_parts(n, codebooks[n], assignments[n]) for n in codebooks])

    def encoded_size(self) -> int:
        return HEADER_BYTES + sum(l.encoded_size() for l in self.layers)


def _encode_layer(layer: PackedLayer) -> bytes:
    name = layer.name.encode("utf-8")
    if len(name) > 0xFFFF or layer.d > 0xFFFF:
        raise DataError(f"layer {layer.name!r}: name or d does not fit the header fields")
    body = b"".join([
        struct.pack("<H", len(name)),
        name,
        struct.pack("<IIHI", layer.o, layer.i, layer.d, layer.k),
        layer.codebook.astype("<f4", copy=False).tobytes(),
        layer.bitstream,
    ])
    return body + struct.pack("<I", zlib.crc32(body))


def model_to_bytes(model: PackedModel) -> bytes:
    parts = [VQM_MAGIC, struct.pack("<I", len(model.layers))]
    parts.extend(_encode_layer(l) for l in model.layers)
    return b"".join(parts)


def model_from_bytes(buf) -> PackedModel:
    buf = bytes(buf)
    if len(buf) < 4 or buf[:4] != VQM_MAGIC:
        raise FormatError(f"bad magic {buf[:4]!r}, expected {VQM_MAGIC!r}")
    rd = _Reader(buf)
    rd.take(4)
    (count,) = rd.unpack("<I")
    layers = []
    for _ in range(count):
        start = rd.pos
        (nlen,) = rd.unpack("<H")
        name_raw = rd.take(nlen)
        o, i, d, k = rd.unpack("<IIHI")
        if not is_power_of_two(k) or d == 0 or i % d or o == 0:
            raise FormatError(f"invalid layer header o={o} i={i} d={d} k={k}")
        cb_raw = rd.take(4 * k * d)
        stream = rd.take(packed_size(o * i // d, k))
        body = buf[start:rd.pos]
        (crc,) = rd.unpack("<I")
        if zlib.crc32(body) != crc:
            raise CorruptionError(f"checksum mismatch in layer starting at byte {start}")
        try:
            name = name_raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError(f"layer name is not valid utf-8: {exc}") from None
        codebook = np.frombuffer(cb_raw, dtype="<f4").reshape(k, d).astype(np.float32)
        if not np.all(np.isfinite(codebook)):
            raise DataError(f"layer {name!r}: codebook contains non-finite values")
        unpack(stream, o * i // d, k)  # strict padding check
        layers.append(PackedLayer(name, o, i, d, k, codebook, stream))
    if rd.pos != len(buf):
        raise FormatError(f"{len(buf) - rd.pos} trailing bytes after last layer")
    return PackedModel(layers)


def write_vqm(model: PackedModel, path) -> None:
    Path(path).write_bytes(model_to_bytes(model))


def read_vqm(path) -> PackedModel:
    return model_from_bytes(Path(path).read_bytes())


def describe(model: PackedModel) -> dict:
    """Per-layer bit rates and sizes for ``vqforge pack-info``."""
    rows = []
    tot_assign = tot_cb = tot_weights = 0
    for l in model.layers:
        r = l.rate()
        rows.append({
            "name": l.name,
            "shape": [l.o, l.i],
            "d": l.d,
            "k": l.k,
            "bits_per_weight": r.bits_per_weight,
            "assignment_bits": r.assignment_bits,
            "codebook_bits": r.codebook_bits,
            "encoded_bytes": l.encoded_size(),
        })
        tot_assign += r.assignment_bits
        tot_cb += r.codebook_bits
        tot_weights += l.o * l.i
    return {
        "layers": rows,
        "total_assignment_bits": tot_assign,
        "total_codebook_bits": tot_cb,
        "total_weights": tot_weights,
        "bits_per_weight": tot_assign / tot_weights if tot_weights else 0.0,
        "bits_per_weight_with_codebooks": (tot_assign + tot_cb) / tot_weights if tot_weights else 0.0,
        "fp32_bytes": tot_weights * 4,
        "encoded_bytes": model.encoded_size(),
    }
