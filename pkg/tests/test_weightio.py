import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vqforge.errors import CorruptionError, DataError, FormatError, PartitionError, TruncatedError
from vqforge.weightio import (
    ModelBundle,
    WeightMatrix,
    assemble,
    bundle_from_bytes,
    bundle_to_bytes,
    layer_stats,
    load_bundle,
    partition,
    save_bundle,
)


def _reference_encode(layers):
    # byte layout written out by hand, independent of the library encoder
    out = b"WTS1" + struct.pack("<I", len(layers))
    for name, arr in layers:
        nb = name.encode()
        out += struct.pack("<H", len(nb)) + nb + struct.pack("<II", *arr.shape)
        out += b"".join(struct.pack("<f", float(v)) for v in arr.ravel())
    return out + struct.pack("<I", zlib.crc32(out))


def test_round_trip(tmp_path, small_bundle):
    path = tmp_path / "m.wts"
    save_bundle(small_bundle, path)
    assert load_bundle(path) == small_bundle


def test_writer_is_deterministic(tmp_path, small_bundle):
    save_bundle(small_bundle, tmp_path / "x.wts")
    save_bundle(small_bundle, tmp_path / "y.wts")
    assert (tmp_path / "x.wts").read_bytes() == (tmp_path / "y.wts").read_bytes()


def test_matches_hand_layout(small_bundle):
    ref = _reference_encode([(w.name, w.values) for w in small_bundle])
    assert bundle_to_bytes(small_bundle) == ref


def test_empty_bundle():
    buf = bundle_to_bytes(ModelBundle([]))
    assert buf[:8] == b"WTS1\x00\x00\x00\x00"
    assert len(bundle_from_bytes(buf)) == 0


def test_bad_magic(small_bundle):
    buf = bytearray(bundle_to_bytes(small_bundle))
    buf[:4] = b"WTS2"
    with pytest.raises(FormatError):
        bundle_from_bytes(bytes(buf))


def test_truncation_detected(small_bundle):
    buf = bundle_to_bytes(small_bundle)
    for cut in (0, 3, 7, 20, len(buf) - 5):
        with pytest.raises(TruncatedError):
            bundle_from_bytes(buf[:cut])


def test_trailing_bytes_rejected(small_bundle):
    with pytest.raises(FormatError):
        bundle_from_bytes(bundle_to_bytes(small_bundle) + b"\0")


def test_payload_flip_is_corruption(small_bundle):
    buf = bytearray(bundle_to_bytes(small_bundle))
    buf[-10] ^= 0x01
    with pytest.raises(CorruptionError):
        bundle_from_bytes(bytes(buf))


def test_non_finite_rejected():
    with pytest.raises(DataError):
        WeightMatrix("x", np.array([[1.0, np.nan]]))
    with pytest.raises(DataError):
        WeightMatrix("x", np.zeros((0, 3)))


def test_duplicate_names_rejected():
    w = WeightMatrix("x", np.ones((1, 1)))
    with pytest.raises(DataError):
        ModelBundle([w, WeightMatrix("x", np.zeros((1, 1)))])


def test_partition_example():
    t = partition(WeightMatrix("w", [[1, 2, 3, 4], [5, 6, 7, 8]]), 2)
    assert t.count == 4
    assert t[0, 0].tolist() == [1, 2]
    assert t[0, 1].tolist() == [3, 4]
    assert t[1, 0].tolist() == [5, 6]
    assert t[1, 1].tolist() == [7, 8]


def test_partition_full_row(rng):
    w = WeightMatrix("w", rng.standard_normal((3, 5)))
    t = partition(w, 5)
    np.testing.assert_array_equal(t.vectors, w.values)


def test_partition_requires_divisor():
    with pytest.raises(PartitionError):
        partition(WeightMatrix("w", np.ones((2, 4))), 3)


def test_layer_stats_counts_outliers():
    v = np.zeros((10, 100), np.float32)
    v[0, 0] = 100.0
    s = layer_stats(WeightMatrix("w", v), 6.0)
    assert s["outliers"] == 1
    assert tuple(s["shape"]) == (10, 100)


shapes = st.tuples(st.integers(1, 6), st.integers(1, 4))


@st.composite
def bundles(draw):
    n = draw(st.integers(0, 3))
    names = draw(st.lists(st.text(min_size=0, max_size=8), min_size=n, max_size=n, unique=True))
    layers = []
    for name in names:
        o, i = draw(shapes)
        vals = draw(st.lists(st.floats(width=32, allow_nan=False, allow_infinity=False), min_size=o * i, max_size=o * i))
        layers.append(WeightMatrix(name, np.array(vals, np.float32).reshape(o, i)))
    return ModelBundle(layers)


@given(bundles())
@settings(max_examples=100, deadline=None)
def test_round_trip_property(b):
    assert bundle_from_bytes(bundle_to_bytes(b)) == b


@given(st.integers(1, 6), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
@settings(max_examples=100, deadline=None)
def test_partition_reassembles_bit_exact(o, slots, d, seed):
    vals = np.random.default_rng(seed).standard_normal((o, slots * d)).astype(np.float32)
    t = partition(WeightMatrix("w", vals), d)
    assert t.assemble().tobytes() == vals.tobytes()
    assert assemble(t.vectors, o, slots * d).tobytes() == vals.tobytes()
