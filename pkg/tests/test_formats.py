import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from sdanet import formats
from sdanet.benchmark.phantoms import SYNTHESIS, PhantomConfig, gen_phantom_dataset
from sdanet.formats import FormatError


@settings(max_examples=60, deadline=None)
@given(st.one_of(arrays(np.float32, array_shapes(min_dims=0, max_dims=4, max_side=5)),
                 arrays(np.uint8, array_shapes(min_dims=0, max_dims=4, max_side=5))))
def test_tensor_round_trip_bit_exact(arr):
    back, end = formats.decode_tensor(formats.encode_tensor(arr))
    assert back.dtype == arr.dtype and back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_scalar_tensor_layout():
    raw = formats.encode_tensor(np.float32(1.5))
    assert raw == b"SDAT" + bytes([1, 0, 0]) + struct.pack("<f", 1.5)
    assert len(raw) - 7 == 4


def test_header_layout_is_little_endian():
    raw = formats.encode_tensor(np.zeros((2, 300), np.uint8))
    assert raw[:7] == b"SDAT\x01\x01\x02"
    assert struct.unpack("<2I", raw[7:15]) == (2, 300)


def test_big_endian_input_stored_little_endian():
    arr = np.arange(4, dtype=">f4")
    back, _ = formats.decode_tensor(formats.encode_tensor(arr))
    np.testing.assert_array_equal(back, np.arange(4, dtype=np.float32))


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        formats.encode_tensor(np.zeros(3, np.float64))


def test_bad_tensor_headers():
    good = formats.encode_tensor(np.ones((2, 2), np.float32))
    with pytest.raises(FormatError, match="magic"):
        formats.decode_tensor(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="version"):
        formats.decode_tensor(good[:4] + b"\x02" + good[5:])
    with pytest.raises(FormatError, match="dtype"):
        formats.decode_tensor(good[:5] + b"\x07" + good[6:])
    with pytest.raises(FormatError, match="truncated"):
        formats.decode_tensor(good[:-1])


def test_tensor_file_trailing_bytes(tmp_path):
    p = tmp_path / "t.sdat"
    p.write_bytes(formats.encode_tensor(np.ones(3, np.float32)) + b"\0")
    with pytest.raises(FormatError, match="trailing"):
        formats.read_tensor(p)


def test_checkpoint_round_trip(tmp_path):
    entries = {"a.w": np.random.default_rng(0).standard_normal((3, 4)).astype(np.float32),
               "b": np.arange(5, dtype=np.uint8), "s": np.float32(2.0)}
    formats.write_checkpoint(tmp_path / "c.sdck", entries)
    back = formats.read_checkpoint(tmp_path / "c.sdck")
    assert list(back) == list(entries)
    for k in entries:
        assert back[k].tobytes() == np.asarray(entries[k]).tobytes()
    assert formats.encode_checkpoint(entries) == formats.encode_checkpoint(back)


@pytest.mark.parametrize("pos", [5, 20, -5])
def test_checkpoint_bit_flip_rejected(pos):
    raw = bytearray(formats.encode_checkpoint({"w": np.ones(4, np.float32)}))
    raw[pos] ^= 0x01
    with pytest.raises(FormatError, match="CRC"):
        formats.decode_checkpoint(bytes(raw))


def _with_crc(body):
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def test_checkpoint_structure_errors():
    t = formats.encode_tensor(np.ones(1, np.float32))
    entry = struct.pack("<H", 1) + b"w" + t
    dup = _with_crc(b"SDCK" + struct.pack("<BI", 1, 2) + entry + entry)
    with pytest.raises(FormatError, match="duplicate"):
        formats.decode_checkpoint(dup)
    extra = _with_crc(b"SDCK" + struct.pack("<BI", 1, 1) + entry + b"\0\0")
    with pytest.raises(FormatError, match="trailing"):
        formats.decode_checkpoint(extra)
    ver = _with_crc(b"SDCK" + struct.pack("<BI", 2, 1) + entry)
    with pytest.raises(FormatError, match="version"):
        formats.decode_checkpoint(ver)
    with pytest.raises(FormatError, match="magic"):
        formats.decode_checkpoint(_with_crc(b"NOPE" + struct.pack("<BI", 1, 1) + entry))


@pytest.mark.parametrize("task", ["segmentation", SYNTHESIS])
def test_dataset_round_trip(tmp_path, task):
    subs = gen_phantom_dataset(PhantomConfig(task=task, seed=1), 2, 3)
    formats.write_dataset(tmp_path, subs)
    back = formats.read_dataset(tmp_path)
    assert [s.subject_id for s in back] == [s.subject_id for s in subs]
    for a, b in zip(subs, back):
        assert a.slices.tobytes() == b.slices.tobytes()
        if task == SYNTHESIS:
            assert a.targets.tobytes() == b.targets.tobytes() and b.labels is None
        else:
            assert a.labels.tobytes() == b.labels.tobytes()
        assert b.provenance["phantom"]["seed"] == 1


def test_subject_directory_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        formats.read_subject(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(FormatError):
        formats.read_subject(tmp_path / "empty")
    d = tmp_path / "gap"
    d.mkdir()
    formats.write_tensor(d / "slice_000.sdat", np.zeros((8, 8), np.float32))
    formats.write_tensor(d / "slice_002.sdat", np.zeros((8, 8), np.float32))
    with pytest.raises(FormatError, match="slice_001"):
        formats.read_subject(d)


def test_provenance_values(tmp_path):
    fields = {"a": 1, "b": [1.5, 2], "c": "text", "d": {"x": None}}
    formats.write_provenance(tmp_path / "p.txt", fields)
    assert formats.read_provenance(tmp_path / "p.txt") == fields
