"""Binary tensor and checkpoint files, plus the on-disk dataset layout.

TensorFile ("SDAT")::

    magic b"SDAT" | version u8 (=1) | dtype u8 (0 f32, 1 u8) | ndim u8
    | dims u32 LE * ndim | payload, little-endian, row-major

Checkpoint ("SDCK")::

    magic b"SDCK" | version u8 (=1) | count u32 LE
    | count * (name_len u16 LE | UTF-8 name | TensorFile record)
    | CRC32 u32 LE of every preceding byte

Everything is explicitly little-endian so files move between platforms
unchanged.
"""
from __future__ import annotations

import json
import os
import struct
import zlib
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"SDAT"
CHECKPOINT_MAGIC = b"SDCK"
VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CODES = {np.dtype("float32"): 0, np.dtype("uint8"): 1}


class FormatError(ValueError):
    """A file does not follow the expected binary or directory layout."""


# ------------------------------------------------------------------ tensors

def encode_tensor(arr):
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.newbyteorder("=") if arr.dtype.byteorder == ">" else arr.dtype)
    if code is None:
        raise TypeError(f"TensorFile stores float32 or uint8, not {arr.dtype}")
    if arr.ndim > 255:
        raise ValueError("too many dimensions")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise ValueError("dimension exceeds u32")
    head = TENSOR_MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    return head + payload


def decode_tensor(buf, offset=0):
    """Parse one TensorFile record at ``offset``; return (array, end offset)."""
    buf = memoryview(buf)
    if len(buf) - offset < 7:
        raise FormatError("truncated tensor header")
    if bytes(buf[offset:offset + 4]) != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {bytes(buf[offset:offset + 4])!r}")
    version, code, ndim = struct.unpack_from("<BBB", buf, offset + 4)
    if version != VERSION:
        raise FormatError(f"unsupported tensor format version {version}")
    if code not in _DTYPES:
        raise FormatError(f"unknown tensor dtype code {code}")
    pos = offset + 7
    if len(buf) - pos < 4 * ndim:
        raise FormatError("truncated tensor dims")
    dims = struct.unpack_from(f"<{ndim}I", buf, pos)
    pos += 4 * ndim
    dtype = _DTYPES[code]
    nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - pos < nbytes:
        raise FormatError(f"truncated tensor payload: need {nbytes} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True), pos + nbytes


def write_tensor(path, arr):
    Path(path).write_bytes(encode_tensor(arr))


def read_tensor(path):
    data = Path(path).read_bytes()
    arr, end = decode_tensor(data)
    if end != len(data):
        raise FormatError(f"{path}: {len(data) - end} trailing bytes after tensor")
    return arr


# ------------------------------------------------------------------ checkpoints

def encode_checkpoint(entries):
    out = bytearray(CHECKPOINT_MAGIC + struct.pack("<BI", VERSION, len(entries)))
    for name, arr in entries.items():
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"entry name too long: {name[:40]}...")
        out += struct.pack("<H", len(raw)) + raw + encode_tensor(arr)
    out += struct.pack("<I", zlib.crc32(out) & 0xFFFFFFFF)
    return bytes(out)


def decode_checkpoint(data):
    data = bytes(data)
    if len(data) < 13:
        raise FormatError("truncated checkpoint")
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"bad checkpoint magic {data[:4]!r}")
    (crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != crc:
        raise FormatError("checkpoint CRC mismatch")
    version, count = struct.unpack_from("<BI", data, 4)
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    body = data[:-4]
    pos = 9
    entries = {}
    for _ in range(count):
        if len(body) - pos < 2:
            raise FormatError("truncated checkpoint entry")
        (n,) = struct.unpack_from("<H", body, pos)
        pos += 2
        try:
            name = body[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError as exc:
            raise FormatError("entry name is not UTF-8") from exc
        pos += n
        if name in entries:
            raise FormatError(f"duplicate checkpoint entry {name!r}")
        entries[name], pos = decode_tensor(body, pos)
    if pos != len(body):
        raise FormatError("trailing bytes after the last checkpoint entry")
    return entries


def write_checkpoint(path, entries):
    Path(path).write_bytes(encode_checkpoint(entries))


def read_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())


# ------------------------------------------------------------------ datasets

def _fmt_value(v):
    return json.dumps(v, sort_keys=True)


def write_provenance(path, fields):
    lines = [f"{k}={_fmt_value(v)}" for k, v in fields.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_provenance(path):
    fields = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}:{n}: expected key=value")
        try:
            fields[key.strip()] = json.loads(value)
        except json.JSONDecodeError:
            fields[key.strip()] = value.strip()
    return fields


def write_subject(root, subject):
    """Write one SubjectRecord to ``root/<subject_id>/``."""
    d = Path(root) / subject.subject_id
    d.mkdir(parents=True, exist_ok=True)
    for i in range(len(subject)):
        write_tensor(d / f"slice_{i:03d}.sdat", subject.slices[i, 0])
        if subject.labels is not None:
            write_tensor(d / f"label_{i:03d}.sdat", subject.labels[i].astype(np.uint8))
        if subject.targets is not None:
            write_tensor(d / f"target_{i:03d}.sdat", subject.targets[i, 0])
    write_provenance(d / "provenance.txt",
                     {"subject": subject.subject_id, "domain": subject.domain, **subject.provenance})
    return d


def _numbered(d, prefix):
    files = sorted(p for p in d.iterdir() if p.name.startswith(prefix) and p.suffix == ".sdat")
    for i, p in enumerate(files):
        if p.name != f"{prefix}{i:03d}.sdat":
            raise FormatError(f"{d}: expected {prefix}{i:03d}.sdat, found {p.name}")
    return files


def read_subject(directory):
    # local import keeps the format layer free of the benchmark package at import time
    from .benchmark.phantoms import SubjectRecord

    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"subject directory {d} does not exist")
    slice_files = _numbered(d, "slice_")
    if not slice_files:
        raise FormatError(f"{d}: no slice_###.sdat files")
    slices = np.stack([read_tensor(p) for p in slice_files])[:, None].astype(np.float32)
    label_files = _numbered(d, "label_")
    target_files = _numbered(d, "target_")
    labels = targets = None
    if label_files:
        if len(label_files) != len(slice_files):
            raise FormatError(f"{d}: {len(slice_files)} slices but {len(label_files)} label maps")
        labels = np.stack([read_tensor(p) for p in label_files]).astype(np.uint8)
    if target_files:
        if len(target_files) != len(slice_files):
            raise FormatError(f"{d}: {len(slice_files)} slices but {len(target_files)} targets")
        targets = np.stack([read_tensor(p) for p in target_files])[:, None].astype(np.float32)
    prov = read_provenance(d / "provenance.txt") if (d / "provenance.txt").exists() else {}
    domain = prov.pop("domain", "source")
    prov.pop("subject", None)
    return SubjectRecord(d.name, slices, labels=labels, targets=targets, domain=domain, provenance=prov)


def write_dataset(root, subjects):
    Path(root).mkdir(parents=True, exist_ok=True)
    for s in subjects:
        write_subject(root, s)


def read_dataset(root):
    """All subject directories under ``root``, in name order."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise FormatError(f"{root}: no subject directories")
    return [read_subject(p) for p in dirs]


def write_prediction(directory, prediction, subject_id=None):
    """Probabilities (or the synthesized image) as ``prob_###``, plus
    ``label_###`` maps for segmentation or ``target_###`` for synthesis, so a
    prediction directory reads like ground truth."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i in range(prediction.outputs.shape[0]):
        write_tensor(d / f"prob_{i:03d}.sdat", prediction.outputs[i].astype(np.float32))
        if prediction.labels is not None:
            write_tensor(d / f"label_{i:03d}.sdat", prediction.labels[i])
        else:
            write_tensor(d / f"target_{i:03d}.sdat", prediction.outputs[i, 0].astype(np.float32))
    if subject_id is not None:
        write_provenance(d / "provenance.txt", {"subject": subject_id, "domain": "prediction"})
    return d


def read_maps(directory):
    """Label maps (uint8) if present, otherwise target images; (kind, stack)."""
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"directory {d} does not exist")
    labels = _numbered(d, "label_")
    if labels:
        return "labels", np.stack([read_tensor(p) for p in labels])
    targets = _numbered(d, "target_")
    if targets:
        return "targets", np.stack([read_tensor(p) for p in targets])
    raise FormatError(f"{d}: neither label_###.sdat nor target_###.sdat files")


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return Path(path)
