"""Tensor records and checkpoints.

A tensor record is one JSON header line ``{"shape": [...], "name": "..."}``
followed by the little-endian float64 payload. A checkpoint is a run of
records, then an index block (one JSON line listing name/shape/offset of
every record plus free-form ``meta``), then a 16-byte trailer: the index
offset as little-endian uint64 and the magic ``b"GLMBIDX1"``.
"""
import io
import json
import struct

import numpy as np

MAGIC = b"GLMBIDX1"
_LE_F8 = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def write_tensor(fh, name, array):
    array = np.array(array, dtype=_LE_F8, order="C")
    header = json.dumps({"shape": list(array.shape), "name": name}, separators=(",", ":"))
    fh.write(header.encode("utf-8") + b"\n")
    fh.write(array.tobytes(order="C"))


def read_tensor(fh):
    """Read one record from a binary stream. Returns ``(name, array)``."""
    line = fh.readline()
    if not line.endswith(b"\n"):
        raise CheckpointError("truncated tensor header")
    header = json.loads(line)
    shape = tuple(int(s) for s in header["shape"])
    count = int(np.prod(shape, dtype=np.int64))
    payload = fh.read(count * 8)
    if len(payload) != count * 8:
        raise CheckpointError(f"tensor {header['name']!r}: expected {count * 8} bytes, got {len(payload)}")
    return header["name"], np.frombuffer(payload, dtype=_LE_F8).astype(np.float64).reshape(shape)


def dumps_tensor(name, array):
    buf = io.BytesIO()
    write_tensor(buf, name, array)
    return buf.getvalue()


def loads_tensor(data):
    return read_tensor(io.BytesIO(data))


def save_checkpoint(path, tensors, meta=None):
    """Write ``{name: array}`` (in insertion order) plus JSON-able ``meta``."""
    index = []
    with open(path, "wb") as fh:
        for name, arr in tensors.items():
            arr = np.asarray(arr)
            index.append({"name": name, "shape": list(arr.shape), "offset": fh.tell()})
            write_tensor(fh, name, arr)
        offset = fh.tell()
        block = json.dumps({"index": index, "meta": meta or {}}, sort_keys=True, separators=(",", ":"))
        fh.write(block.encode("utf-8") + b"\n")
        fh.write(struct.pack("<Q", offset) + MAGIC)


def load_checkpoint(path):
    """Returns ``(tensors, meta)``; tensors keep their saved order."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 16 or data[-8:] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (missing trailer)")
    (offset,) = struct.unpack("<Q", data[-16:-8])
    block = json.loads(data[offset:-16])
    stream = io.BytesIO(data)
    tensors = {}
    for entry in block["index"]:
        stream.seek(entry["offset"])
        name, arr = read_tensor(stream)
        if name != entry["name"] or list(arr.shape) != entry["shape"]:
            raise CheckpointError(f"{path}: index entry {entry['name']!r} disagrees with its record")
        tensors[name] = arr
    return tensors, block["meta"]
