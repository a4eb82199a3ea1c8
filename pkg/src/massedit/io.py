"""Deterministic self-describing array container.

Layout: 8-byte magic ``MASSEDIT``, little-endian uint32 format version,
uint64 header length, a UTF-8 JSON header, then raw C-order array bytes
back to back. The header lists each array's name, dtype, shape and byte
offset together with caller metadata, so files are readable without this
package and identical inputs give identical bytes.
"""
import json

import numpy as np

MAGIC = b"MASSEDIT"
FORMAT_VERSION = 1


def save_arrays(path, meta, arrays):
    index = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], order="C")  # keeps 0-d shapes, unlike ascontiguousarray
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        blob = arr.tobytes(order="C")
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape), "offset": offset})
        offset += len(blob)
        blobs.append(blob)
    header = json.dumps({"meta": meta, "arrays": index}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.uint32(FORMAT_VERSION).tobytes())
        f.write(np.uint64(len(header)).tobytes())
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_arrays(path):
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a massedit checkpoint")
    version = int(np.frombuffer(raw[8:12], dtype="<u4")[0])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    hlen = int(np.frombuffer(raw[12:20], dtype="<u8")[0])
    header = json.loads(raw[20:20 + hlen].decode("utf-8"))
    base = 20 + hlen
    arrays = {}
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = base + entry["offset"]
        arr = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return header["meta"], arrays
