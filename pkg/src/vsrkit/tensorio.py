"""On-disk tensor formats.

Raw tensor file (corpus frames, audio features):
    magic b"VSRT" | version u32 | ndim u32 | dims u32 x ndim |
    float64 little-endian payload, row-major.

Heatmap pair (attention-map export): a bare float64 row-major binary
file plus a plain-text header (``<stem>.txt``) carrying shape, dtype
and order, so external tools can read the payload without this
package.
"""

import struct

import numpy as np

MAGIC = b"VSRT"
VERSION = 1


def write_tensor(path, arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.astype("<f8").tobytes())


def read_tensor(path):
    with open(path, "rb") as f:
        if f.read(4) != MAGIC:
            raise ValueError(f"{path}: not a raw tensor file")
        version, ndim = struct.unpack("<II", f.read(8))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
        data = np.frombuffer(f.read(), dtype="<f8")
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: payload size does not match header")
    return data.reshape(shape).copy()


def write_heatmap(stem, arr):
    """Write ``<stem>.bin`` (payload) and ``<stem>.txt`` (header)."""
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    with open(f"{stem}.bin", "wb") as f:
        f.write(arr.astype("<f8").tobytes())
    with open(f"{stem}.txt", "w") as f:
        f.write(f"shape: {' '.join(str(d) for d in arr.shape)}\n")
        f.write("dtype: float64\n")
        f.write("order: row-major\n")


def read_heatmap(stem):
    shape = None
    with open(f"{stem}.txt") as f:
        for line in f:
            key, _, value = line.partition(":")
            if key.strip() == "shape":
                shape = tuple(int(v) for v in value.split())
            elif key.strip() == "dtype" and value.strip() != "float64":
                raise ValueError(f"{stem}: unsupported dtype {value.strip()}")
    if shape is None:
        raise ValueError(f"{stem}.txt: missing shape line")
    data = np.fromfile(f"{stem}.bin", dtype="<f8")
    return data.reshape(shape)
