"""Checkpoint files: named parameter tensors behind a versioned manifest.

Layout:
    magic b"VSCP" | version u32 | count u32
    per entry (names sorted): name_len u16 | name utf-8 | ndim u16 |
        dims u32 x ndim | offset u64 (payload position from file start)
    payloads: float64 little-endian, row-major, in manifest order

Sorted names and contiguous payloads make save -> load -> save
byte-identical.
"""

import struct

import numpy as np

from .errors import CheckpointError

MAGIC = b"VSCP"
VERSION = 1


def save_checkpoint(path, state):
    """state: dict name -> ndarray."""
    names = sorted(state)
    header = [MAGIC, struct.pack("<II", VERSION, len(names))]
    entries = []
    for name in names:
        arr = np.ascontiguousarray(state[name], dtype=np.float64)
        raw = name.encode("utf-8")
        entries.append((raw, arr))
        header.append(struct.pack("<H", len(raw)))
        header.append(raw)
        header.append(struct.pack("<H", arr.ndim))
        header.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        header.append(struct.pack("<Q", 0))  # offset backpatched below
    blob = bytearray(b"".join(header))
    # backpatch offsets now that the header size is known
    offset = len(blob)
    pos = 12
    payloads = []
    for raw, arr in entries:
        pos += 2 + len(raw) + 2 + 4 * arr.ndim
        blob[pos:pos + 8] = struct.pack("<Q", offset)
        pos += 8
        payload = arr.astype("<f8").tobytes()
        payloads.append(payload)
        offset += len(payload)
    with open(path, "wb") as f:
        f.write(bytes(blob))
        for payload in payloads:
            f.write(payload)


def load_checkpoint(path):
    """Returns dict name -> float64 ndarray."""
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    pos = 12
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode("utf-8")
        pos += nlen
        (ndim,) = struct.unpack_from("<H", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        (offset,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=size, offset=offset)
        state[name] = arr.reshape(shape).copy()
    return state


def load_into(module, state, prefix="", strict=True):
    """Copy checkpoint values into a module's parameters by name.

    strict: the state and the module's parameter set must match exactly.
    Non-strict: the state must be a subset of the module's parameters
    (untouched parameters keep their values).  Either way, every
    missing name, unexpected name and shape mismatch is collected and
    raised as one itemized CheckpointError, so a bad restore reports
    the full damage instead of the first casualty.
    """
    params = module.named_parameters(prefix)
    problems = []
    if strict:
        for name in sorted(set(params) - set(state)):
            problems.append(f"missing from checkpoint: {name}")
    for name in sorted(set(state) - set(params)):
        problems.append(f"not in model: {name}")
    for name in sorted(set(state) & set(params)):
        if state[name].shape != params[name].data.shape:
            problems.append(
                f"shape mismatch: {name} checkpoint {state[name].shape} "
                f"vs model {params[name].data.shape}")
    if problems:
        raise CheckpointError(
            "checkpoint load failed:\n  " + "\n  ".join(problems))
    for name in state:
        params[name].data[...] = state[name]
