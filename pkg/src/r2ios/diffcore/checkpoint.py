"""Binary checkpoint format.

Little-endian layout: magic "R2IO", u32 version=1, u32 tensor count, then per
tensor: u32 name length, UTF-8 name, u32 rank, u64 per dimension, raw IEEE-754
float64 values.  Momentum buffers are stored under "<name>.m"; run metadata
(ablation flags, model dimensions) under "meta.*" as scalar tensors.
"""

from __future__ import annotations

import struct

import numpy as np

from .optim import ParamStore

MAGIC = b"R2IO"
VERSION = 1


def save_state(path, state: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(state)))
        for name in sorted(state):
            arr = np.ascontiguousarray(state[name], dtype=np.float64)
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<I", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(arr.tobytes())


def save_checkpoint(path, store: ParamStore,
                    meta: dict | None = None) -> None:
    """Parameters plus momentum buffers plus "meta.*" scalars or vectors."""
    state: dict[str, np.ndarray] = {}
    for name in store.names():
        state[name] = store[name].data
        state[name + ".m"] = store.momentum(name)
    for key, value in (meta or {}).items():
        arr = np.asarray(value, dtype=np.float64)
        state["meta." + key] = arr.reshape(-1) if arr.ndim == 0 else arr
    save_state(path, state)


def load_state(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    state: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", blob, off)
            off += 8 * rank
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(dims)
            off += 8 * n
            state[name] = arr.copy()
    except struct.error as exc:
        raise ValueError(f"{path}: truncated checkpoint") from exc
    if off != len(blob):
        raise ValueError(f"{path}: trailing bytes after last tensor")
    return state


def checkpoint_meta(state: dict[str, np.ndarray]) -> dict[str, float]:
    return {k[len("meta."):]: float(v.ravel()[0])
            for k, v in state.items() if k.startswith("meta.")}
