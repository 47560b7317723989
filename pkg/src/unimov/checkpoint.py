"""Named-array checkpoint container.

Layout (all integers little-endian)::

    magic   8 bytes  b"UNIMOVCK"
    version u32      1
    count   u32      number of entries
    entry*:
        name_len u32, name (utf-8)
        ndim     u32, dims u32 * ndim
        data     float32 * prod(dims), little-endian, C order
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ParameterError

MAGIC = b"UNIMOVCK"
VERSION = 1


def save_arrays(arrays: dict, path) -> None:
    out = [MAGIC, struct.pack("<II", VERSION, len(arrays))]
    for name, arr in arrays.items():
        a = np.array(arr, dtype="<f4", order="C")
        raw = name.encode()
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack(f"<I{a.ndim}I", a.ndim, *a.shape))
        out.append(a.tobytes())
    Path(path).write_bytes(b"".join(out))


def load_arrays(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise ParameterError(f"{path}: not a checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise ParameterError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    arrays = {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            name = buf[pos + 4 : pos + 4 + n].decode()
            pos += 4 + n
            (ndim,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{ndim}I", buf, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(dims, dtype=np.int64))
            if pos + 4 * size > len(buf):
                raise ParameterError(f"{path}: truncated data for {name!r}")
            arrays[name] = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).reshape(dims).copy()
            pos += 4 * size
    except struct.error as exc:
        raise ParameterError(f"{path}: truncated checkpoint") from exc
    return arrays


def save_module(module: torch.nn.Module, path) -> None:
    save_arrays({k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}, path)


def load_module(module: torch.nn.Module, path) -> torch.nn.Module:
    """Load a checkpoint into ``module``; names and shapes must match exactly."""
    arrays = load_arrays(path)
    state = module.state_dict()
    missing = sorted(set(state) - set(arrays))
    extra = sorted(set(arrays) - set(state))
    if missing or extra:
        raise ParameterError(f"checkpoint mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    new = {}
    for k, v in state.items():
        if tuple(arrays[k].shape) != tuple(v.shape):
            raise ParameterError(f"{k}: shape {arrays[k].shape} != {tuple(v.shape)}")
        new[k] = torch.as_tensor(arrays[k], dtype=v.dtype)
    module.load_state_dict(new)
    return module
