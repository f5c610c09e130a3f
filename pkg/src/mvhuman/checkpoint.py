"""Self-describing binary array container with a JSON sidecar manifest.

Layout: magic b"MVHD", uint32 version, uint32 array count, then per array
a uint16 name length, UTF-8 name, uint8 dtype code, uint8 rank, uint32
dims, and the row-major little-endian payload. The manifest (config hash,
normalization stats, schedule, training metadata) lives next to the binary
as <file>.manifest.json.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError

MAGIC = b"MVHD"
VERSION = 1

_DTYPE_CODES = {
    np.dtype("float32"): 1,
    np.dtype("float64"): 2,
    np.dtype("int32"): 3,
    np.dtype("int64"): 4,
    np.dtype("uint8"): 5,
    np.dtype("bool"): 6,
}
_CODE_DTYPES = {v: k for k, v in _DTYPE_CODES.items()}


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def write_checkpoint(path: str | Path, arrays: dict[str, np.ndarray],
                     manifest: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(arrays)))
        for name in sorted(arrays):
            arr = np.ascontiguousarray(arrays[name])
            if arr.dtype not in _DTYPE_CODES:
                raise CheckpointError(f"array {name}: unsupported dtype {arr.dtype}")
            name_b = name.encode("utf-8")
            f.write(struct.pack("<H", len(name_b)))
            f.write(name_b)
            f.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    os.replace(tmp, path)

    mtmp = manifest_path(path).with_suffix(".tmp")
    mtmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(mtmp, manifest_path(path))


def read_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        with open(path, "rb") as f:
            if f.read(4) != MAGIC:
                raise CheckpointError(f"{path}: bad magic, not an MVHD container")
            version, count = struct.unpack("<II", f.read(8))
            if version != VERSION:
                raise CheckpointError(f"{path}: unsupported version {version}")
            arrays = {}
            for _ in range(count):
                (name_len,) = struct.unpack("<H", f.read(2))
                name = f.read(name_len).decode("utf-8")
                code, ndim = struct.unpack("<BB", f.read(2))
                if code not in _CODE_DTYPES:
                    raise CheckpointError(f"{path}: unknown dtype code {code}")
                shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
                dtype = _CODE_DTYPES[code]
                n_bytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
                payload = f.read(n_bytes)
                if len(payload) != n_bytes:
                    raise CheckpointError(f"{path}: truncated payload for {name}")
                arrays[name] = np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
    except struct.error as exc:
        raise CheckpointError(f"{path}: truncated container") from exc

    mpath = manifest_path(path)
    if not mpath.exists():
        raise CheckpointError(f"{path}: missing manifest {mpath.name}")
    manifest = json.loads(mpath.read_text())
    return arrays, manifest


def state_dict_to_arrays(module: torch.nn.Module, prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v.detach().cpu().numpy()
            for k, v in module.state_dict().items()}


def load_state_dict_arrays(module: torch.nn.Module, arrays: dict[str, np.ndarray],
                           prefix: str) -> None:
    state = {}
    skip = len(prefix) + 1
    for name, arr in arrays.items():
        if name.startswith(prefix + "."):
            state[name[skip:]] = torch.from_numpy(arr.copy())
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise CheckpointError(f"checkpoint lacks arrays for {prefix}: {sorted(missing)[:3]}...")
    module.load_state_dict(state)
