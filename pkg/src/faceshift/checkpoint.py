"""Checkpoint directories: a JSON manifest plus raw little-endian float blobs.

Layout:
    <dir>/manifest.json   {"arrays": {name: {"file", "shape", "dtype"}}, "meta": {...}}
    <dir>/a00000.bin ...  one raw blob per named array

All arrays are stored little-endian. Loaders verify shapes; consumers that
compose checkpoints verify the recorded config hash before use.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointMismatch(RuntimeError):
    """Raised when a checkpoint's recorded config hash does not match."""


def save_arrays(out_dir: Path, arrays: dict, meta: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    index = {}
    for i, (name, arr) in enumerate(sorted(arrays.items())):
        arr = np.asarray(arr)
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            arr = arr.astype(np.float32)
            dtype = "float32"
        fname = f"a{i:05d}.bin"
        arr.astype(_DTYPES[dtype]).tofile(out_dir / fname)
        index[name] = {"file": fname, "shape": list(arr.shape), "dtype": dtype}
    with open(out_dir / "manifest.json", "w") as f:
        json.dump({"arrays": index, "meta": meta or {}}, f, indent=1, sort_keys=True)


def load_arrays(in_dir: Path) -> tuple[dict, dict]:
    in_dir = Path(in_dir)
    with open(in_dir / "manifest.json") as f:
        manifest = json.load(f)
    arrays = {}
    for name, info in manifest["arrays"].items():
        raw = np.fromfile(in_dir / info["file"], dtype=_DTYPES[info["dtype"]])
        arrays[name] = raw.reshape(info["shape"]).astype(info["dtype"])
    return arrays, manifest.get("meta", {})


def save_module(out_dir: Path, module: torch.nn.Module, meta: dict | None = None) -> None:
    arrays = {k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}
    save_arrays(out_dir, arrays, meta)


def load_module(in_dir: Path, module: torch.nn.Module, expect_hash: str | None = None) -> dict:
    arrays, meta = load_arrays(in_dir)
    if expect_hash is not None and meta.get("config_hash") != expect_hash:
        raise CheckpointMismatch(
            f"{in_dir}: config hash {meta.get('config_hash')!r} != expected {expect_hash!r}")
    state = {k: torch.from_numpy(np.ascontiguousarray(v)) for k, v in arrays.items()}
    module.load_state_dict(state)
    return meta
