"""Checkpoint container: ``manifest.json`` plus a flat ``tensors.bin``.

The manifest records the architecture config, seed and step, and for every
named tensor its dtype, shape, byte offset, length and sha256.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path

import numpy as np
import torch

FORMAT = "popcft-checkpoint/1"


class CheckpointError(Exception):
    pass


def save_tensors(path: str | os.PathLike, tensors: dict[str, torch.Tensor], meta: dict) -> dict:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    staging = Path(tempfile.mkdtemp(prefix=f".{path.name}.", dir=path.parent))
    try:
        entries = []
        offset = 0
        with open(staging / "tensors.bin", "wb") as fh:
            for name in sorted(tensors):
                arr = tensors[name].detach().cpu().contiguous().numpy()
                data = arr.tobytes()
                fh.write(data)
                entries.append(
                    {
                        "name": name,
                        "dtype": str(arr.dtype),
                        "shape": list(arr.shape),
                        "offset": offset,
                        "nbytes": len(data),
                        "sha256": hashlib.sha256(data).hexdigest(),
                    }
                )
                offset += len(data)
        manifest = {"format": FORMAT, **meta, "tensors": entries}
        (staging / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
        if path.exists():
            shutil.rmtree(path)
        os.replace(staging, path)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    return manifest


def load_tensors(path: str | os.PathLike) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
        blob = (path / "tensors.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint at {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    tensors = {}
    for e in manifest["tensors"]:
        data = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(data) != e["nbytes"] or hashlib.sha256(data).hexdigest() != e["sha256"]:
            raise CheckpointError(f"checksum mismatch for tensor {e['name']}")
        arr = np.frombuffer(data, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    meta = {k: v for k, v in manifest.items() if k != "tensors"}
    return tensors, meta


def save_module(path, module: torch.nn.Module, kind: str, config: dict, seed: int = 0, step: int = 0, **extra) -> dict:
    meta = {"kind": kind, "config": config, "seed": seed, "step": step, **extra}
    return save_tensors(path, dict(module.state_dict()), meta)


def load_state(module: torch.nn.Module, tensors: dict[str, torch.Tensor]) -> None:
    own = module.state_dict()
    missing = set(own) - set(tensors)
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    for name, t in own.items():
        if tuple(tensors[name].shape) != tuple(t.shape):
            raise CheckpointError(f"shape mismatch for {name}: {tuple(tensors[name].shape)} vs {tuple(t.shape)}")
    module.load_state_dict({k: tensors[k] for k in own}, strict=True)
