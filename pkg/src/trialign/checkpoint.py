"""Checkpoint container: a zip holding a JSON index plus one raw
little-endian payload per tensor.  Round-trips bit-exactly.
"""

from __future__ import annotations

import hashlib
import json
import os
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT_VERSION = 1

_DTYPES = {
    "float32": ("<f4", torch.float32),
    "float64": ("<f8", torch.float64),
    "int64": ("<i8", torch.int64),
    "uint8": ("|u1", torch.uint8),
    "bool": ("|b1", torch.bool),
}


def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _tensor_entry(t: torch.Tensor):
    name = str(t.dtype).removeprefix("torch.")
    if name not in _DTYPES:
        raise ValueError(f"unsupported checkpoint dtype {name}")
    np_dtype, _ = _DTYPES[name]
    arr = t.detach().cpu().numpy().astype(np_dtype, copy=False)
    return name, list(t.shape), np.ascontiguousarray(arr).tobytes()


def _flatten(prefix: str, obj, tensors: dict, meta):
    """Split a nested structure into JSON-able metadata + tensor payloads."""
    if isinstance(obj, torch.Tensor):
        key = prefix
        tensors[key] = obj
        return {"__tensor__": key}
    if isinstance(obj, dict):
        return {
            str(k): _flatten(f"{prefix}/{k}", v, tensors, meta)
            for k, v in obj.items()
        }
    if isinstance(obj, (list, tuple)):
        return [
            _flatten(f"{prefix}/{i}", v, tensors, meta) for i, v in enumerate(obj)
        ]
    return obj


def _unflatten(node, payloads):
    if isinstance(node, dict):
        if "__tensor__" in node and len(node) == 1:
            return payloads[node["__tensor__"]]
        return {k: _unflatten(v, payloads) for k, v in node.items()}
    if isinstance(node, list):
        return [_unflatten(v, payloads) for v in node]
    return node


def save_checkpoint(
    path: str | Path,
    model: torch.nn.Module,
    config: dict,
    step: int = 0,
    epoch: int = 0,
    rng_info: dict | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> None:
    """Atomic write (temp file + rename)."""
    path = Path(path)
    tensors: dict[str, torch.Tensor] = {}
    params_meta = []
    for name, p in model.state_dict().items():
        tensors[f"params/{name}"] = p
        dtype, shape, _ = str(p.dtype).removeprefix("torch."), list(p.shape), None
        params_meta.append({"name": name, "dtype": dtype, "shape": shape})
    opt_tree = None
    if optimizer is not None:
        opt_tree = _flatten("opt", optimizer.state_dict(), tensors, None)
    meta = {
        "format_version": FORMAT_VERSION,
        "config_digest": config_digest(config),
        "config": config,
        "step": step,
        "epoch": epoch,
        "rng": rng_info or {},
        "params": params_meta,
        "optimizer": opt_tree,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_STORED) as zf:
        zf.writestr("meta.json", json.dumps(meta, sort_keys=True))
        for key, t in tensors.items():
            dtype, shape, payload = _tensor_entry(t)
            zf.writestr(f"tensors/{key}.bin", payload)
            zf.writestr(
                f"tensors/{key}.json", json.dumps({"dtype": dtype, "shape": shape})
            )
    os.replace(tmp, path)


def _read_tensor(zf: zipfile.ZipFile, key: str) -> torch.Tensor:
    head = json.loads(zf.read(f"tensors/{key}.json"))
    np_dtype, torch_dtype = _DTYPES[head["dtype"]]
    raw = np.frombuffer(zf.read(f"tensors/{key}.bin"), dtype=np_dtype)
    arr = raw.reshape(head["shape"]).copy()
    return torch.from_numpy(arr).to(torch_dtype)


def load_checkpoint(
    path: str | Path,
    model: torch.nn.Module | None = None,
    optimizer: torch.optim.Optimizer | None = None,
) -> dict:
    """Returns the metadata dict; loads weights/optimizer state in place."""
    with zipfile.ZipFile(path) as zf:
        meta = json.loads(zf.read("meta.json"))
        if meta["format_version"] != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta['format_version']}")
        if model is not None:
            state = {
                p["name"]: _read_tensor(zf, f"params/{p['name']}")
                for p in meta["params"]
            }
            model.load_state_dict(state)
        if optimizer is not None and meta["optimizer"] is not None:
            payloads = {}
            for info in zf.infolist():
                if info.filename.startswith("tensors/opt") and info.filename.endswith(
                    ".bin"
                ):
                    key = info.filename[len("tensors/") : -len(".bin")]
                    payloads[key] = _read_tensor(zf, key)
            opt_state = _unflatten(meta["optimizer"], payloads)
            # json round-trip stringifies int keys of the state dict
            opt_state["state"] = {int(k): v for k, v in opt_state["state"].items()}
            optimizer.load_state_dict(opt_state)
    return meta
