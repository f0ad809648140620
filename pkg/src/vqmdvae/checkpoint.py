"""Checkpoint directories: ``manifest.json`` plus ``tensors/<name>.ten``."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .container import decode_tensor, write_json, write_tensor
from .errors import ContainerError, ManifestMismatchError, MissingTensorError

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict = field(default_factory=dict)

    @property
    def model_type(self) -> str:
        return self.manifest["model_type"]

    @property
    def config(self) -> dict:
        return self.manifest["config"]

    def state_dict(self) -> dict:
        return {k: torch.from_numpy(np.array(v)) for k, v in self.tensors.items()}


def make_checkpoint(model_type: str, config: dict, module: torch.nn.Module, step: int = 0,
                    metrics=None, extra=None) -> Checkpoint:
    tensors = {k: v.detach().cpu().to(torch.float32).numpy().copy()
               for k, v in module.state_dict().items()}
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_type": model_type,
        "config": config,
        "step": int(step),
        "metrics": metrics if metrics is not None else [],
        "extra": extra if extra is not None else {},
    }
    return Checkpoint(manifest, tensors)


def _tensor_file(name: str) -> str:
    return f"tensors/{name}.ten"


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    (path / "tensors").mkdir(parents=True, exist_ok=True)
    listing = {}
    for name in sorted(ckpt.tensors):
        arr = np.asarray(ckpt.tensors[name])
        write_tensor(path / _tensor_file(name), arr)
        listing[name] = {"file": _tensor_file(name), "shape": list(arr.shape), "dtype": "float32"}
    manifest = dict(ckpt.manifest)
    manifest["tensors"] = listing
    # manifest last: a directory with a manifest is always complete
    write_json(path / "manifest.json", manifest)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    mfile = path / "manifest.json"
    if not mfile.is_file():
        raise ContainerError(f"no checkpoint at {path}: manifest.json missing")
    try:
        manifest = json.loads(mfile.read_text())
    except json.JSONDecodeError as exc:
        raise ContainerError(f"manifest {mfile} is not valid JSON: {exc}") from exc
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ContainerError(f"unsupported checkpoint format version {manifest.get('format_version')!r}")
    listing = manifest.pop("tensors", {})
    tensors = {}
    for name, entry in listing.items():
        tfile = path / entry["file"]
        if not tfile.is_file():
            raise MissingTensorError(f"missing tensor {name!r} (expected {tfile})")
        arr = decode_tensor(tfile.read_bytes(), name=name)
        if list(arr.shape) != list(entry["shape"]):
            raise ManifestMismatchError(
                f"tensor {name!r} has shape {list(arr.shape)}, manifest says {entry['shape']}"
            )
        tensors[name] = arr
    on_disk = {p.name[:-4] for p in (path / "tensors").glob("*.ten")} if (path / "tensors").is_dir() else set()
    stray = on_disk - set(listing)
    if stray:
        raise ManifestMismatchError(f"tensors on disk but not in manifest: {sorted(stray)}")
    return Checkpoint(manifest, tensors)


def validate_manifest(path) -> dict:
    """Load a checkpoint fully and return its manifest (raises on any defect)."""
    return load_checkpoint(path).manifest


def parameter_hash(module: torch.nn.Module) -> str:
    import hashlib

    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
