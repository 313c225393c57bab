"""Checkpoint files: a JSON manifest plus one raw little-endian blob.

``save_checkpoint(model, "run/ckpt")`` writes ``run/ckpt.json`` and
``run/ckpt.bin``. The manifest records the model config, the blob's float
type, and for every parameter (in model traversal order) its name, shape, byte
offset and byte length. 32-bit models are stored as ``<f4``; 64-bit models as
``<f8`` so their round-trip is also exact.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from streamssm.backbone import Backbone, BackboneConfig

FORMAT = "streamssm-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint files are missing, corrupt, or inconsistent."""


def _paths(stem) -> tuple[Path, Path]:
    stem = Path(stem)
    if stem.suffix in (".json", ".bin"):
        stem = stem.with_suffix("")
    return stem.with_name(stem.name + ".json"), stem.with_name(stem.name + ".bin")


def save_checkpoint(model: Backbone, stem) -> Path:
    """Write manifest and blob; returns the manifest path."""
    manifest_path, blob_path = _paths(stem)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(model.config.np_dtype).newbyteorder("<")
    entries = []
    chunks = []
    offset = 0
    for name, p in model.named_parameters():
        raw = np.ascontiguousarray(p.data, dtype=dtype).tobytes()
        entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "dtype": dtype.str,
        "config": model.config.to_dict(),
        "blob": blob_path.name,
        "blob_nbytes": len(blob),
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "params": entries,
    }
    blob_path.write_bytes(blob)
    manifest_path.write_text(json.dumps(manifest, indent=2), encoding="utf-8")
    return manifest_path


def read_checkpoint(stem) -> tuple[BackboneConfig, dict[str, np.ndarray]]:
    """Parse and verify a checkpoint; returns its config and parameter arrays."""
    manifest_path, _ = _paths(stem)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise CheckpointError(f"missing manifest {manifest_path}") from exc
    if manifest.get("format") != FORMAT or manifest.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint {manifest.get('format')!r} v{manifest.get('version')}")
    blob_path = manifest_path.with_name(manifest["blob"])
    blob = blob_path.read_bytes()
    if len(blob) != manifest["blob_nbytes"] or hashlib.sha256(blob).hexdigest() != manifest["blob_sha256"]:
        raise CheckpointError(f"blob {blob_path} does not match its manifest")
    dtype = np.dtype(manifest["dtype"])
    state = {}
    for entry in manifest["params"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if count * dtype.itemsize != entry["nbytes"]:
            raise CheckpointError(f"{entry['name']}: byte length disagrees with shape")
        arr = np.frombuffer(blob, dtype=dtype, count=count, offset=entry["offset"])
        state[entry["name"]] = arr.reshape(entry["shape"]).astype(dtype.newbyteorder("="))
    return BackboneConfig.from_dict(manifest["config"]), state


def load_checkpoint(stem) -> Backbone:
    config, state = read_checkpoint(stem)
    model = Backbone(config, np.random.default_rng(0))
    model.load_state_dict(state)
    return model
