"""Checkpoint files: a JSON manifest line followed by raw little-endian float64 arrays.

The manifest records the full run configuration, its topology hash, the
training iteration, and for every array its name, shape, byte offset and
SHA-256 digest. Writes go through a temporary file and an atomic rename.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .data import atomic_write_bytes
from .model import Detector
from .tensor import Tensor

MAGIC = "pancdet-checkpoint-v1"


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint."""


def checkpoint_bytes(model: Detector, iteration: int = 0) -> bytes:
    arrays, blobs, offset = [], [], 0
    for name, p in model.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        arrays.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": len(raw), "sha256": hashlib.sha256(raw).hexdigest()})
        blobs.append(raw)
        offset += len(raw)
    manifest = {
        "format": MAGIC,
        "iteration": int(iteration),
        "topology_hash": model.cfg.topology_hash(),
        "config": model.cfg.to_text(),
        "arrays": arrays,
        "payload_bytes": offset,
    }
    header = json.dumps(manifest, sort_keys=True).encode() + b"\n"
    return header + b"".join(blobs)


def save_checkpoint(model: Detector, path, iteration: int = 0) -> Path:
    path = Path(path)
    atomic_write_bytes(path, checkpoint_bytes(model, iteration))
    return path


def read_manifest(path) -> tuple[dict, bytes]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint: {exc}") from exc
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointError(f"{path}: corrupt checkpoint (no manifest line)")
    try:
        manifest = json.loads(raw[:nl])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint manifest: {exc}") from exc
    if manifest.get("format") != MAGIC:
        raise CheckpointError(f"{path}: not a {MAGIC} file")
    payload = raw[nl + 1 :]
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(f"{path}: corrupt checkpoint: payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']} (truncated?)")
    return manifest, payload


def load_checkpoint(path, config: RunConfig | None = None) -> tuple[Detector, dict]:
    """Rebuild the detector stored at ``path``; returns ``(model, manifest)``.

    When ``config`` is given its topology hash must match the file's.
    """
    manifest, payload = read_manifest(path)
    cfg = RunConfig.from_text(manifest["config"])
    if cfg.topology_hash() != manifest["topology_hash"]:
        raise CheckpointError(f"{path}: manifest config does not match its own topology hash")
    if config is not None and config.topology_hash() != manifest["topology_hash"]:
        raise CheckpointError(
            f"{path}: topology mismatch: checkpoint {manifest['topology_hash']} vs requested {config.topology_hash()}"
        )
    params = {}
    for entry in manifest["arrays"]:
        blob = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{path}: corrupt checkpoint: checksum mismatch for {entry['name']}")
        data = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(entry["shape"])
        params[entry["name"]] = Tensor(data, requires_grad=True, name=entry["name"])
    return Detector(cfg, params), manifest
