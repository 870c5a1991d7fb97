"""Checkpoints: ``manifest.json`` catalog plus a little-endian fp32 ``weights.bin``."""

from __future__ import annotations

import json
import os

import numpy as np

from .model import BridgeModel, ModelConfig

FORMAT = "bridge-checkpoint/1"
MANIFEST, PAYLOAD = "manifest.json", "weights.bin"


class CheckpointError(ValueError):
    pass


def save_checkpoint(model: BridgeModel, directory: str, config_digest: str, task: str) -> str:
    """Write the checkpoint into ``directory``; returns the manifest path."""
    os.makedirs(directory, exist_ok=True)
    catalog, offset = [], 0
    with open(os.path.join(directory, PAYLOAD), "wb") as fh:
        for name, t in model.named_parameters().items():
            blob = t.data.astype("<f4").tobytes()
            catalog.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(blob)})
            fh.write(blob)
            offset += len(blob)
    manifest = {
        "format": FORMAT,
        "config_digest": config_digest,
        "task": task,
        "vocab_size": model.vocab_size,
        "head": model.head is not None,
        "model": model.cfg.to_dict(),
        "payload_bytes": offset,
        "tensors": catalog,
    }
    path = os.path.join(directory, MANIFEST)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def read_manifest(path: str) -> tuple[dict, str]:
    """Manifest dict and the checkpoint directory; ``path`` is the manifest or its directory."""
    directory = path if os.path.isdir(path) else os.path.dirname(os.path.abspath(path))
    try:
        with open(os.path.join(directory, MANIFEST), encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read manifest in {directory}: {exc}") from None
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    return manifest, directory


def load_checkpoint(path: str, model_cfg: ModelConfig | None = None) -> tuple[BridgeModel, dict]:
    """Rebuild the model stored at ``path``.

    If ``model_cfg`` is given, its hyperparameters must equal the stored ones.
    """
    manifest, directory = read_manifest(path)
    stored = manifest["model"]
    if model_cfg is not None:
        wanted = model_cfg.to_dict()
        for key in sorted(set(stored) | set(wanted)):
            if stored.get(key) != wanted.get(key):
                raise CheckpointError(
                    f"model.{key} mismatch: checkpoint has {stored.get(key)!r}, config has {wanted.get(key)!r}")
    else:
        from .config import parse_config  # deferred: config imports tasks which imports model
        model_cfg = parse_config({"task": manifest["task"], "seed": 0, "data": {"nodes": "", "edges": ""},
                                  "model": stored}).model
    model = BridgeModel(model_cfg, manifest["vocab_size"], seed=0, head=manifest["head"])

    with open(os.path.join(directory, PAYLOAD), "rb") as fh:
        payload = fh.read()
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(f"payload is {len(payload)} bytes, manifest says {manifest['payload_bytes']}")
    params = model.named_parameters()
    catalog = manifest["tensors"]
    if [e["name"] for e in catalog] != list(params):
        raise CheckpointError("tensor catalog does not match the model's parameters")
    expected = 0
    for entry in catalog:
        t = params[entry["name"]]
        if tuple(entry["shape"]) != t.shape:
            raise CheckpointError(f"{entry['name']}: stored shape {entry['shape']} != model shape {list(t.shape)}")
        if entry["offset"] != expected or entry["nbytes"] != 4 * t.size:
            raise CheckpointError(f"{entry['name']}: catalog offsets are not contiguous")
        expected += entry["nbytes"]
        raw = np.frombuffer(payload, dtype="<f4", count=t.size, offset=entry["offset"])
        t.data[...] = raw.reshape(t.shape).astype(np.float64)
    if expected != len(payload):
        raise CheckpointError("payload has trailing bytes not covered by the catalog")
    return model, manifest
