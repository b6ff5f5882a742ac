"""Checkpoint container.

Layout::

    b"FRCKPT01"                      magic
    uint32 little-endian             manifest length in bytes
    manifest                         UTF-8 JSON
    payload                          float32 little-endian tensors, row-major,
                                     concatenated in manifest order

The manifest records ``architecture_id``, ``layer_specs``, one
``{name, shape, dtype, offset}`` entry per tensor and the ``content_hash`` of
the parameters; loading recomputes the hash and refuses on mismatch.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .networks import ModelHandle, build_network, parameter_hash

MAGIC = b"FRCKPT01"


class CorruptionError(IOError):
    """Checkpoint bytes are truncated, malformed or fail the hash check."""


def write_container(path, manifest: dict, tensors: "OrderedDict[str, torch.Tensor]") -> None:
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = t.detach().cpu().to(torch.float32).contiguous().numpy().astype("<f4", copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32", "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = dict(manifest, tensors=entries, payload_bytes=offset)
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        for raw in chunks:
            fh.write(raw)


def read_container(path) -> tuple[dict, "OrderedDict[str, torch.Tensor]"]:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4 or data[: len(MAGIC)] != MAGIC:
        raise CorruptionError(f"{path}: not a checkpoint container")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    if len(data) < start + n:
        raise CorruptionError(f"{path}: truncated manifest")
    try:
        manifest = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptionError(f"{path}: unreadable manifest") from exc
    payload = data[start + n:]
    if len(payload) != manifest.get("payload_bytes"):
        raise CorruptionError(f"{path}: payload is {len(payload)} bytes, expected {manifest.get('payload_bytes')}")
    tensors: "OrderedDict[str, torch.Tensor]" = OrderedDict()
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=e["offset"])
        tensors[e["name"]] = torch.from_numpy(arr.reshape(e["shape"]).astype(np.float32))
    return manifest, tensors


def save_model(model: ModelHandle, path) -> str:
    """Write ``model`` to ``path``; returns the content hash stored."""
    model.refresh_hash()
    manifest = {
        "kind": "baseline",
        "architecture_id": model.architecture_id,
        "layer_specs": model.layer_specs,
        "input_shape": list(model.input_shape),
        "class_count": model.class_count,
        "content_hash": model.content_hash,
        "metadata": model.metadata,
    }
    write_container(path, manifest, OrderedDict(model.net.state_dict()))
    return model.content_hash


def load_model(path) -> ModelHandle:
    manifest, tensors = read_container(path)
    if manifest.get("kind") != "baseline":
        raise CorruptionError(f"{path}: not a baseline checkpoint")
    net = build_network(manifest["layer_specs"], tuple(manifest["input_shape"]), manifest["class_count"])
    try:
        net.load_state_dict(tensors)
    except RuntimeError as exc:
        raise CorruptionError(f"{path}: tensors do not match the architecture") from exc
    net.eval()
    digest = parameter_hash(net)
    if digest != manifest["content_hash"]:
        raise CorruptionError(f"{path}: content hash mismatch")
    return ModelHandle(manifest["architecture_id"], manifest["layer_specs"], net,
                       tuple(manifest["input_shape"]), manifest["class_count"], digest,
                       manifest.get("metadata", {}))
