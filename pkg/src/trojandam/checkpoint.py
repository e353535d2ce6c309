"""Checkpoint files: ``TDAM1`` magic, a JSON manifest, then one float32 LE blob.

Layout::

    b"TDAM1\\n" | uint64 LE manifest length | manifest JSON (utf-8) | blob

Every manifest entry records ``name``, ``role``, ``shape`` and the byte
``offset`` of its data inside the blob.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from . import engine

MAGIC = b"TDAM1\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _arrays(model: engine.Model):
    for name, role, arr in model.params.items():
        yield name, role, arr
    for layer, mean, var in zip(model.bn.layers, model.bn.means, model.bn.variances):
        yield f"bn{layer}.running_mean", "bn-running-mean", mean
        yield f"bn{layer}.running_var", "bn-running-var", var
    yield "input.mean", "input-mean", model.input_mean
    yield "input.std", "input-std", model.input_std


def dumps(model: engine.Model) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, role, arr in _arrays(model):
        raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "role": role, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"version": VERSION, "network": model.spec.to_dict(), "entries": entries,
                           "blob_bytes": offset}, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(manifest)) + manifest + b"".join(chunks)


def save(path, model: engine.Model) -> None:
    Path(path).write_bytes(dumps(model))


def read_manifest(raw: bytes) -> tuple:
    if not raw.startswith(MAGIC):
        raise CheckpointError("not a TDAM1 checkpoint")
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointError("truncated header")
    (n,) = struct.unpack("<Q", raw[len(MAGIC):len(MAGIC) + 8])
    start = len(MAGIC) + 8
    manifest = json.loads(raw[start:start + n].decode())
    blob = raw[start + n:]
    if len(blob) != manifest["blob_bytes"]:
        raise CheckpointError(f"blob has {len(blob)} bytes, manifest says {manifest['blob_bytes']}")
    return manifest, blob


def loads(raw: bytes) -> engine.Model:
    manifest, blob = read_manifest(raw)
    spec = engine.NetworkSpec.from_dict(manifest["network"])
    arrays = {}
    for e in manifest["entries"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arrays[e["name"]] = np.frombuffer(blob, dtype="<f4", count=count, offset=e["offset"]).reshape(
            e["shape"]).astype(engine.DTYPE)
    layout = engine.layout_for(spec)
    params = engine.ParameterSet(layout)
    for entry in layout.entries:
        params[entry.name][...] = arrays[entry.name]
    layers = tuple(i for i, l in enumerate(spec.layers) if isinstance(l, engine.BatchNorm))
    bn = engine.BNSnapshot(layers, [arrays[f"bn{i}.running_mean"] for i in layers],
                           [arrays[f"bn{i}.running_var"] for i in layers])
    return engine.Model(spec, params, bn, arrays["input.mean"], arrays["input.std"])


def load(path) -> engine.Model:
    return loads(Path(path).read_bytes())


def inspect(path) -> dict:
    manifest, _ = read_manifest(Path(path).read_bytes())
    return manifest
