"""Checkpoint and snapshot persistence.

One container format for both: an 8-byte magic, a little-endian uint32
manifest length, a UTF-8 JSON manifest, then raw tensor blobs. Blobs are
little-endian float32, row-major; the manifest records name, shape, offset
and a CRC32 per blob plus the resolved experiment config for provenance.
"""

from __future__ import annotations

import json
import zlib
from pathlib import Path

import numpy as np

from .models import Architecture, build_model
from .normcore import NormConfig, NormKind, NormMode

MAGIC = b"DNORMCK1"
VERSION = 1
BLOB_DTYPE = np.dtype("<f4")


def _manifest_tensors(named_arrays):
    tensors = []
    blobs = []
    offset = 0
    for name, arr in named_arrays:
        blob = np.ascontiguousarray(arr, dtype=BLOB_DTYPE).tobytes()
        tensors.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": "<f4",
            "offset": offset,
            "nbytes": len(blob),
            "crc32": zlib.crc32(blob),
        })
        blobs.append(blob)
        offset += len(blob)
    return tensors, blobs


def _write(path, manifest, blobs):
    payload = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(np.array(len(payload), dtype="<u4").tobytes())
        f.write(payload)
        for blob in blobs:
            f.write(blob)


def _read(path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a dualnorm container (bad magic)")
    mlen = int(np.frombuffer(data[8:12], dtype="<u4")[0])
    manifest = json.loads(data[12:12 + mlen].decode())
    if manifest.get("version") != VERSION:
        raise ValueError(
            f"{path}: container version {manifest.get('version')} != {VERSION}"
        )
    payload = data[12 + mlen:]
    arrays = {}
    for t in manifest["tensors"]:
        blob = payload[t["offset"]:t["offset"] + t["nbytes"]]
        if len(blob) != t["nbytes"]:
            raise ValueError(f"{path}: truncated blob {t['name']!r}")
        if zlib.crc32(blob) != t["crc32"]:
            raise ValueError(f"{path}: checksum failure in blob {t['name']!r}")
        arrays[t["name"]] = np.frombuffer(blob, dtype=BLOB_DTYPE).reshape(
            t["shape"]).copy()
    return manifest, arrays


def save_checkpoint(model, path, *, config=None, epoch=None, seed=None):
    """Serialize model weights, affine sets and running statistics."""
    tensors, blobs = _manifest_tensors(model.state_arrays())
    manifest = {
        "version": VERSION,
        "kind": "checkpoint",
        "config": config,
        "epoch": epoch,
        "seed": seed,
        "arch": {"name": model.arch.name, "width": model.arch.width,
                 "classes": model.arch.classes},
        "norm": {"kind": model.norm_config.kind.value,
                 "mode": model.norm_config.mode.value,
                 "eps": model.norm_config.eps,
                 "momentum": model.norm_config.momentum,
                 "group_count": model.norm_config.group_count},
        "heads": len(model.heads),
        "layer_names": [name for name, _ in model.named_norm_layers()],
        "tensors": tensors,
    }
    _write(path, manifest, blobs)
    return manifest


def load_checkpoint(path):
    """Rebuild the model from a container; returns (model, manifest)."""
    manifest, arrays = _read(path)
    if manifest["kind"] != "checkpoint":
        raise ValueError(f"{path}: container holds a {manifest['kind']!r}")
    arch = Architecture(**manifest["arch"])
    norm = NormConfig(kind=NormKind(manifest["norm"]["kind"]),
                      mode=NormMode(manifest["norm"]["mode"]),
                      eps=manifest["norm"]["eps"],
                      momentum=manifest["norm"]["momentum"],
                      group_count=manifest["norm"]["group_count"])
    model = build_model(arch, norm, heads=manifest["heads"], seed=0,
                        dtype=np.float32)
    expected = dict(model.state_arrays())
    if set(expected) != set(arrays):
        missing = set(expected) ^ set(arrays)
        raise ValueError(f"{path}: tensor set mismatch ({sorted(missing)[:4]}...)")
    for name, arr in arrays.items():
        dst = expected[name]
        if tuple(dst.shape) != tuple(arr.shape):
            raise ValueError(
                f"{path}: shape mismatch for {name}: {arr.shape} vs {dst.shape}"
            )
        dst[...] = arr
    return model, manifest


def save_snapshot(snapshot, path, *, config=None):
    """Serialize a statistics snapshot in the same container format."""
    named = []
    for name, st in zip(snapshot.layer_names, snapshot.per_layer):
        named.append((f"{name}.mean", st.mean))
        named.append((f"{name}.var", st.var))
    tensors, blobs = _manifest_tensors(named)
    manifest = {
        "version": VERSION,
        "kind": "snapshot",
        "config": config,
        "ap_source": snapshot.ap_source,
        "data_source": snapshot.data_source,
        "converged": snapshot.converged,
        "passes": snapshot.passes,
        "layer_names": snapshot.layer_names,
        "tensors": tensors,
    }
    _write(path, manifest, blobs)
    return manifest


def load_snapshot(path):
    from .normcore import NormStats
    from .probe import StatsSnapshot

    manifest, arrays = _read(path)
    if manifest["kind"] != "snapshot":
        raise ValueError(f"{path}: container holds a {manifest['kind']!r}")
    per_layer = [
        NormStats(arrays[f"{name}.mean"], arrays[f"{name}.var"])
        for name in manifest["layer_names"]
    ]
    return StatsSnapshot(manifest["ap_source"], manifest["data_source"],
                         per_layer, manifest["layer_names"],
                         converged=manifest["converged"],
                         passes=manifest["passes"])
