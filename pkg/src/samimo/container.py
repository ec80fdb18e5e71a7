"""Array container: a JSON manifest plus raw little-endian payloads.

Layout of a packed blob::

    b"SAMIMOAC" | u32 version | u64 manifest length | manifest (UTF-8 JSON) | payload

Each manifest entry records ``name``, ``shape``, ``dtype`` (one of the tags
in :data:`DTYPE_TAGS`), ``offset`` and ``nbytes`` into the payload.  Complex
arrays are stored as interleaved (real, imag) pairs of the matching float
width, which is exactly numpy's little-endian complex layout.  Free-form
metadata (seeds, configs) lives under ``meta``.

This module only converts between arrays and ``bytes``; reading and writing
files is the harness's job.
"""

from __future__ import annotations

import json
import struct
from collections.abc import Mapping

import numpy as np

MAGIC = b"SAMIMOAC"
VERSION = 1
DTYPE_TAGS = {
    "f4": np.dtype("<f4"),
    "f8": np.dtype("<f8"),
    "c8": np.dtype("<c8"),
    "c16": np.dtype("<c16"),
    "i1": np.dtype("<i1"),
    "i8": np.dtype("<i8"),
}
_TAG_OF = {np.dtype(v).newbyteorder("="): k for k, v in DTYPE_TAGS.items()}
_HEAD = struct.Struct("<8sIQ")


class ContainerError(ValueError):
    """Malformed or unsupported container content."""


def dtype_tag(dt) -> str:
    dt = np.dtype(dt).newbyteorder("=")
    if dt == np.dtype(bool):
        return "i1"
    try:
        return _TAG_OF[dt]
    except KeyError:
        raise ContainerError(f"unsupported dtype {dt}; allowed: {sorted(DTYPE_TAGS)}") from None


def pack(arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    """Serialise named arrays (and JSON-able ``meta``) to one blob."""
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.asarray(arr)
        tag = dtype_tag(a.dtype)
        raw = np.ascontiguousarray(a, dtype=DTYPE_TAGS[tag]).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": tag, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = {"endianness": "little", "arrays": entries, "meta": dict(meta or {})}
    text = json.dumps(manifest, indent=1, sort_keys=True).encode()
    return _HEAD.pack(MAGIC, VERSION, len(text)) + text + b"".join(chunks)


def read_manifest(blob: bytes) -> dict:
    if len(blob) < _HEAD.size:
        raise ContainerError("blob too short for a container header")
    magic, version, n = _HEAD.unpack_from(blob)
    if magic != MAGIC:
        raise ContainerError("not an array container (bad magic)")
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")
    try:
        return json.loads(blob[_HEAD.size : _HEAD.size + n])
    except json.JSONDecodeError as exc:
        raise ContainerError(f"manifest is not valid JSON: {exc}") from None


def unpack(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    """Inverse of :func:`pack`; returns (arrays, meta)."""
    manifest = read_manifest(blob)
    _, _, n = _HEAD.unpack_from(blob)
    base = _HEAD.size + n
    out = {}
    for e in manifest["arrays"]:
        if e["dtype"] not in DTYPE_TAGS:
            raise ContainerError(f"unknown dtype tag {e['dtype']!r} for {e['name']!r}")
        start = base + e["offset"]
        if start + e["nbytes"] > len(blob):
            raise ContainerError(f"payload of {e['name']!r} is truncated")
        a = np.frombuffer(blob, dtype=DTYPE_TAGS[e["dtype"]], count=e["nbytes"] // DTYPE_TAGS[e["dtype"]].itemsize, offset=start)
        out[e["name"]] = a.reshape(e["shape"]).copy()
    return out, manifest["meta"]


def pack_state(state: Mapping, init_seed: int, config: Mapping) -> bytes:
    """Checkpoint blob for a torch ``state_dict`` (hierarchical dotted keys)."""
    arrays = {k: v.detach().cpu().numpy() for k, v in state.items()}
    return pack(arrays, {"kind": "checkpoint", "init_seed": int(init_seed), "config": dict(config)})


def unpack_state(blob: bytes):
    """Returns (state dict of torch tensors, init_seed, config)."""
    import torch

    arrays, meta = unpack(blob)
    if meta.get("kind") != "checkpoint":
        raise ContainerError("container does not hold a checkpoint")
    return {k: torch.from_numpy(v) for k, v in arrays.items()}, meta["init_seed"], meta["config"]
