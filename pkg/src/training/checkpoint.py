"""
Single-file model container: magic, header length, JSON header, raw tensor blobs
"""

import hashlib
import json
import logging
import os
import struct

import numpy as np
import torch

from ..core.errors import CheckpointError
from ..core.imports import SCHEMA_VERSION
from ..core.serialization import to_jsonable

logger = logging.getLogger(__name__)

MAGIC = b"DA3CKPT\x00"


def save_checkpoint(path, module, kind, config, iteration, extra=None):
    """Write `module`'s state dict with a JSON header {schema_version, config, iteration}"""
    tensors = []
    blobs = []
    offset = 0
    for name, tensor in module.state_dict().items():
        arr = np.ascontiguousarray(tensor.detach().cpu().numpy())
        raw = arr.tobytes()
        tensors.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        blobs.append(raw)
        offset += len(raw)

    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "config": to_jsonable(config),
        "iteration": int(iteration),
        "extra": to_jsonable(extra or {}),
        "tensors": tensors,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")

    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        for raw in blobs:
            f.write(raw)
    os.replace(tmp, path)
    logger.info("Saved %s checkpoint (iteration %d) to %s", kind, iteration, path)
    return header


def load_checkpoint(path, expected_kind=None):
    """Return (header, state_dict)"""
    if not os.path.exists(path):
        raise CheckpointError(f"missing checkpoint {path}")
    with open(path, "rb") as f:
        data = f.read()

    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a model container")
    try:
        (header_len,) = struct.unpack("<Q", data[len(MAGIC):len(MAGIC) + 8])
        start = len(MAGIC) + 8
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header in {path}: {e}") from e

    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: schema_version {header.get('schema_version')} != {SCHEMA_VERSION}")
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise CheckpointError(f"{path} holds a {header.get('kind')!r} model, expected {expected_kind!r}")

    body = start + header_len
    state = {}
    for entry in header["tensors"]:
        lo = body + entry["offset"]
        hi = lo + entry["nbytes"]
        if hi > len(data):
            raise CheckpointError(f"{path} is truncated at tensor {entry['name']}")
        arr = np.frombuffer(data[lo:hi], dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.copy())
    return header, state


def state_fingerprint(module):
    """Content hash of a module's weights; identical weights give identical fingerprints"""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode("utf-8"))
        h.update(np.ascontiguousarray(tensor.detach().cpu().numpy()).tobytes())
    return h.hexdigest()
