"""Binary checkpoint format.

Layout: ``MAGIC``, a little-endian u32 manifest length, the manifest as
canonical JSON (sorted keys, no whitespace), then every parameter as raw
little-endian float32 in manifest order.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .models import RimConfig, RimParams, _shapes

__all__ = ["Checkpoint", "CheckpointError", "FORMAT_VERSION", "config_hash", "save_checkpoint", "load_checkpoint"]

MAGIC = b"RIMCKPT\x00"
FORMAT_VERSION = 1
_PAYLOAD_DTYPE = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


def _canonical(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()


def config_hash(config: RimConfig) -> str:
    return hashlib.sha256(_canonical(config.to_dict())).hexdigest()


@dataclass
class Checkpoint:
    params: RimParams
    step: int = 0
    extra: dict = field(default_factory=dict)  # free-form JSON, e.g. the training config


def save_checkpoint(path, params: RimParams, step: int = 0, extra: dict | None = None) -> None:
    """Write atomically: a crash mid-write leaves any previous file intact."""
    entries = []
    payloads = []
    for name, t in params.tensors.items():
        arr = np.asarray(t.data, dtype=_PAYLOAD_DTYPE, order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "float32"})
        payloads.append(arr.tobytes())
    manifest = {
        "format_version": FORMAT_VERSION,
        "model": params.config.to_dict(),
        "config_hash": config_hash(params.config),
        "params": entries,
        "step": int(step),
        "extra": extra or {},
    }
    header = _canonical(manifest)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        for p in payloads:
            f.write(p)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def load_checkpoint(path, expected: RimConfig | None = None) -> Checkpoint:
    """Read a checkpoint; parameters come back as float32 leaves.

    Raises ``CheckpointError`` on a corrupt file or when ``expected`` differs
    from the stored architecture.
    """
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    if len(data) < pos + 4:
        raise CheckpointError(f"{path}: truncated header")
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        manifest = json.loads(data[pos:pos + n])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    pos += n
    if manifest.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {manifest.get('format_version')}")
    config = RimConfig.from_dict(manifest["model"])
    if config_hash(config) != manifest["config_hash"]:
        raise CheckpointError(f"{path}: architecture config does not match its stored hash")
    if expected is not None and config_hash(expected) != manifest["config_hash"]:
        raise CheckpointError(f"{path}: checkpoint architecture {config.to_dict()} "
                              f"does not match expected {expected.to_dict()}")
    tensors = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * _PAYLOAD_DTYPE.itemsize
        if entry.get("dtype") != "float32" or pos + nbytes > len(data):
            raise CheckpointError(f"{path}: bad or truncated payload for {entry['name']}")
        arr = np.frombuffer(data, dtype=_PAYLOAD_DTYPE, count=count, offset=pos).reshape(shape)
        tensors[entry["name"]] = ad.parameter(arr.astype(np.float32), name=entry["name"])
        pos += nbytes
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    expected_shapes = _shapes(config)
    found = {k: v.shape for k, v in tensors.items()}
    if found != expected_shapes:
        raise CheckpointError(f"{path}: parameters {found} do not fit architecture {config.to_dict()}")
    return Checkpoint(RimParams(config, tensors), manifest["step"], manifest["extra"])
