"""Binary tensor container used for encoder weights and training checkpoints.

File layout (all integers little-endian):

    bytes 0..5    magic ``b"FSSW1\\n"``
    bytes 6..13   uint64: byte length of the JSON header
    header        UTF-8 JSON object::

                      {
                        "arch_hash": "<sha256 hex>",
                        "meta": { ... },              # free-form JSON metadata
                        "tensors": [
                          {"name": str, "shape": [int, ...], "dtype": str},
                          ...
                        ]
                      }

    payload       raw tensor bytes, concatenated in header order, each tensor
                  stored C-contiguous in its native dtype

Tensors are written sorted by name, so identical contents produce identical
files. ``arch_hash`` fingerprints the tensor layout plus a caller-supplied
config dict; loading into a mismatched architecture raises
:class:`~fssuw.errors.ConfigMismatch`.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigMismatch, CorruptFile

MAGIC = b"FSSW1\n"

_DTYPES = {
    "float32": np.float32,
    "float64": np.float64,
    "int64": np.int64,
    "int32": np.int32,
    "uint8": np.uint8,
    "bool": np.bool_,
}


def arch_hash(layout: dict[str, tuple], config_fingerprint: dict) -> str:
    """Hash of (tensor name -> shape/dtype) layout plus a config dict."""
    desc = {
        "layout": {k: [list(v[0]), str(v[1])] for k, v in sorted(layout.items())},
        "config": config_fingerprint,
    }
    blob = json.dumps(desc, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def module_layout(module: torch.nn.Module) -> dict[str, tuple]:
    return {
        name: (tuple(t.shape), str(t.numpy().dtype))
        for name, t in module.state_dict().items()
    }


def save_container(path, tensors: dict[str, np.ndarray], arch: str, meta: dict | None = None) -> Path:
    path = Path(path)
    names = sorted(tensors)
    header = {
        "arch_hash": arch,
        "meta": meta or {},
        "tensors": [
            {"name": n, "shape": list(tensors[n].shape), "dtype": str(tensors[n].dtype)}
            for n in names
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        for n in names:
            arr = np.ascontiguousarray(tensors[n])
            fh.write(arr.tobytes())
    return path


def load_container(path, expected_arch: str | None = None):
    """Read a container; returns ``(tensors, meta, arch_hash)``.

    Raises CorruptFile on any structural damage and ConfigMismatch when
    ``expected_arch`` is given and differs from the stored hash.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CorruptFile(f"cannot read weight file {path}: {exc}") from exc

    if len(raw) < len(MAGIC) + 8 or raw[: len(MAGIC)] != MAGIC:
        raise CorruptFile(f"{path}: not a weight container (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC): len(MAGIC) + 8])
    body = raw[len(MAGIC) + 8:]
    if len(body) < hlen:
        raise CorruptFile(f"{path}: truncated header")
    try:
        header = json.loads(body[:hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"{path}: unreadable header: {exc}") from exc

    stored_arch = header.get("arch_hash", "")
    if expected_arch is not None and stored_arch != expected_arch:
        raise ConfigMismatch(
            f"{path}: architecture hash {stored_arch[:12]}... does not match "
            f"expected {expected_arch[:12]}..."
        )

    payload = body[hlen:]
    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for entry in header.get("tensors", []):
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise CorruptFile(f"{path}: unsupported dtype {entry['dtype']!r}")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        if offset + nbytes > len(payload):
            raise CorruptFile(f"{path}: truncated payload at tensor {entry['name']!r}")
        arr = np.frombuffer(payload[offset: offset + nbytes], dtype=dtype).reshape(shape)
        tensors[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(payload):
        raise CorruptFile(f"{path}: {len(payload) - offset} trailing bytes in payload")
    return tensors, header.get("meta", {}), stored_arch


def save_module(module: torch.nn.Module, path, config_fingerprint: dict, meta: dict | None = None) -> Path:
    """Persist a module's state dict with its architecture hash."""
    tensors = {name: t.detach().cpu().numpy() for name, t in module.state_dict().items()}
    arch = arch_hash(module_layout(module), config_fingerprint)
    return save_container(path, tensors, arch, meta)


def load_module(module: torch.nn.Module, path, config_fingerprint: dict) -> dict:
    """Load weights saved by :func:`save_module`; returns stored metadata."""
    arch = arch_hash(module_layout(module), config_fingerprint)
    tensors, meta, _ = load_container(path, expected_arch=arch)
    state = {name: torch.from_numpy(arr) for name, arr in tensors.items()}
    module.load_state_dict(state)
    return meta
