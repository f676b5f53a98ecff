"""
Checkpoint Module - TMDC binary parameter files

Layout (all integers little-endian):

    4 bytes   magic "TMDC"
    uint32    format version
    uint64    header length in bytes
    header    UTF-8 JSON: model kind, hyperparameters, adapter info,
              free-form metadata, and a manifest of
              {name, shape, offset, count} per parameter block
    data      raw float64 ('<f8') parameter blocks at the manifest offsets

save -> load round-trips every parameter bit-for-bit.
"""

import hashlib
import json
import logging
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn

from config import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from src.models import adapter_info, attach_adapters, build_model

logger = logging.getLogger(__name__)

_PREFIX = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    kind: str
    hparams: dict
    state: dict
    lora: Optional[dict] = None
    metadata: dict = field(default_factory=dict)


def _atomic_write(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp_path = path.with_name(path.name + ".tmp")
    with open(tmp_path, "wb") as f:
        f.write(payload)
    os.replace(tmp_path, path)


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    manifest = []
    blocks = []
    offset = 0
    for name in sorted(ckpt.state):
        array = ckpt.state[name].detach().cpu().numpy().astype("<f8", copy=False)
        raw = np.ascontiguousarray(array).tobytes()
        manifest.append({
            "name": name,
            "shape": list(array.shape),
            "offset": offset,
            "count": int(array.size),
        })
        blocks.append(raw)
        offset += len(raw)

    header = json.dumps({
        "kind": ckpt.kind,
        "hparams": ckpt.hparams,
        "lora": ckpt.lora,
        "metadata": ckpt.metadata,
        "tensors": manifest,
    }, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(header)) + header + b"".join(blocks)


def decode_checkpoint(payload: bytes) -> Checkpoint:
    if len(payload) < _PREFIX.size:
        raise ValueError("checkpoint truncated before header")
    magic, version, header_len = _PREFIX.unpack_from(payload, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"not a TMDC checkpoint (magic {magic!r})")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")

    header_start = _PREFIX.size
    header = json.loads(payload[header_start:header_start + header_len].decode("utf-8"))
    data_start = header_start + header_len

    state = {}
    for entry in header["tensors"]:
        array = np.frombuffer(
            payload, dtype="<f8", count=entry["count"],
            offset=data_start + entry["offset"],
        ).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(array.astype(np.float64, copy=True))

    return Checkpoint(
        kind=header["kind"],
        hparams=header["hparams"],
        state=state,
        lora=header.get("lora"),
        metadata=header.get("metadata", {}),
    )


def save_checkpoint(path: Path, model: nn.Module, metadata: Optional[dict] = None) -> str:
    """
    Write `model` to `path` atomically.

    Returns:
        sha256 hex digest of the written file
    """
    path = Path(path)
    ckpt = Checkpoint(
        kind=model.kind,
        hparams=model.hparams(),
        state={name: p.detach() for name, p in model.state_dict().items()},
        lora=adapter_info(model),
        metadata=dict(metadata or {}),
    )
    payload = encode_checkpoint(ckpt)
    _atomic_write(path, payload)
    digest = hashlib.sha256(payload).hexdigest()
    logger.debug(f"  Saved checkpoint {path.name} ({len(payload):,} bytes, {digest[:12]})")
    return digest


def load_checkpoint(path: Path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())


def model_from_checkpoint(source) -> nn.Module:
    """Rebuild a model (adapter form if saved that way) from a path or Checkpoint."""
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(source)
    model = build_model(ckpt.kind, ckpt.hparams)
    if ckpt.lora:
        attach_adapters(model, ckpt.lora["rank"], ckpt.lora["alpha"])
    model.load_state_dict(ckpt.state)
    return model


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def parameters_hash(model: nn.Module, include_adapters: bool = False) -> str:
    """sha256 over parameter names, shapes and raw bytes (base weights by default)."""
    digest = hashlib.sha256()
    for name, param in sorted(model.named_parameters()):
        if not include_adapters and "lora_" in name:
            continue
        array = param.detach().cpu().numpy().astype("<f8", copy=False)
        digest.update(name.encode("utf-8"))
        digest.update(str(array.shape).encode("utf-8"))
        digest.update(np.ascontiguousarray(array).tobytes())
    return digest.hexdigest()


def write_json_atomic(path: Path, payload: dict) -> Path:
    """Write a JSON document atomically (sorted keys, 2-space indent)."""
    path = Path(path)
    _atomic_write(path, (json.dumps(payload, indent=2, sort_keys=True) + "\n").encode("utf-8"))
    return path


def run_id(payload: dict) -> str:
    """Git-style id: sha1 of the canonical JSON encoding of `payload`."""
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha1(canonical.encode("utf-8")).hexdigest()
