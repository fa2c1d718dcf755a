"""Single-file checkpoint container: JSON metadata header + raw parameter blob.

Layout: 8-byte magic, u32 format version, u32 header length, UTF-8 JSON
header, then the concatenated little-endian tensor bytes. The header carries
a sha256 digest of the parameter stream (names, dtypes, shapes, bytes);
loading recomputes and compares it, so any mutation of the stored parameters
fails with IntegrityError.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch

from .models import BackboneKind, ModelMeta, SegmentationBackbone, build_model
from .preprocess import WindowSpec

MAGIC = b"SEGCKPT\x00"
FORMAT_VERSION = 1


class IntegrityError(Exception):
    """Stored parameters do not match their recorded digest."""


def state_digest(state: Mapping[str, torch.Tensor], exclude_prefixes: tuple[str, ...] = ()) -> str:
    """Canonical sha256 over (name, dtype, shape, bytes) of every entry."""
    h = hashlib.sha256()
    for name, tensor in state.items():
        if any(name.startswith(p) for p in exclude_prefixes):
            continue
        arr = tensor.detach().cpu().numpy()
        h.update(name.encode())
        h.update(str(arr.dtype).encode())
        h.update(str(arr.shape).encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def module_param_prefixes(model: torch.nn.Module, submodule: torch.nn.Module) -> tuple[str, ...]:
    """state_dict name prefixes belonging to one submodule."""
    for name, mod in model.named_modules():
        if mod is submodule:
            return (name + ".",) if name else ("",)
    raise ValueError("submodule not found in model")


def _serialize_state(state: Mapping[str, torch.Tensor]) -> tuple[list[dict], bytes]:
    manifest = []
    chunks = []
    for name, tensor in state.items():
        arr = tensor.detach().cpu().numpy()
        # record the shape first: ascontiguousarray promotes 0-d scalars to 1-d
        manifest.append({"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)})
        chunks.append(np.ascontiguousarray(arr).tobytes())
    return manifest, b"".join(chunks)


def _deserialize_state(manifest: list[dict], blob: bytes) -> dict[str, torch.Tensor]:
    state = {}
    offset = 0
    for entry in manifest:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise IntegrityError("parameter blob truncated")
        arr = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        state[entry["name"]] = torch.from_numpy(arr)
        offset += nbytes
    return state


def write_container(path: str | Path, header: dict[str, Any], blob: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header_bytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", FORMAT_VERSION, len(header_bytes)))
        f.write(header_bytes)
        f.write(blob)


def read_container(path: str | Path) -> tuple[dict[str, Any], bytes]:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise OSError(f"{path}: not a checkpoint file")
    version, header_len = struct.unpack_from("<II", raw, 8)
    if version != FORMAT_VERSION:
        raise OSError(f"{path}: unsupported checkpoint format version {version}")
    header = json.loads(raw[16 : 16 + header_len].decode())
    return header, raw[16 + header_len :]


def _meta_to_json(meta: ModelMeta) -> dict[str, Any]:
    return {
        "backbone": meta.backbone.value,
        "organ": meta.organ,
        "window": None if meta.window is None else {"width": meta.window.width, "level": meta.window.level},
        "in_channels": meta.in_channels,
        "out_channels": meta.out_channels,
        "width": meta.width,
    }


def _meta_from_json(d: Mapping[str, Any]) -> ModelMeta:
    window = d.get("window")
    return ModelMeta(
        backbone=BackboneKind(d["backbone"]),
        organ=d["organ"],
        window=None if window is None else WindowSpec(window["width"], window["level"]),
        in_channels=d["in_channels"],
        out_channels=d["out_channels"],
        width=d["width"],
    )


@dataclass(frozen=True)
class CheckpointInfo:
    path: Path
    meta: ModelMeta
    training: dict[str, Any]
    digest: str


def save_checkpoint(
    model: SegmentationBackbone, path: str | Path, training: dict[str, Any] | None = None
) -> CheckpointInfo:
    """Persist model parameters plus identity/training metadata."""
    state = model.state_dict()
    manifest, blob = _serialize_state(state)
    digest = state_digest(state)
    header = {
        "kind": "model",
        "meta": _meta_to_json(model.meta),
        "training": training or {},
        "tensors": manifest,
        "digest": digest,
    }
    write_container(path, header, blob)
    return CheckpointInfo(path=Path(path), meta=model.meta, training=training or {}, digest=digest)


def read_checkpoint_info(path: str | Path) -> CheckpointInfo:
    """Header-only read (no parameter verification)."""
    header, _ = read_container(path)
    return CheckpointInfo(
        path=Path(path),
        meta=_meta_from_json(header["meta"]),
        training=header.get("training", {}),
        digest=header["digest"],
    )


def load_checkpoint(path: str | Path) -> tuple[SegmentationBackbone, CheckpointInfo]:
    """Rebuild the model and restore verified parameters."""
    header, blob = read_container(path)
    if header.get("kind") != "model":
        raise OSError(f"{path}: not a model checkpoint")
    state = _deserialize_state(header["tensors"], blob)
    if state_digest(state) != header["digest"]:
        raise IntegrityError(f"{path}: parameter digest mismatch")
    meta = _meta_from_json(header["meta"])
    model = build_model(
        meta.backbone,
        in_channels=meta.in_channels,
        out_channels=meta.out_channels,
        width=meta.width,
        organ=meta.organ,
        window=meta.window,
    )
    model.load_state_dict(state)
    info = CheckpointInfo(
        path=Path(path), meta=meta, training=header.get("training", {}), digest=header["digest"]
    )
    return model, info
