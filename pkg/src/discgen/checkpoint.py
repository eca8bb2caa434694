"""Checkpoint container: named tensors plus one JSON metadata record.

Stored as safetensors. Tensor keys use ``component/layer/param`` with ``/``
separators (``model/unet/xattn_hi/attn/to_q/weight``). The whole metadata
record lives under the single safetensors metadata key ``"discgen"`` as
canonical JSON (sorted keys), so identical content serializes to identical
bytes. The record always carries ``format_version`` and ``kind``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file
from safetensors import safe_open

FORMAT_VERSION = 1
META_KEY = "discgen"


class CheckpointError(RuntimeError):
    pass


def dotted_to_key(name: str) -> str:
    return name.replace(".", "/")


def key_to_dotted(key: str) -> str:
    return key.replace("/", ".")


def write(path: str | Path, tensors: dict[str, torch.Tensor], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {**meta, "format_version": FORMAT_VERSION}
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":"))
    tensors = {k: v.detach().contiguous().cpu() for k, v in tensors.items()}
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(tensors, str(tmp), metadata={META_KEY: blob})
    tmp.replace(path)
    return path


def read(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    try:
        with safe_open(str(path), framework="pt") as f:
            raw = (f.metadata() or {}).get(META_KEY)
        tensors = load_file(str(path))
    except (SafetensorError, OSError, ValueError) as e:
        raise CheckpointError(f"{path}: corrupt checkpoint ({e})") from e
    if raw is None:
        raise CheckpointError(f"{path}: missing metadata record")
    try:
        meta = json.loads(raw)
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt metadata ({e})") from e
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {meta.get('format_version')} != supported {FORMAT_VERSION}"
        )
    return tensors, meta


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def tensors_hash(tensors: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for k in sorted(tensors):
        h.update(k.encode())
        h.update(tensors[k].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def save_features(path: str | Path, features: torch.Tensor, extractor_hash: str, **extra) -> Path:
    return write(path, {"features": features}, {"kind": "features", "extractor_hash": extractor_hash, **extra})


def load_features(path: str | Path) -> tuple[torch.Tensor, dict]:
    tensors, meta = read(path)
    if meta.get("kind") != "features":
        raise CheckpointError(f"{path}: not a feature file (kind={meta.get('kind')!r})")
    return tensors["features"], meta
