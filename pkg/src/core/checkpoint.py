"""
Checkpoint container shared by every module.

A checkpoint is a safetensors file: an 8-byte little-endian header length, a
JSON header listing each tensor's dtype, shape and byte offsets, then the raw
little-endian float32 data. The header's ``__metadata__`` carries the format
tag, the checkpoint kind, the producing config as JSON text and a manifest
mapping every tensor name to its role.
"""

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch
from safetensors import SafetensorError
from safetensors.torch import load_file, save_file

from .errors import CheckpointError
from ..utils.logger import get_logger

logger = get_logger("checkpoint")

CHECKPOINT_FORMAT = "l2d-toy/1"

# Manifest roles
ROLE_BASE = "base"
ROLE_FROZEN = "frozen"
ROLE_LORA = "lora"
ROLE_NEW = "new"


@dataclass
class Checkpoint:
    """In-memory view of a loaded checkpoint."""

    kind: str
    config: Dict[str, Any]
    tensors: Dict[str, torch.Tensor]
    manifest: Dict[str, str] = field(default_factory=dict)
    path: Optional[Path] = None


def save_checkpoint(
    path: Union[str, Path],
    tensors: Dict[str, torch.Tensor],
    kind: str,
    config: Dict[str, Any],
    manifest: Optional[Dict[str, str]] = None,
) -> Path:
    """
    Serialise ``tensors`` as float32 together with config and manifest.

    The file is written to a temporary name and renamed, so a crash never
    leaves a half-written checkpoint under the final name.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    data = {name: t.detach().to(device="cpu", dtype=torch.float32).contiguous().clone()
            for name, t in tensors.items()}
    manifest = manifest or {name: ROLE_NEW for name in data}
    missing = set(data) - set(manifest)
    if missing:
        raise CheckpointError(f"Manifest lacks roles for: {sorted(missing)}")

    metadata = {
        "format": CHECKPOINT_FORMAT,
        "kind": kind,
        "config": json.dumps(config, sort_keys=True),
        "manifest": json.dumps(manifest, sort_keys=True),
    }

    tmp_path = path.with_name(path.name + ".tmp")
    save_file(data, str(tmp_path), metadata=metadata)
    os.replace(tmp_path, path)

    logger.info(f"Saved {kind} checkpoint: {path} ({len(data)} tensors)")
    return path


def read_header(path: Union[str, Path]) -> Dict[str, Any]:
    """Parse and return the raw JSON header of a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        with open(path, 'rb') as f:
            raw_len = f.read(8)
            if len(raw_len) != 8:
                raise CheckpointError(f"Checkpoint truncated: {path}")
            (header_len,) = struct.unpack("<Q", raw_len)
            if header_len > path.stat().st_size - 8:
                raise CheckpointError(f"Checkpoint header length is corrupt: {path}")
            header = json.loads(f.read(header_len).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Checkpoint header is corrupt: {path}: {e}") from e
    return header


def load_checkpoint(path: Union[str, Path],
                    expected_kind: Optional[str] = None) -> Checkpoint:
    """Load a checkpoint, validating its format tag and (optionally) kind."""
    path = Path(path)
    header = read_header(path)
    metadata = header.get("__metadata__") or {}

    if metadata.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Unrecognised checkpoint format in {path}: "
                              f"{metadata.get('format')!r}")
    kind = metadata.get("kind", "")
    if expected_kind is not None and kind != expected_kind:
        raise CheckpointError(f"Expected a '{expected_kind}' checkpoint, "
                              f"found '{kind}' in {path}")

    try:
        tensors = load_file(str(path))
        config = json.loads(metadata.get("config", "{}"))
        manifest = json.loads(metadata.get("manifest", "{}"))
    except (SafetensorError, json.JSONDecodeError, OSError) as e:
        raise CheckpointError(f"Checkpoint is corrupt: {path}: {e}") from e

    return Checkpoint(kind=kind, config=config, tensors=tensors,
                      manifest=manifest, path=path)


def read_config(path: Union[str, Path], expected_kind: Optional[str] = None) -> Dict[str, Any]:
    """Config stored in a checkpoint's header, without loading its tensors."""
    path = Path(path)
    metadata = read_header(path).get("__metadata__") or {}
    if metadata.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"Unrecognised checkpoint format in {path}: "
                              f"{metadata.get('format')!r}")
    if expected_kind is not None and metadata.get("kind") != expected_kind:
        raise CheckpointError(f"Expected a '{expected_kind}' checkpoint, "
                              f"found '{metadata.get('kind')}' in {path}")
    try:
        return json.loads(metadata.get("config", "{}"))
    except json.JSONDecodeError as e:
        raise CheckpointError(f"Checkpoint config is corrupt: {path}: {e}") from e


_MISSING = "<missing>"


def _first_difference(stored: Any, expected: Any, name: str = ""):
    if isinstance(expected, dict):
        if not isinstance(stored, dict):
            return name, stored, expected
        for key in sorted(expected):
            dotted = f"{name}.{key}" if name else key
            found = _first_difference(stored.get(key, _MISSING), expected[key], dotted)
            if found is not None:
                return found
        return None
    return None if stored == expected else (name, stored, expected)


def check_config(path: Union[str, Path], stored: Dict[str, Any],
                 expected: Dict[str, Any]) -> None:
    """
    Raise ``CheckpointError`` naming the first field of ``expected`` that the
    stored config lacks or holds a different value for.

    Keys present only in ``stored`` (digests, bookkeeping) are not compared.
    """
    # same JSON round trip the stored config went through
    expected = json.loads(json.dumps(expected, sort_keys=True, default=str))
    found = _first_difference(stored, expected)
    if found is not None:
        name, have, want = found
        raise CheckpointError(f"{path} was written with {name}={have!r} but the config "
                              f"asks for {name}={want!r}; use a new experiment name or "
                              f"delete the stale checkpoint", field=name)
