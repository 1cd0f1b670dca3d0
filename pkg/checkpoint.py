"""
Checkpoint directories: `manifest.json` describing every tensor plus the
run metadata, and `tensors.bin` holding the tensors as little-endian
float32, row-major, concatenated in manifest order.
"""
import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np

from errors import CheckpointIntegrityError, DigestMismatchError, StorageError
from logger import logger

FORMAT = "hybridroi-checkpoint/1"
MANIFEST = "manifest.json"
TENSORS = "tensors.bin"
GROUPS = ("param", "adam_m", "adam_v")


@dataclass
class Checkpoint:
    """
    Everything needed to resume or evaluate a run.

    `meta` carries the config (and its digest), the split digest, epoch,
    phase, best validation AUC, optimizer step counts and hyperparameters,
    schedule settings, shuffle RNG state and the history so far.
    """
    params: Dict[str, np.ndarray]
    adam_m: Dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: Dict[str, np.ndarray] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def config_digest(self) -> Optional[str]:
        return self.meta.get("config_digest")

    @property
    def split_digest(self) -> Optional[str]:
        return self.meta.get("split_digest")


def _entries(checkpoint: Checkpoint) -> List[tuple]:
    groups = {"param": checkpoint.params, "adam_m": checkpoint.adam_m, "adam_v": checkpoint.adam_v}
    return [(f"{group}/{name}", value) for group in GROUPS for name, value in groups[group].items()]


def encode(checkpoint: Checkpoint) -> tuple:
    """(manifest text, tensor bytes) exactly as written to disk"""
    tensors = []
    chunks = []
    offset = 0
    for name, value in _entries(checkpoint):
        raw = np.ascontiguousarray(value, dtype="<f4").tobytes()
        tensors.append({
            "name": name,
            "shape": list(np.shape(value)),
            "offset": offset,
            "nbytes": len(raw),
            "sha256": hashlib.sha256(raw).hexdigest(),
        })
        chunks.append(raw)
        offset += len(raw)
    manifest = {"format": FORMAT, "tensors": tensors, **checkpoint.meta}
    return json.dumps(manifest, indent=2, sort_keys=True) + "\n", b"".join(chunks)


def save_checkpoint(checkpoint: Checkpoint, path) -> Path:
    """Write `checkpoint` into directory `path`, replacing it atomically"""
    path = Path(path)
    text, blob = encode(checkpoint)
    staging = path.with_name(path.name + ".tmp")
    try:
        if staging.exists():
            shutil.rmtree(staging)
        staging.mkdir(parents=True)
        (staging / TENSORS).write_bytes(blob)
        (staging / MANIFEST).write_text(text, encoding="utf-8", newline="\n")
        if path.exists():
            shutil.rmtree(path)
        staging.rename(path)
    except OSError as exc:
        raise StorageError(f"cannot write checkpoint {path}: {exc}") from exc
    logger.info(f"Checkpoint saved to {path} ({len(blob)} bytes of tensors)")
    return path


def load_checkpoint(path, config_digest: Optional[str] = None, split_digest: Optional[str] = None) -> Checkpoint:
    """
    Read and verify a checkpoint directory

    Args:
        path: checkpoint directory
        config_digest: when given, must equal the recorded config digest
        split_digest: when given, must equal the recorded split digest

    Returns:
        Checkpoint with tensors decoded to float32
    """
    path = Path(path)
    try:
        manifest = json.loads((path / MANIFEST).read_text(encoding="utf-8"))
        blob = (path / TENSORS).read_bytes()
    except (OSError, ValueError) as exc:
        raise StorageError(f"cannot read checkpoint {path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointIntegrityError(f"{path}: unsupported checkpoint format {manifest.get('format')!r}")

    tensors = manifest.pop("tensors")
    manifest.pop("format")
    checkpoint = Checkpoint(params={}, meta=manifest)
    groups = {"param": checkpoint.params, "adam_m": checkpoint.adam_m, "adam_v": checkpoint.adam_v}

    expected_size = sum(entry["nbytes"] for entry in tensors)
    if expected_size != len(blob):
        raise CheckpointIntegrityError(f"{path}: tensors.bin holds {len(blob)} bytes, manifest lists {expected_size}")
    for entry in tensors:
        raw = blob[entry["offset"]:entry["offset"] + entry["nbytes"]]
        if hashlib.sha256(raw).hexdigest() != entry["sha256"]:
            raise CheckpointIntegrityError(f"{path}: checksum mismatch for tensor {entry['name']}")
        group, name = entry["name"].split("/", 1)
        if group not in groups:
            raise CheckpointIntegrityError(f"{path}: unknown tensor group {group!r}")
        groups[group][name] = np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(entry["shape"])

    if config_digest is not None and checkpoint.config_digest != config_digest:
        raise DigestMismatchError(
            f"checkpoint {path} was trained with config {checkpoint.config_digest}, current config is {config_digest}")
    if split_digest is not None and checkpoint.split_digest != split_digest:
        raise DigestMismatchError(
            f"checkpoint {path} was trained on split {checkpoint.split_digest}, given split is {split_digest}")
    return checkpoint
