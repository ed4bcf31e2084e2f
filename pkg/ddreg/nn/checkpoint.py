"""
Checkpoint persistence

A checkpoint directory holds ``checkpoint.json`` (network configuration, tensor
manifest, loss weights, optimizer metadata) and ``checkpoint.bin``, the
little-endian float64 tensors concatenated in manifest order. The manifest
carries the sha256 digest of the blob.
"""

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict

from ddreg.config import NetConfig
from ddreg.errors import CheckpointMismatchError
from ddreg.logger import logger
from ddreg.nn.tensor import ParameterStore
from ddreg.nn.unet import init_parameters

MANIFEST = "checkpoint.json"
BLOB = "checkpoint.bin"
FORMAT_VERSION = 1


class TensorEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    shape: List[int]
    offset: int
    trainable: bool = True


class CheckpointManifest(BaseModel):
    """JSON side of a checkpoint"""

    model_config = ConfigDict(extra="forbid")

    format_version: int = FORMAT_VERSION
    net: NetConfig
    design: str
    epoch: int
    val_loss: Optional[float] = None
    loss_names: List[str]
    loss_logits: List[float]
    learned_weights: bool
    optimizer: Dict[str, float]
    tensors: List[TensorEntry]
    sha256: str


@dataclass
class Checkpoint:
    """Network parameters with the loss weights and metadata of a training run"""

    net: NetConfig
    params: ParameterStore
    design: str
    loss_names: Tuple[str, ...]
    loss_logits: np.ndarray
    learned_weights: bool
    epoch: int = 0
    val_loss: Optional[float] = None
    optimizer: Dict[str, float] = field(default_factory=dict)


def blob_digest(blob: bytes) -> str:
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(ckpt: Checkpoint, directory: Union[str, Path]) -> str:
    """Write a checkpoint and return the digest of its tensor blob"""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    entries = []
    chunks = []
    offset = 0
    for name, tensor in ckpt.params.items():
        entries.append(
            TensorEntry(
                name=name,
                shape=list(tensor.shape),
                offset=offset,
                trainable=ckpt.params.is_trainable(name),
            ),
        )
        chunks.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
        offset += tensor.data.size
    blob = b"".join(chunks)
    digest = blob_digest(blob)

    manifest = CheckpointManifest(
        net=ckpt.net,
        design=ckpt.design,
        epoch=ckpt.epoch,
        val_loss=ckpt.val_loss,
        loss_names=list(ckpt.loss_names),
        loss_logits=[float(v) for v in ckpt.loss_logits],
        learned_weights=ckpt.learned_weights,
        optimizer=ckpt.optimizer,
        tensors=entries,
        sha256=digest,
    )
    (directory / BLOB).write_bytes(blob)
    (directory / MANIFEST).write_text(manifest.model_dump_json(indent=2))
    logger.info(f"Saved checkpoint to {directory} (sha256 {digest[:12]})")
    return digest


def load_checkpoint(directory: Union[str, Path], net: Optional[NetConfig] = None) -> Checkpoint:
    """
    Read a checkpoint

    When `net` is given, every tensor must match that configuration; the
    mismatching names are listed on the raised error.
    """
    directory = Path(directory)
    manifest = CheckpointManifest.model_validate(json.loads((directory / MANIFEST).read_text()))
    blob = (directory / BLOB).read_bytes()
    if blob_digest(blob) != manifest.sha256:
        raise CheckpointMismatchError(f"Checkpoint blob in {directory} does not match its digest")
    values = np.frombuffer(blob, dtype="<f8")

    target = net or manifest.net
    params = init_parameters(target)
    expected = params.shapes()
    stored = {entry.name: tuple(entry.shape) for entry in manifest.tensors}
    mismatched = sorted(
        name
        for name in set(expected) | set(stored)
        if expected.get(name) != stored.get(name)
    )
    if mismatched:
        raise CheckpointMismatchError(
            f"Checkpoint does not fit the network configuration: {', '.join(mismatched)}",
            tensors=mismatched,
        )

    arrays = {}
    for entry in manifest.tensors:
        size = int(np.prod(entry.shape))
        arrays[entry.name] = values[entry.offset : entry.offset + size].reshape(entry.shape).astype(np.float64)
    params.load(arrays)
    params.freeze([entry.name for entry in manifest.tensors if not entry.trainable])

    return Checkpoint(
        net=target,
        params=params,
        design=manifest.design,
        loss_names=tuple(manifest.loss_names),
        loss_logits=np.asarray(manifest.loss_logits, dtype=float),
        learned_weights=manifest.learned_weights,
        epoch=manifest.epoch,
        val_loss=manifest.val_loss,
        optimizer=manifest.optimizer,
    )
