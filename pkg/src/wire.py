"""Byte-stable documents for checkpoints and update packages.

Tensors travel as base64 of their little-endian float64 bytes, so a decode of
an encode is bitwise exact and identical contents always give identical bytes.
"""
import base64
import logging
from pathlib import Path
from typing import Dict, List, Union

import numpy as np
from pydantic import ValidationError

from src.errors import ProtocolError
from src.federation import UpdatePackage
from src.models import (
    CheckpointDocument,
    ExpertBlob,
    GroupBlob,
    PackageDocument,
    TensorBlob,
    UsageEntry,
)
from src.moe import ExpertKey, MoEModel
from src.tensor import ParamGroup

logger = logging.getLogger(__name__)


def _blob(array: np.ndarray) -> TensorBlob:
    raw = np.ascontiguousarray(array, dtype="<f8").tobytes()
    return TensorBlob(shape=list(array.shape), data=base64.b64encode(raw).decode("ascii"))


def _array(blob: TensorBlob) -> np.ndarray:
    raw = base64.b64decode(blob.data)
    values = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    expected = int(np.prod(blob.shape)) if blob.shape else 1
    if values.size != expected:
        raise ProtocolError(f"tensor blob holds {values.size} values for shape {blob.shape}")
    return values.reshape(blob.shape)


def encode_checkpoint(model: MoEModel, round_index: int = 0) -> bytes:
    doc = CheckpointDocument(
        round=round_index,
        config=model.config,
        groups=[GroupBlob(id=g.id, tensors=[_blob(a) for a in g.arrays()]) for g in model.groups],
    )
    return doc.model_dump_json().encode("utf-8")


def decode_checkpoint(body: Union[bytes, str]) -> tuple:
    """Return (model, round) from a checkpoint document."""
    try:
        doc = CheckpointDocument.model_validate_json(body)
    except ValidationError as exc:
        raise ProtocolError(f"invalid checkpoint document: {exc}") from exc
    groups = [ParamGroup.from_arrays(g.id, [_array(t) for t in g.tensors]) for g in doc.groups]
    return MoEModel(doc.config, groups), doc.round


def save_checkpoint(model: MoEModel, path: Union[str, Path], round_index: int = 0) -> Path:
    path = Path(path)
    path.write_bytes(encode_checkpoint(model, round_index))
    return path


def load_checkpoint(path: Union[str, Path]) -> tuple:
    return decode_checkpoint(Path(path).read_bytes())


def encode_package(package: UpdatePackage) -> bytes:
    doc = PackageDocument(
        client_id=package.client_id,
        round=package.round,
        sample_count=package.sample_count,
        usage=[UsageEntry(layer=e.layer, index=e.index, usage=u) for e, u in sorted(package.usage.items())],
        dominant_set=[[e.layer, e.index] for e in sorted(package.dominant_set)],
        preference_sum=package.preference_sum,
        gating=[
            GroupBlob(id=f"gate.{layer}", tensors=[_blob(a) for a in arrays])
            for layer, arrays in sorted(package.gating.items())
        ],
        shared=[
            GroupBlob(id=gid, tensors=[_blob(a) for a in arrays])
            for gid, arrays in package.shared.items()
        ],
        experts=[
            ExpertBlob(layer=e.layer, index=e.index, tensors=[_blob(a) for a in arrays])
            for e, arrays in sorted(package.active_experts.items())
        ],
    )
    return doc.model_dump_json().encode("utf-8")


def decode_package(body: Union[bytes, str]) -> UpdatePackage:
    try:
        doc = PackageDocument.model_validate_json(body)
    except ValidationError as exc:
        raise ProtocolError(f"invalid update package: {exc}") from exc
    dominant = frozenset(ExpertKey(layer, index) for layer, index in doc.dominant_set)
    experts: Dict[ExpertKey, List[np.ndarray]] = {
        ExpertKey(b.layer, b.index): [_array(t) for t in b.tensors] for b in doc.experts
    }
    if set(experts) != set(dominant):
        raise ProtocolError("uploaded experts do not match the dominant set")
    gating = {}
    for blob in doc.gating:
        try:
            layer = int(blob.id.split(".", 1)[1])
        except (IndexError, ValueError) as exc:
            raise ProtocolError(f"bad gating id {blob.id!r}") from exc
        gating[layer] = [_array(t) for t in blob.tensors]
    return UpdatePackage(
        client_id=doc.client_id,
        round=doc.round,
        sample_count=doc.sample_count,
        usage={ExpertKey(u.layer, u.index): u.usage for u in doc.usage},
        dominant_set=dominant,
        preference_sum=doc.preference_sum,
        gating=gating,
        shared={g.id: [_array(t) for t in g.tensors] for g in doc.shared},
        active_experts=experts,
    )


def save_package(package: UpdatePackage, directory: Union[str, Path]) -> Path:
    directory = Path(directory) / f"round_{package.round:04d}"
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / f"client_{package.client_id:03d}.json"
    path.write_bytes(encode_package(package))
    return path


def load_package(path: Union[str, Path]) -> UpdatePackage:
    return decode_package(Path(path).read_bytes())
