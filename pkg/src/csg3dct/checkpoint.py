"""Single-file tensor container.

Layout::

    CSG3DCT1\\n
    # key = value          (optional metadata lines)
    <name>\\t<shape, space-separated>\\tf32\\t<offset>
    ...
    <blank line>
    <payload: little-endian float32 blobs, concatenated>

Offsets are relative to the start of the payload.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

MAGIC = b"CSG3DCT1"
DTYPE_TAG = "f32"
_LE_F32 = np.dtype("<f4")


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    name: str
    shape: tuple
    dtype: str
    offset: int

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * 4


@dataclass
class Checkpoint:
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    meta: "OrderedDict[str, str]" = field(default_factory=OrderedDict)

    def __post_init__(self):
        self.tensors = OrderedDict((k, np.asarray(v, dtype=np.float32)) for k, v in self.tensors.items())
        self.meta = OrderedDict(self.meta)

    def manifest(self) -> list:
        entries, offset = [], 0
        for name, arr in self.tensors.items():
            entries.append(ManifestEntry(name, tuple(arr.shape), DTYPE_TAG, offset))
            offset += arr.size * 4
        return entries

    def names(self) -> list:
        return list(self.tensors)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def to_bytes(self) -> bytes:
        head = [MAGIC.decode("ascii")]
        for key, value in self.meta.items():
            if "\n" in str(value) or "=" in key:
                raise CheckpointError(f"metadata {key!r} cannot be encoded on one line")
            head.append(f"# {key} = {value}")
        for e in self.manifest():
            if any(c in e.name for c in "\t\n ") or not e.name:
                raise CheckpointError(f"tensor name {e.name!r} contains whitespace")
            head.append(f"{e.name}\t{' '.join(str(s) for s in e.shape)}\t{e.dtype}\t{e.offset}")
        header = ("\n".join(head) + "\n\n").encode("utf-8")
        payload = b"".join(arr.astype(_LE_F32, copy=False).tobytes(order="C") for arr in self.tensors.values())
        return header + payload

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if not blob.startswith(MAGIC + b"\n"):
            raise CheckpointError("missing CSG3DCT1 magic")
        end = blob.find(b"\n\n", len(MAGIC))
        if end < 0:
            raise CheckpointError("manifest is not terminated by a blank line")
        lines = blob[len(MAGIC) + 1:end].decode("utf-8").split("\n") if end > len(MAGIC) else []
        payload = memoryview(blob)[end + 2:]
        meta, entries = OrderedDict(), []
        for lineno, line in enumerate(lines, 2):
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].partition("=")
                meta[key.strip()] = value.strip()
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise CheckpointError(f"manifest line {lineno}: expected 4 tab-separated fields, got {line!r}")
            name, shape_s, dtype, offset_s = parts
            if dtype != DTYPE_TAG:
                raise CheckpointError(f"{name}: unsupported dtype tag {dtype!r}")
            shape = tuple(int(s) for s in shape_s.split()) if shape_s.strip() else ()
            entries.append(ManifestEntry(name, shape, dtype, int(offset_s)))
        _validate_manifest(entries, len(payload))
        tensors = OrderedDict()
        for e in entries:
            arr = np.frombuffer(payload[e.offset:e.offset + e.nbytes], dtype=_LE_F32)
            tensors[e.name] = arr.astype(np.float32).reshape(e.shape)
        return cls(tensors, meta)

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


def _validate_manifest(entries: list, payload_len: int) -> None:
    seen, expected = set(), 0
    for e in entries:
        if e.name in seen:
            raise CheckpointError(f"duplicate tensor name {e.name!r}")
        seen.add(e.name)
        if e.offset % 4:
            raise CheckpointError(f"{e.name}: offset {e.offset} is not 4-byte aligned")
        if e.offset < expected:
            raise CheckpointError(f"{e.name}: offset {e.offset} overlaps the previous entry (ends at {expected})")
        end = e.offset + e.nbytes
        if end > payload_len:
            raise CheckpointError(f"{e.name}: payload truncated; entry spans bytes {e.offset}..{end} "
                                  f"but payload has {payload_len}")
        expected = end


def save_checkpoint(model, meta: dict = None) -> Checkpoint:
    """Snapshot of every parameter and buffer, in model order."""
    meta = OrderedDict(meta or {})
    cfg = getattr(model, "cfg", None)
    if cfg is not None:
        from .config import format_config

        for line in format_config(cfg).splitlines():
            key, _, value = line.partition(" = ")
            meta.setdefault(f"model.{key}", value)
    return Checkpoint(OrderedDict((k, v.copy()) for k, v in model.state_dict().items()), meta)


def load_checkpoint(ckpt: Checkpoint, model) -> None:
    own = model.state_dict()
    missing = [k for k in own if k not in ckpt.tensors]
    unexpected = [k for k in ckpt.tensors if k not in own]
    mismatched = [f"{k}: model {own[k].shape} vs checkpoint {ckpt.tensors[k].shape}"
                  for k in own if k in ckpt.tensors and own[k].shape != ckpt.tensors[k].shape]
    if missing or unexpected or mismatched:
        diff = [f"- {k} (missing from checkpoint)" for k in missing]
        diff += [f"+ {k} (not in model)" for k in unexpected]
        diff += [f"~ {m}" for m in mismatched]
        raise CheckpointError("checkpoint does not match model:\n  " + "\n  ".join(diff))
    model.load_state_dict(ckpt.tensors)


def model_config_from_meta(meta: dict):
    from .config import model_config_from_items

    items = {k[len("model."):]: v for k, v in meta.items() if k.startswith("model.")}
    if not items:
        raise CheckpointError("checkpoint carries no model configuration")
    return model_config_from_items(items)
