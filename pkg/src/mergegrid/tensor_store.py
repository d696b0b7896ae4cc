"""Single-file tensor container (``.mgt``).

Layout, byte for byte::

    u64 little-endian   N = header length in bytes
    N bytes             UTF-8 JSON header, space padded to a multiple of 8
    payload             contiguous little-endian float32 data

The header maps every tensor name to ``{"dtype": "F32", "shape": [...],
"data_offsets": [begin, end]}`` (offsets relative to the payload start) and
carries a ``__metadata__`` object of string values.  This is the same layout
safetensors uses, so ``.mgt`` files open with any safetensors reader.

Embedding-table row labels live in ``__metadata__`` under ``row_labels.<name>``
as a JSON-encoded list, which keeps every metadata value a plain string.
"""

from __future__ import annotations

import json
import math
import re
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

__all__ = [
    "StoreError",
    "TensorEntry",
    "Checkpoint",
    "KeyDiff",
    "load",
    "save",
    "dumps",
    "loads",
    "diff_keys",
    "from_arrays",
]

NAME_RE = re.compile(r"[A-Za-z0-9._/-]+")
DTYPE = "F32"
_ROW_LABEL_PREFIX = "row_labels."
_META_FIELDS = ("id", "domain", "phase", "paradigm", "lineage", "seed")
_U64 = 2**64


class StoreError(ValueError):
    """Malformed container or invalid checkpoint contents."""

    def __init__(self, message: str, tensor: str | None = None, offset: int | None = None):
        where = []
        if tensor is not None:
            where.append(f"tensor {tensor!r}")
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.tensor = tensor
        self.offset = offset


@dataclass(frozen=True, eq=False)
class TensorEntry:
    """One named float32 tensor; ``row_labels`` names the rows of embedding tables."""

    name: str
    data: np.ndarray
    row_labels: tuple[str, ...] | None = None

    def __post_init__(self):
        if not isinstance(self.name, str) or not NAME_RE.fullmatch(self.name):
            raise StoreError(f"invalid tensor name {self.name!r}")
        data = np.asarray(self.data)
        if data.dtype != np.float32:
            raise StoreError(f"unsupported dtype {data.dtype}, only float32 is stored", self.name)
        if data.ndim == 0 or any(d <= 0 for d in data.shape):
            raise StoreError(f"shape must be a list of positive integers, got {list(data.shape)}", self.name)
        data = np.array(data, dtype=np.float32, order="C", copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.row_labels is not None:
            labels = tuple(str(s) for s in self.row_labels)
            if len(labels) != data.shape[0]:
                raise StoreError(
                    f"{len(labels)} row labels for {data.shape[0]} rows", self.name
                )
            if len(set(labels)) != len(labels):
                raise StoreError("row labels are not unique", self.name)
            object.__setattr__(self, "row_labels", labels)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def numel(self) -> int:
        return int(self.data.size)

    def with_data(self, data: np.ndarray, row_labels=None, keep_labels: bool = True) -> TensorEntry:
        labels = row_labels if row_labels is not None else (self.row_labels if keep_labels else None)
        return TensorEntry(self.name, np.asarray(data, dtype=np.float32), labels)

    def same_bits(self, other: TensorEntry) -> bool:
        return (
            self.name == other.name
            and self.shape == other.shape
            and self.row_labels == other.row_labels
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass(frozen=True, eq=False)
class Checkpoint:
    """Immutable named-tensor collection plus grid metadata.

    ``tensors`` is stored as a dict ordered by name regardless of the order the
    caller supplied.
    """

    id: str
    tensors: Mapping[str, TensorEntry] = field(default_factory=dict)
    domain: str | None = None
    phase: str | None = None
    paradigm: str | None = None
    lineage: str | None = None
    seed: int | None = None

    def __post_init__(self):
        if not self.id:
            raise StoreError("checkpoint id must be non-empty")
        if isinstance(self.tensors, Mapping):
            items = list(self.tensors.values())
            for key, entry in self.tensors.items():
                if key != entry.name:
                    raise StoreError(f"mapping key {key!r} differs from entry name", entry.name)
        else:
            items = list(self.tensors)
        ordered: dict[str, TensorEntry] = {}
        for entry in sorted(items, key=lambda e: e.name):
            if entry.name in ordered:
                raise StoreError("duplicate tensor name", entry.name)
            ordered[entry.name] = entry
        object.__setattr__(self, "tensors", ordered)
        if self.seed is not None:
            seed = int(self.seed)
            if not -(2**63) <= seed < _U64:
                raise StoreError(f"seed {seed} does not fit in 64 bits")
            object.__setattr__(self, "seed", seed)

    def __getitem__(self, name: str) -> TensorEntry:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list[str]:
        return list(self.tensors)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: entry.data for name, entry in self.tensors.items()}

    def metadata(self) -> dict[str, str]:
        meta = {}
        for key in _META_FIELDS:
            value = getattr(self, key)
            if value is not None:
                meta[key] = str(value)
        return meta

    def evolve(self, **changes) -> Checkpoint:
        return replace(self, **changes)

    def same_bits(self, other: Checkpoint) -> bool:
        return dumps(self) == dumps(other)


@dataclass(frozen=True)
class KeyDiff:
    shared: frozenset[str]
    only_a: frozenset[str]
    only_b: frozenset[str]
    shape_mismatch: frozenset[str]

    def __iter__(self):
        # unpacks as (shared, only_a, only_b)
        return iter((self.shared, self.only_a, self.only_b))


def diff_keys(a: Checkpoint, b: Checkpoint) -> KeyDiff:
    """Split tensor names into shared / only-in-a / only-in-b, flagging shared shape mismatches."""
    names_a, names_b = set(a.tensors), set(b.tensors)
    shared = names_a & names_b
    mismatch = {n for n in shared if a[n].shape != b[n].shape}
    return KeyDiff(frozenset(shared), frozenset(names_a - names_b), frozenset(names_b - names_a), frozenset(mismatch))


def _header_bytes(ckpt: Checkpoint) -> tuple[bytes, list[np.ndarray]]:
    header: dict[str, object] = {}
    meta = ckpt.metadata()
    blobs = []
    offset = 0
    for name, entry in ckpt.tensors.items():
        nbytes = entry.numel * 4
        header[name] = {"dtype": DTYPE, "shape": list(entry.shape), "data_offsets": [offset, offset + nbytes]}
        offset += nbytes
        blobs.append(entry.data)
        if entry.row_labels is not None:
            meta[_ROW_LABEL_PREFIX + name] = json.dumps(list(entry.row_labels), separators=(",", ":"))
    header["__metadata__"] = meta
    raw = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    raw += b" " * (-len(raw) % 8)
    return raw, blobs


def dumps(ckpt: Checkpoint) -> bytes:
    raw, blobs = _header_bytes(ckpt)
    parts = [struct.pack("<Q", len(raw)), raw]
    parts.extend(np.ascontiguousarray(b, dtype="<f4").tobytes() for b in blobs)
    return b"".join(parts)


def save(ckpt: Checkpoint, path: str | Path) -> None:
    """Write ``ckpt`` to ``path``; identical checkpoints always give identical bytes."""
    Path(path).write_bytes(dumps(ckpt))


def _reject_duplicates(pairs):
    out = {}
    for key, value in pairs:
        if key in out:
            raise StoreError("duplicate tensor name", key)
        out[key] = value
    return out


def loads(buf: bytes, default_id: str | None = None) -> Checkpoint:
    if len(buf) < 8:
        raise StoreError("file shorter than the 8-byte header length field", offset=0)
    (hlen,) = struct.unpack_from("<Q", buf, 0)
    if hlen > len(buf) - 8:
        raise StoreError(f"header length {hlen} exceeds file size {len(buf)}", offset=0)
    try:
        header = json.loads(buf[8 : 8 + hlen].decode("utf-8"), object_pairs_hook=_reject_duplicates)
    except StoreError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise StoreError(f"malformed header: {exc}", offset=8) from None
    if not isinstance(header, dict):
        raise StoreError("malformed header: not a JSON object", offset=8)

    meta = header.pop("__metadata__", {}) or {}
    if not isinstance(meta, dict) or not all(isinstance(v, str) for v in meta.values()):
        raise StoreError("malformed header: __metadata__ must map strings to strings", offset=8)
    payload_start = 8 + hlen
    payload = memoryview(buf)[payload_start:]

    entries = []
    spans = []
    for name, info in header.items():
        if not isinstance(info, dict) or not {"dtype", "shape", "data_offsets"} <= set(info):
            raise StoreError("malformed header entry", name, 8)
        if info["dtype"] != DTYPE:
            raise StoreError(f"unsupported dtype {info['dtype']!r}", name, 8)
        shape = info["shape"]
        begin, end = info["data_offsets"]
        if not (isinstance(shape, list) and all(isinstance(d, int) and d > 0 for d in shape) and shape):
            raise StoreError(f"invalid shape {shape!r}", name, payload_start + int(begin))
        expected = math.prod(shape) * 4
        if not (0 <= begin <= end <= len(payload)) or end - begin != expected:
            raise StoreError(
                f"payload length mismatch: shape {shape} needs {expected} bytes, "
                f"offsets give {end - begin} of {len(payload)} available",
                name,
                payload_start + begin,
            )
        spans.append((begin, end, name))
        data = np.frombuffer(payload[begin:end], dtype="<f4").astype(np.float32).reshape(shape)
        labels = meta.get(_ROW_LABEL_PREFIX + name)
        if labels is not None:
            try:
                labels = json.loads(labels)
            except json.JSONDecodeError:
                raise StoreError("malformed row labels", name, 8) from None
        entries.append(TensorEntry(name, data, labels))

    spans.sort()
    cursor = 0
    for begin, end, name in spans:
        if begin != cursor:
            raise StoreError("payload is not contiguous", name, payload_start + begin)
        cursor = end
    if cursor != len(payload):
        raise StoreError(
            f"payload length mismatch: {len(payload) - cursor} trailing bytes", offset=payload_start + cursor
        )

    orphans = [k for k in meta if k.startswith(_ROW_LABEL_PREFIX) and k[len(_ROW_LABEL_PREFIX):] not in header]
    if orphans:
        raise StoreError(f"row labels for unknown tensor {orphans[0][len(_ROW_LABEL_PREFIX):]!r}", offset=8)

    ckpt_id = meta.get("id") or default_id
    if not ckpt_id:
        raise StoreError("checkpoint has no id", offset=8)
    seed = meta.get("seed")
    return Checkpoint(
        id=ckpt_id,
        tensors=entries,
        domain=meta.get("domain"),
        phase=meta.get("phase"),
        paradigm=meta.get("paradigm"),
        lineage=meta.get("lineage"),
        seed=int(seed) if seed is not None else None,
    )


def load(path: str | Path) -> Checkpoint:
    """Read a checkpoint; the file stem stands in for a missing ``id``."""
    path = Path(path)
    return loads(path.read_bytes(), default_id=path.stem)


def from_arrays(
    ckpt_id: str,
    arrays: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]],
    row_labels: Mapping[str, Iterable[str]] | None = None,
    **meta,
) -> Checkpoint:
    """Convenience constructor from plain arrays (converted to float32)."""
    items = arrays.items() if isinstance(arrays, Mapping) else arrays
    row_labels = row_labels or {}
    entries = [
        TensorEntry(name, np.asarray(values, dtype=np.float32), row_labels.get(name)) for name, values in items
    ]
    return Checkpoint(id=ckpt_id, tensors=entries, **meta)
