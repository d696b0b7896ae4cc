"""Merging algebra over checkpoints: task vectors, weighted and trimmed merges.

Conventions shared by every operation here:

* arithmetic is carried out in float64 and rounded to float32 once, when the
  merged tensor is stored;
* a coordinate whose combined delta is exactly zero keeps the base value
  bit-for-bit (so zero weights, ``scale=0`` or fully trimmed coordinates never
  disturb ``-0.0`` or NaN payloads in the base);
* multi-input sums are accumulated sequentially in input order, except
  :func:`average_merge`, which sorts per coordinate so its result does not
  depend on input order at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Mapping, Sequence

import numpy as np

from . import rng
from ._parallel import pmap, thread_count
from .tensor_store import Checkpoint, StoreError, TensorEntry, diff_keys, NAME_RE

__all__ = [
    "MergeError",
    "TaskVector",
    "TrimConfig",
    "task_vector",
    "apply",
    "l1_norm",
    "linear_merge",
    "ties_keep_count",
    "ties_trim",
    "sign_elect",
    "dare_trim",
    "trim",
    "subspace_merge",
    "alpha_merge",
    "average_merge",
    "vocab_union_merge",
]

ORDERS = ("dare_then_ties", "ties_then_dare")
DARE_CHUNK = 1 << 16


class MergeError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class TaskVector:
    """``target - base`` per shared tensor.

    ``excluded`` lists embedding tables that could not be subtracted row-wise
    (different vocabularies); those go through :func:`vocab_union_merge`.
    """

    base_id: str
    target_id: str
    tensors: Mapping[str, np.ndarray]
    excluded: frozenset[str] = frozenset()

    def __post_init__(self):
        ordered = {}
        for name in sorted(self.tensors):
            if not NAME_RE.fullmatch(name):
                raise StoreError(f"invalid tensor name {name!r}")
            arr = np.asarray(self.tensors[name])
            if arr.dtype != np.float32:
                arr = arr.astype(np.float32)
            arr.setflags(write=False)
            ordered[name] = arr
        object.__setattr__(self, "tensors", ordered)
        object.__setattr__(self, "excluded", frozenset(self.excluded))

    def names(self) -> list[str]:
        return list(self.tensors)

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> TaskVector:
        return TaskVector(self.base_id, self.target_id, tensors, self.excluded)

    def scaled(self, factor: float) -> TaskVector:
        return self.with_tensors({n: (t.astype(np.float64) * factor).astype(np.float32) for n, t in self.tensors.items()})

    def flat(self, name: str) -> np.ndarray:
        return self.tensors[name].reshape(-1)


@dataclass(frozen=True)
class TrimConfig:
    """Trimming applied to each task vector before a subspace or alpha merge."""

    ties_keep_percent: float | None = None
    ties_sign_election: bool = False
    dare_drop_prob: float | None = None
    seed: int | None = None
    order: str = "dare_then_ties"

    def __post_init__(self):
        x = self.ties_keep_percent
        if x is not None and not 0 < x <= 100:
            raise MergeError(f"ties_keep_percent must be in (0, 100], got {x}")
        p = self.dare_drop_prob
        if p is not None:
            if not 0 <= p < 1:
                raise MergeError(f"dare_drop_prob must be in [0, 1), got {p}")
            if self.seed is None:
                raise MergeError("DARE trimming needs an explicit seed")
        if self.order not in ORDERS:
            raise MergeError(f"order must be one of {ORDERS}, got {self.order!r}")

    @property
    def is_empty(self) -> bool:
        return self.ties_keep_percent is None and self.dare_drop_prob is None and not self.ties_sign_election

    def require_trim(self) -> None:
        if self.ties_keep_percent is None and self.dare_drop_prob is None:
            raise MergeError("subspace merge needs TIES and/or DARE trimming configured")

    @classmethod
    def from_dict(cls, d: Mapping | None) -> TrimConfig:
        d = dict(d or {})
        unknown = set(d) - {"ties_keep_percent", "ties_sign_election", "dare_drop_prob", "seed", "order"}
        if unknown:
            raise MergeError(f"unknown trim fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return {
            "ties_keep_percent": self.ties_keep_percent,
            "ties_sign_election": self.ties_sign_election,
            "dare_drop_prob": self.dare_drop_prob,
            "seed": self.seed,
            "order": self.order,
        }


def _is_table(entry: TensorEntry) -> bool:
    return entry.row_labels is not None and len(entry.shape) == 2


def task_vector(base: Checkpoint, target: Checkpoint) -> TaskVector:
    """Elementwise ``target - base``, skipping (and recording) unaligned embedding tables."""
    keys = diff_keys(base, target)
    excluded = set()
    for name in keys.only_a | keys.only_b:
        entry = base[name] if name in base else target[name]
        if entry.row_labels is None:
            raise MergeError(f"tensor {name!r} exists in only one of {base.id!r}, {target.id!r}")
        excluded.add(name)
    tensors = {}
    for name in keys.shared:
        a, b = base[name], target[name]
        aligned = a.shape == b.shape and a.row_labels == b.row_labels
        if not aligned:
            if _is_table(a) and _is_table(b):
                excluded.add(name)
                continue
            raise MergeError(f"shape mismatch for {name!r}: {a.shape} vs {b.shape}")
        tensors[name] = b.data - a.data
    return TaskVector(base.id, target.id, tensors, frozenset(excluded))


def _combine(base_arr: np.ndarray, delta: np.ndarray, base_term: bool = True) -> np.ndarray:
    if not base_term:
        return delta.astype(np.float32)
    out = (base_arr.astype(np.float64) + delta).astype(np.float32)
    return np.where(delta == 0, base_arr, out)


def _check_against(base: Checkpoint, tv: TaskVector) -> None:
    for name, arr in tv.tensors.items():
        if name not in base:
            raise MergeError(f"task vector tensor {name!r} missing from base {base.id!r}")
        if base[name].shape != arr.shape:
            raise MergeError(f"shape mismatch for {name!r}: base {base[name].shape} vs task vector {arr.shape}")


def _assemble(base: Checkpoint, merged: Mapping[str, np.ndarray], output_id: str, lineage: str, **meta) -> Checkpoint:
    entries = []
    for name, entry in base.tensors.items():
        entries.append(entry.with_data(merged[name]) if name in merged else entry)
    fields = dict(domain=base.domain, phase=base.phase, paradigm=base.paradigm)
    fields.update(meta)
    return Checkpoint(id=output_id, tensors=entries, lineage=lineage, **fields)


def apply(base: Checkpoint, tv: TaskVector, scale: float = 1.0, output_id: str | None = None) -> Checkpoint:
    """``base + scale * tv``; lineage points at the base."""
    _check_against(base, tv)
    merged = {name: _combine(base[name].data, arr.astype(np.float64) * scale) for name, arr in tv.tensors.items()}
    return _assemble(base, merged, output_id or f"{tv.target_id}@{scale:g}", base.id)


def l1_norm(tv: TaskVector) -> tuple[dict[str, float], float]:
    per_tensor = {name: float(np.abs(arr.astype(np.float64)).sum()) for name, arr in tv.tensors.items()}
    return per_tensor, math.fsum(per_tensor.values())


def _shared_names(tvs: Sequence[TaskVector]) -> list[str]:
    names: set[str] = set()
    for tv in tvs:
        names.update(tv.tensors)
    return sorted(names)


def _lineage(tvs: Sequence[TaskVector]) -> str:
    return ",".join(tv.target_id for tv in tvs)


def linear_merge(
    base: Checkpoint,
    tvs: Sequence[TaskVector],
    weights: Sequence[float],
    *,
    base_term: bool = True,
    output_id: str | None = None,
    threads: int | None = None,
) -> Checkpoint:
    """``base + sum_n weights[n] * tvs[n]``."""
    if not tvs:
        raise MergeError("linear_merge needs at least one task vector")
    if len(weights) != len(tvs):
        raise MergeError(f"{len(weights)} weights for {len(tvs)} task vectors")
    for tv in tvs:
        _check_against(base, tv)

    def one(name):
        acc = np.zeros(base[name].shape, dtype=np.float64)
        for w, tv in zip(weights, tvs):
            if name in tv.tensors:
                acc += float(w) * tv.tensors[name].astype(np.float64)
        return _combine(base[name].data, acc, base_term)

    names = _shared_names(tvs)
    merged = dict(zip(names, pmap(one, names, threads)))
    return _assemble(base, merged, output_id or f"linear({_lineage(tvs)})", _lineage(tvs))


def ties_keep_count(numel: int, keep_percent: float) -> int:
    """``ceil(X/100 * numel)`` computed without float round-off."""
    frac = Fraction(keep_percent).limit_denominator(10**9)
    return min(numel, math.ceil(frac * numel / 100))


def _ties_flat(flat: np.ndarray, keep_percent: float) -> np.ndarray:
    k = ties_keep_count(flat.size, keep_percent)
    if k >= flat.size:
        return flat.copy()
    # stable sort on -|v|: equal magnitudes stay in flat-index order
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out


def ties_trim(tv: TaskVector, keep_percent: float, threads: int | None = None) -> TaskVector:
    """Keep the top ``keep_percent``% magnitudes of every tensor, zero the rest."""
    if not 0 < keep_percent <= 100:
        raise MergeError(f"keep percent must be in (0, 100], got {keep_percent}")
    names = tv.names()
    out = pmap(lambda n: _ties_flat(tv.flat(n), keep_percent).reshape(tv.tensors[n].shape), names, threads)
    return tv.with_tensors(dict(zip(names, out)))


def _seq_sum(arrays: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.zeros(arrays[0].shape, dtype=np.float64)
    for a in arrays:
        acc += a.astype(np.float64)
    return acc


def sign_elect(tvs: Sequence[TaskVector]) -> dict[str, np.ndarray]:
    """Per coordinate, the sign carrying more total magnitude (0 on an exact tie)."""
    if not tvs:
        raise MergeError("sign_elect needs at least one task vector")
    shapes: dict[str, tuple] = {}
    for tv in tvs:
        for name, arr in tv.tensors.items():
            if shapes.setdefault(name, arr.shape) != arr.shape:
                raise MergeError(f"shape mismatch for {name!r} across task vectors")
    # positive mass minus negative mass is the plain signed sum
    return {
        name: np.sign(_seq_sum([tv.tensors[name] for tv in tvs if name in tv.tensors])).astype(np.int8)
        for name in sorted(shapes)
    }


def _dare_flat(flat: np.ndarray, p: float, key: int, threads: int | None) -> np.ndarray:
    scale = 1.0 / (1.0 - p)
    out = np.empty_like(flat)
    bounds = [(s, min(s + DARE_CHUNK, flat.size)) for s in range(0, flat.size, DARE_CHUNK)]

    def chunk(span):
        lo, hi = span
        keep = rng.uniform(key, lo, hi) >= p
        vals = (flat[lo:hi].astype(np.float64) * scale).astype(np.float32)
        out[lo:hi] = np.where(keep, vals, np.float32(0))

    pmap(chunk, bounds, threads)
    return out


def dare_trim(tv: TaskVector, p: float, seed: int, threads: int | None = None) -> TaskVector:
    """Drop each coordinate with probability ``p`` and rescale survivors by ``1/(1-p)``.

    The mask for coordinate ``i`` of tensor ``name`` depends only on
    ``(seed ^ fnv1a64(name), i)``.
    """
    if not 0 <= p < 1:
        raise MergeError(f"drop probability must be in [0, 1), got {p}")
    if p == 0:
        return tv
    workers = thread_count(threads)
    out = {}
    for name in tv.names():
        key = rng.tensor_key(seed, name)
        out[name] = _dare_flat(tv.flat(name), p, key, workers).reshape(tv.tensors[name].shape)
    return tv.with_tensors(out)


def trim(tv: TaskVector, cfg: TrimConfig, stream: int = 0, threads: int | None = None) -> TaskVector:
    """Apply the configured TIES top-k and/or DARE steps (no sign election).

    ``stream`` selects an independent DARE seed for the n-th input of a merge,
    so two task vectors never share a drop mask.
    """
    steps = ["dare", "ties"] if cfg.order == "dare_then_ties" else ["ties", "dare"]
    for step in steps:
        if step == "dare" and cfg.dare_drop_prob is not None:
            tv = dare_trim(tv, cfg.dare_drop_prob, rng.derive_seed(cfg.seed, stream), threads)
        elif step == "ties" and cfg.ties_keep_percent is not None:
            tv = ties_trim(tv, cfg.ties_keep_percent, threads)
    return tv


def _trim_all(tvs: Sequence[TaskVector], cfg: TrimConfig, threads) -> list[dict[str, np.ndarray]]:
    trimmed = [trim(tv, cfg, n, threads) for n, tv in enumerate(tvs)]
    if not cfg.ties_sign_election:
        return [dict(t.tensors) for t in trimmed]
    elected = sign_elect(trimmed)
    out = []
    for t in trimmed:
        out.append({n: np.where(np.sign(a) == elected[n], a, np.float32(0)) for n, a in t.tensors.items()})
    return out


def subspace_merge(
    base: Checkpoint,
    tvs: Sequence[TaskVector],
    trim_cfg: TrimConfig,
    *,
    disjoint_mean: bool = False,
    base_term: bool = True,
    output_id: str | None = None,
    threads: int | None = None,
) -> Checkpoint:
    """``base + (1/N) * sum_n Trim(tvs[n])``.

    With ``disjoint_mean`` the sum is divided per coordinate by the number of
    surviving nonzero values instead of by ``N`` (original TIES behaviour).
    """
    if not tvs:
        raise MergeError("subspace_merge needs at least one task vector")
    for tv in tvs:
        _check_against(base, tv)
    trimmed = _trim_all(tvs, trim_cfg, threads)
    n_inputs = len(tvs)

    def one(name):
        parts = [t[name] for t in trimmed if name in t]
        acc = _seq_sum(parts)
        if disjoint_mean:
            count = np.zeros(acc.shape, dtype=np.float64)
            for a in parts:
                count += a != 0
            delta = np.divide(acc, count, out=np.zeros_like(acc), where=count > 0)
        else:
            delta = acc / n_inputs
        return _combine(base[name].data, delta, base_term)

    names = _shared_names(tvs)
    merged = dict(zip(names, pmap(one, names, threads)))
    return _assemble(base, merged, output_id or f"subspace({_lineage(tvs)})", _lineage(tvs))


def alpha_merge(
    base: Checkpoint,
    tv_i: TaskVector,
    tv_j: TaskVector,
    alpha: float,
    trim_cfg: TrimConfig,
    *,
    base_term: bool = True,
    output_id: str | None = None,
    threads: int | None = None,
) -> Checkpoint:
    """``base + alpha * Trim(tv_i) + (1 - alpha) * Trim(tv_j)``."""
    if not 0 <= alpha <= 1:
        raise MergeError(f"alpha must be in [0, 1], got {alpha}")
    for tv in (tv_i, tv_j):
        _check_against(base, tv)
    u, v = _trim_all([tv_i, tv_j], trim_cfg, threads)
    beta = 1.0 - alpha

    def one(name):
        delta = np.zeros(base[name].shape, dtype=np.float64)
        if name in u:
            delta = alpha * u[name].astype(np.float64)
        if name in v:
            delta = delta + beta * v[name].astype(np.float64)
        return _combine(base[name].data, delta, base_term)

    names = _shared_names([tv_i, tv_j])
    merged = dict(zip(names, pmap(one, names, threads)))
    lineage = _lineage([tv_i, tv_j])
    return _assemble(base, merged, output_id or f"alpha{alpha:g}({lineage})", lineage)


def _order_free_mean(arrays: Sequence[np.ndarray]) -> np.ndarray:
    stacked = np.sort(np.stack([a.astype(np.float64) for a in arrays]), axis=0)
    acc = np.zeros(stacked.shape[1:], dtype=np.float64)
    for row in stacked:
        acc += row
    return (acc / len(arrays)).astype(np.float32)


def _common_prefix(label_lists: Sequence[Sequence[str]]) -> int:
    n = 0
    for column in zip(*label_lists):
        if any(c != column[0] for c in column):
            break
        n += 1
    return n


def _union_rows(entries: Sequence[TensorEntry], shared_rows: int, shared: np.ndarray) -> TensorEntry:
    first = entries[0]
    labels = list(first.row_labels[:shared_rows])
    seen = set(labels)
    blocks = [np.asarray(shared, dtype=np.float32)]
    for e in entries:
        extra = e.row_labels[shared_rows:]
        overlap = seen.intersection(extra)
        if overlap:
            raise MergeError(f"expanded row labels overlap in {first.name!r}: {sorted(overlap)[:5]}")
        seen.update(extra)
        labels.extend(extra)
        blocks.append(e.data[shared_rows:])
    return TensorEntry(first.name, np.concatenate(blocks, axis=0), labels)


def _check_tables(entries: Sequence[TensorEntry], shared_rows: int) -> None:
    name = entries[0].name
    for e in entries:
        if not _is_table(e):
            raise MergeError(f"{e.name!r} is not a 2-D labelled embedding table")
        if e.shape[1] != entries[0].shape[1]:
            raise MergeError(f"embedding width mismatch in {name!r}")
        if shared_rows > e.shape[0]:
            raise MergeError(f"{shared_rows} shared rows but {name!r} has only {e.shape[0]}")
    prefix = entries[0].row_labels[:shared_rows]
    for e in entries[1:]:
        if e.row_labels[:shared_rows] != prefix:
            raise MergeError(f"shared-prefix row labels differ in {name!r}")


def vocab_union_merge(
    emb_i: TensorEntry,
    emb_j: TensorEntry,
    shared_rows: int,
    merge_shared: Callable[[np.ndarray, np.ndarray], np.ndarray] | None = None,
) -> TensorEntry:
    """Merge two embedding tables that share a base vocabulary prefix.

    The first ``shared_rows`` rows are combined with ``merge_shared`` (default:
    elementwise mean); rows past the prefix are kept verbatim, ``emb_i``'s
    first, then ``emb_j``'s.
    """
    _check_tables([emb_i, emb_j], shared_rows)
    si, sj = emb_i.data[:shared_rows], emb_j.data[:shared_rows]
    if merge_shared is None:
        shared = _order_free_mean([si, sj])
    else:
        shared = np.asarray(merge_shared(si, sj), dtype=np.float32)
        if shared.shape != si.shape:
            raise MergeError(f"merged shared rows have shape {shared.shape}, expected {si.shape}")
    return _union_rows([emb_i, emb_j], shared_rows, shared)


def average_merge(ckpts: Sequence[Checkpoint], output_id: str | None = None, threads: int | None = None) -> Checkpoint:
    """Elementwise mean; independent of input order down to the last bit.

    Labelled embedding tables whose vocabularies differ are unioned: the
    common label prefix is averaged, the remaining rows are appended.
    """
    if not ckpts:
        raise MergeError("average_merge needs at least one checkpoint")
    ids = sorted(c.id for c in ckpts)
    ordered = sorted(ckpts, key=lambda c: c.id)
    names = set(ordered[0].tensors)
    for c in ordered[1:]:
        if set(c.tensors) != names:
            raise MergeError(f"tensor names differ between {ordered[0].id!r} and {c.id!r}")

    def one(name):
        entries = [c[name] for c in ordered]
        if all(e.shape == entries[0].shape and e.row_labels == entries[0].row_labels for e in entries):
            return entries[0].with_data(_order_free_mean([e.data for e in entries]))
        if not all(_is_table(e) for e in entries):
            raise MergeError(f"shape mismatch for {name!r} across checkpoints")
        shared_rows = _common_prefix([e.row_labels for e in entries])
        _check_tables(entries, shared_rows)
        shared = _order_free_mean([e.data[:shared_rows] for e in entries])
        return _union_rows(entries, shared_rows, shared)

    merged = pmap(one, sorted(names), threads)
    first = ordered[0]
    common = {
        key: getattr(first, key) if all(getattr(c, key) == getattr(first, key) for c in ordered) else None
        for key in ("domain", "phase", "paradigm")
    }
    return Checkpoint(
        id=output_id or f"avg({','.join(ids)})",
        tensors=merged,
        lineage=",".join(ids),
        **common,
    )
