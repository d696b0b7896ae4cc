"""Declarative merge recipes and their execution."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .grid import BaseStrategy, GridManifest, resolve_base
from .merge import (
    MergeError,
    TrimConfig,
    _common_prefix,
    _union_rows,
    alpha_merge,
    average_merge,
    linear_merge,
    subspace_merge,
    task_vector,
)
from .tensor_store import Checkpoint, load

METHODS = ("linear", "subspace", "alpha_pair", "average")


@dataclass(frozen=True)
class MergeRecipe:
    method: str
    inputs: tuple[str, ...]
    output_id: str
    weights: tuple[float, ...] = ()
    alpha: float | None = None
    trim: TrimConfig = field(default_factory=TrimConfig)
    base: BaseStrategy = field(default_factory=BaseStrategy)
    ties_disjoint_mean: bool = False
    base_term: bool = True

    def __post_init__(self):
        object.__setattr__(self, "inputs", tuple(self.inputs))
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.method not in METHODS:
            raise MergeError(f"method must be one of {METHODS}, got {self.method!r}")
        if not self.inputs:
            raise MergeError("recipe has no inputs")
        if self.method == "linear" and len(self.weights) != len(self.inputs):
            raise MergeError(f"linear recipe has {len(self.weights)} weights for {len(self.inputs)} inputs")
        if self.method == "alpha_pair":
            if len(self.inputs) != 2:
                raise MergeError("alpha_pair needs exactly two inputs")
            if self.alpha is None or not 0 <= self.alpha <= 1:
                raise MergeError(f"alpha_pair needs alpha in [0, 1], got {self.alpha}")
        if self.method == "subspace":
            self.trim.require_trim()

    @classmethod
    def from_dict(cls, d: Mapping) -> MergeRecipe:
        known = {
            "method", "inputs", "output_id", "weights", "alpha", "trim", "base",
            "ties_disjoint_mean", "base_term", "grid", "checkpoints",
        }
        unknown = set(d) - known
        if unknown:
            raise MergeError(f"unknown recipe fields: {sorted(unknown)}")
        try:
            return cls(
                method=d["method"],
                inputs=tuple(d["inputs"]),
                output_id=d.get("output_id") or "merged",
                weights=tuple(d.get("weights") or ()),
                alpha=d.get("alpha"),
                trim=TrimConfig.from_dict(d.get("trim")),
                base=BaseStrategy.from_dict(d.get("base")),
                ties_disjoint_mean=bool(d.get("ties_disjoint_mean", False)),
                base_term=bool(d.get("base_term", True)),
            )
        except KeyError as exc:
            raise MergeError(f"recipe is missing field {exc.args[0]!r}") from None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "inputs": list(self.inputs),
            "output_id": self.output_id,
            "weights": list(self.weights),
            "alpha": self.alpha,
            "trim": self.trim.to_dict(),
            "base": self.base.to_dict(),
            "ties_disjoint_mean": self.ties_disjoint_mean,
            "base_term": self.base_term,
        }


def _merge_tvs(recipe: MergeRecipe, base: Checkpoint, tvs, output_id: str, threads) -> Checkpoint:
    kw = dict(base_term=recipe.base_term, output_id=output_id, threads=threads)
    if recipe.method == "linear":
        return linear_merge(base, tvs, recipe.weights, **kw)
    if recipe.method == "subspace":
        return subspace_merge(base, tvs, recipe.trim, disjoint_mean=recipe.ties_disjoint_mean, **kw)
    return alpha_merge(base, tvs[0], tvs[1], recipe.alpha, recipe.trim, **kw)


def _union_table(recipe: MergeRecipe, base: Checkpoint, inputs: Sequence[Checkpoint], name: str, threads):
    entries = [c[name] for c in inputs]
    if not all(e.row_labels is not None and len(e.shape) == 2 for e in entries):
        raise MergeError(f"{name!r} differs across inputs but is not a labelled embedding table in all of them")
    shared_rows = _common_prefix([e.row_labels for e in entries])
    base_entry = base.tensors.get(name)
    if base_entry is not None and base_entry.row_labels is not None:
        prefix = base_entry.row_labels
        if len(prefix) <= shared_rows and all(e.row_labels[: len(prefix)] == prefix for e in entries):
            shared_rows = len(prefix)
        else:
            base_entry = None
    else:
        base_entry = None

    def sliced(ckpt_id, entry):
        return Checkpoint(id=ckpt_id, tensors=[entry.with_data(entry.data[:shared_rows], entry.row_labels[:shared_rows])])

    subs = [sliced(c.id, e) for c, e in zip(inputs, entries)]
    if base_entry is None:
        shared = average_merge(subs)[name].data
    else:
        sub_base = sliced(base.id, base_entry)
        shared = _merge_tvs(recipe, sub_base, [task_vector(sub_base, s) for s in subs], "shared", threads)[name].data
    return _union_rows(entries, shared_rows, shared)


def run_recipe(
    recipe: MergeRecipe,
    inputs: Sequence[Checkpoint],
    base: Checkpoint | None = None,
    threads: int | None = None,
) -> Checkpoint:
    """Execute ``recipe`` on already-loaded inputs (in recipe order) and base."""
    if [c.id for c in inputs] != list(recipe.inputs):
        raise MergeError("inputs do not match the recipe's input ids")
    if recipe.method == "average":
        out = average_merge(inputs, output_id=recipe.output_id, threads=threads)
        return out.evolve(lineage=",".join(recipe.inputs))
    if base is None:
        raise MergeError(f"method {recipe.method!r} needs a base checkpoint")
    tvs = [task_vector(base, c) for c in inputs]
    merged = _merge_tvs(recipe, base, tvs, recipe.output_id, threads)
    excluded = sorted(set().union(*(tv.excluded for tv in tvs)))
    if not excluded:
        return merged
    tensors = dict(merged.tensors)
    for name in excluded:
        tensors[name] = _union_table(recipe, base, inputs, name, threads)
    return merged.evolve(tensors=tensors)


def common_meta(inputs: Sequence[Checkpoint]) -> dict:
    out = {}
    for key in ("domain", "phase", "paradigm"):
        values = {getattr(c, key) for c in inputs}
        out[key] = values.pop() if len(values) == 1 else None
    return out


class CheckpointResolver:
    """Maps recipe ids to checkpoints through a grid manifest and/or an explicit path table."""

    def __init__(self, manifest: GridManifest | None = None, paths: Mapping[str, str | Path] | None = None):
        self.manifest = manifest
        self.paths = {k: Path(v) for k, v in (paths or {}).items()}

    @classmethod
    def for_recipe(cls, recipe_doc: Mapping, recipe_dir: Path) -> CheckpointResolver:
        manifest = GridManifest.load(recipe_dir / recipe_doc["grid"]) if recipe_doc.get("grid") else None
        paths = {k: recipe_dir / v for k, v in (recipe_doc.get("checkpoints") or {}).items()}
        return cls(manifest, paths)

    def get(self, ckpt_id: str) -> Checkpoint:
        if ckpt_id in self.paths:
            path = self.paths[ckpt_id]
            if not path.exists():
                raise MergeError(f"checkpoint {ckpt_id!r} not found at {path}")
            return load(path)
        if self.manifest is not None:
            return self.manifest.load_id(ckpt_id)
        raise MergeError(f"checkpoint {ckpt_id!r} cannot be resolved (no grid or path entry)")

    def base(self, strategy: BaseStrategy) -> Checkpoint:
        if self.manifest is None:
            if strategy.kind == "pretrained" and "base" in self.paths:
                return load(self.paths["base"])
            raise MergeError(f"a {strategy.kind!r} base needs a grid manifest")
        return resolve_base(self.manifest, strategy)


def execute(recipe_path: str | Path, threads: int | None = None) -> Checkpoint:
    recipe_path = Path(recipe_path)
    doc = json.loads(recipe_path.read_text())
    recipe = MergeRecipe.from_dict(doc)
    resolver = CheckpointResolver.for_recipe(doc, recipe_path.parent)
    inputs = [resolver.get(i) for i in recipe.inputs]
    base = None if recipe.method == "average" else resolver.base(recipe.base)
    out = run_recipe(recipe, inputs, base, threads)
    return out.evolve(**common_meta(inputs))
