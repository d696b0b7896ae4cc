"""The contextual grid: checkpoints indexed by (domain, phase) on a shared base."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

from .merge import average_merge
from .tensor_store import Checkpoint, load

DEFAULT_PHASES = ("t0", "t1", "t2")
BASE_KINDS = ("pretrained", "historical", "neutral")


class GridError(ValueError):
    pass


Cell = tuple[str, str]


def parse_cell(text: str) -> Cell:
    """``"Books:t1"`` -> ``("Books", "t1")``."""
    domain, sep, phase = text.rpartition(":")
    if not sep or not domain or not phase:
        raise GridError(f"cell must look like DOMAIN:PHASE, got {text!r}")
    return domain, phase


@dataclass(frozen=True)
class GridEntry:
    path: str
    id: str
    lineage: str | None = None
    paradigm: str | None = None


@dataclass(frozen=True)
class BaseStrategy:
    kind: str = "pretrained"
    historical: Cell | None = None
    neutral_members: tuple[Cell, ...] = ()

    def __post_init__(self):
        if self.kind not in BASE_KINDS:
            raise GridError(f"base kind must be one of {BASE_KINDS}, got {self.kind!r}")
        if self.kind == "historical" and self.historical is None:
            raise GridError("historical base needs a (domain, phase) cell")
        if self.kind == "neutral" and not self.neutral_members:
            raise GridError("neutral base needs at least one member cell")
        if self.historical is not None:
            object.__setattr__(self, "historical", tuple(self.historical))
        object.__setattr__(self, "neutral_members", tuple(tuple(m) for m in self.neutral_members))

    @classmethod
    def from_dict(cls, d: Mapping | None) -> BaseStrategy:
        d = dict(d or {"kind": "pretrained"})

        def cell(v):
            return parse_cell(v) if isinstance(v, str) else tuple(v)

        return cls(
            kind=d.get("kind", "pretrained"),
            historical=cell(d["historical"]) if d.get("historical") is not None else None,
            neutral_members=tuple(cell(m) for m in d.get("neutral_members", ())),
        )

    def to_dict(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.historical is not None:
            out["historical"] = ":".join(self.historical)
        if self.neutral_members:
            out["neutral_members"] = [":".join(m) for m in self.neutral_members]
        return out


@dataclass(frozen=True)
class GridManifest:
    """Registry of grid cells.  Paths are stored relative to ``root``."""

    pretrained_base: str
    pretrained_base_id: str
    root: Path = Path(".")
    phases: tuple[str, ...] = DEFAULT_PHASES
    entries: Mapping[Cell, GridEntry] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "phases", tuple(self.phases))
        object.__setattr__(self, "entries", dict(sorted(self.entries.items(), key=lambda kv: self._cell_key(kv[0]))))

    def _cell_key(self, cell: Cell):
        domain, phase = cell
        rank = self.phases.index(phase) if phase in self.phases else len(self.phases)
        return (domain, rank, phase)

    def phase_index(self, phase: str) -> int:
        try:
            return self.phases.index(phase)
        except ValueError:
            raise GridError(f"unknown phase {phase!r}; manifest phases are {list(self.phases)}") from None

    def domains(self) -> list[str]:
        return sorted({d for d, _ in self.entries})

    def ids(self) -> dict[str, Cell]:
        return {e.id: cell for cell, e in self.entries.items()}

    def path_of(self, cell: Cell) -> Path:
        try:
            return self.root / self.entries[tuple(cell)].path
        except KeyError:
            raise GridError(f"no checkpoint registered at {cell[0]}:{cell[1]}") from None

    def base_path(self) -> Path:
        return self.root / self.pretrained_base

    def lookup(self, cell: Cell) -> Checkpoint:
        return load(self.path_of(cell))

    def load_id(self, ckpt_id: str) -> Checkpoint:
        if ckpt_id == self.pretrained_base_id:
            return load(self.base_path())
        cells = self.ids()
        if ckpt_id not in cells:
            raise GridError(f"checkpoint id {ckpt_id!r} is not registered in the grid")
        return self.lookup(cells[ckpt_id])

    def validate(self) -> None:
        known = {self.pretrained_base_id} | {e.id for e in self.entries.values()}
        if len(known) != len(self.entries) + 1:
            raise GridError("checkpoint ids in the grid are not unique")
        for (domain, phase), e in self.entries.items():
            self.phase_index(phase)
            if e.lineage:
                for parent in e.lineage.split(","):
                    if parent not in known:
                        raise GridError(f"lineage {parent!r} of {domain}:{phase} does not resolve")

    def to_dict(self) -> dict:
        return {
            "pretrained_base": self.pretrained_base,
            "pretrained_base_id": self.pretrained_base_id,
            "phases": list(self.phases),
            "entries": [
                {"domain": d, "phase": p, "path": e.path, "id": e.id, "lineage": e.lineage, "paradigm": e.paradigm}
                for (d, p), e in self.entries.items()
            ],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> GridManifest:
        path = Path(path)
        try:
            d = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise GridError(f"malformed manifest {path}: {exc}") from None
        entries = {}
        for row in d.get("entries", []):
            cell = (row["domain"], row["phase"])
            if cell in entries:
                raise GridError(f"duplicate cell {cell[0]}:{cell[1]} in manifest")
            entries[cell] = GridEntry(row["path"], row["id"], row.get("lineage"), row.get("paradigm"))
        manifest = cls(
            pretrained_base=d["pretrained_base"],
            pretrained_base_id=d["pretrained_base_id"],
            root=path.parent,
            phases=tuple(d.get("phases", DEFAULT_PHASES)),
            entries=entries,
        )
        manifest.validate()
        return manifest


def _relative(path: Path, root: Path) -> str:
    return Path(os.path.relpath(Path(path).resolve(), Path(root).resolve())).as_posix()


def new_manifest(base_path: str | Path, root: str | Path | None = None, phases: Sequence[str] = DEFAULT_PHASES) -> GridManifest:
    base_path = Path(base_path)
    root = Path(root) if root is not None else base_path.parent
    base = load(base_path)
    return GridManifest(_relative(base_path, root), base.id, root, tuple(phases))


def register(manifest: GridManifest, domain: str, phase: str, path: str | Path, force: bool = False) -> GridManifest:
    """Return a new manifest with ``path`` registered at (domain, phase)."""
    manifest.phase_index(phase)
    cell = (domain, phase)
    if cell in manifest.entries and not force:
        raise GridError(f"cell {domain}:{phase} already registered (use force to replace)")
    try:
        ckpt = load(path)
    except (OSError, ValueError) as exc:
        raise GridError(f"cannot load {path}: {exc}") from None
    entries = dict(manifest.entries)
    entries[cell] = GridEntry(_relative(Path(path), manifest.root), ckpt.id, ckpt.lineage, ckpt.paradigm)
    out = replace(manifest, entries=entries)
    out.validate()
    return out


def resolve_base(manifest: GridManifest, strategy: BaseStrategy) -> Checkpoint:
    """Materialize the base checkpoint a merge should subtract from."""
    if strategy.kind == "pretrained":
        return load(manifest.base_path())
    if strategy.kind == "historical":
        return manifest.lookup(strategy.historical)
    members = [manifest.lookup(cell) for cell in strategy.neutral_members]
    return average_merge(members)
