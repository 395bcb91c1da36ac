"""Vocabularies, facts, snapshots and the on-disk dataset layout."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .errors import ConfigurationError, TripleParseError

log = logging.getLogger(__name__)

DATASET_FORMAT_VERSION = 1
SPLITS = ("train", "valid", "test")


class Fact(NamedTuple):
    subject: int
    relation: int
    object: int


class Vocabulary:
    """Interns names to dense handles in first-seen order. Handles are never reused."""

    def __init__(self, names: Iterable[str] = ()):
        self._names: list[str] = []
        self._index: dict[str, int] = {}
        for name in names:
            self.add(name)

    def add(self, name: str) -> int:
        handle = self._index.get(name)
        if handle is None:
            handle = len(self._names)
            self._index[name] = handle
            self._names.append(name)
        return handle

    def __getitem__(self, name: str) -> int:
        return self._index[name]

    def __contains__(self, name) -> bool:
        return name in self._index

    def __len__(self) -> int:
        return len(self._names)

    def name(self, handle: int) -> str:
        return self._names[handle]

    @property
    def names(self) -> list[str]:
        return list(self._names)


def as_fact_array(facts) -> np.ndarray:
    arr = np.asarray(facts, dtype=np.int64)
    if arr.size == 0:
        return np.zeros((0, 3), dtype=np.int64)
    return arr.reshape(-1, 3)


def load_triples(path, entities: Vocabulary, relations: Vocabulary) -> list[Fact]:
    """Read a tab-separated subject/relation/object file, interning names as they appear.

    Duplicate lines are dropped (a fact set has no multiplicity); the number dropped is logged.
    """
    path = Path(path)
    facts: list[Fact] = []
    seen: set[Fact] = set()
    duplicates = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TripleParseError(path, line_no, f"expected 3 tab-separated fields, got {len(parts)}")
            s, r, o = parts
            fact = Fact(entities.add(s), relations.add(r), entities.add(o))
            if fact in seen:
                duplicates += 1
                continue
            seen.add(fact)
            facts.append(fact)
    if duplicates:
        log.warning("%s: dropped %d duplicate triples", path, duplicates)
    return facts


@dataclass
class Snapshot:
    index: int
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray
    num_entities: int
    num_relations: int

    def __post_init__(self):
        self.train = as_fact_array(self.train)
        self.valid = as_fact_array(self.valid)
        self.test = as_fact_array(self.test)

    @property
    def delta_size(self) -> int:
        return len(self.train) + len(self.valid) + len(self.test)

    def all_facts(self) -> np.ndarray:
        return np.concatenate([self.train, self.valid, self.test])


@dataclass
class GrowthDataset:
    snapshots: list[Snapshot]
    entity_names: list[str]
    relation_names: list[str]
    meta: dict = field(default_factory=dict)

    @property
    def num_snapshots(self) -> int:
        return len(self.snapshots)

    def snapshot(self, i: int) -> Snapshot:
        if not 1 <= i <= len(self.snapshots):
            raise IndexError(f"snapshot index {i} out of range 1..{len(self.snapshots)}")
        return self.snapshots[i - 1]

    def facts_upto(self, i: int, splits=SPLITS) -> np.ndarray:
        parts = [getattr(s, split) for s in self.snapshots[:i] for split in splits]
        return np.concatenate(parts) if parts else as_fact_array([])

    def validate(self) -> None:
        """Raise ConfigurationError if any dataset invariant is violated."""
        seen: set[tuple] = set()
        prev_e = prev_r = 0
        for k, snap in enumerate(self.snapshots, 1):
            if snap.index != k:
                raise ConfigurationError(f"snapshot indices not contiguous: expected {k}, got {snap.index}")
            if snap.num_entities < prev_e or snap.num_relations < prev_r:
                raise ConfigurationError(f"vocabulary shrinks at snapshot {k}")
            prev_e, prev_r = snap.num_entities, snap.num_relations
            facts = snap.all_facts()
            if len(facts):
                if facts[:, [0, 2]].max() >= snap.num_entities or facts[:, 1].max() >= snap.num_relations:
                    raise ConfigurationError(f"snapshot {k} references a handle outside its vocabulary")
                if facts.min() < 0:
                    raise ConfigurationError(f"snapshot {k} contains a negative handle")
            for fact in map(tuple, facts.tolist()):
                if fact in seen:
                    raise ConfigurationError(f"fact {fact} appears more than once (snapshot {k})")
                seen.add(fact)
        if self.snapshots:
            if self.snapshots[-1].num_entities > len(self.entity_names):
                raise ConfigurationError("entity names table is shorter than the final vocabulary")
            if self.snapshots[-1].num_relations > len(self.relation_names):
                raise ConfigurationError("relation names table is shorter than the final vocabulary")

    def save(self, root) -> None:
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        _write_names(root / "entities.tsv", self.entity_names)
        _write_names(root / "relations.tsv", self.relation_names)
        for snap in self.snapshots:
            sdir = root / f"snapshot{snap.index}"
            sdir.mkdir(exist_ok=True)
            for split in SPLITS:
                arr = getattr(snap, split)
                with open(sdir / f"{split}.tsv", "w", encoding="utf-8") as fh:
                    fh.writelines(f"{s}\t{r}\t{o}\n" for s, r, o in arr.tolist())
        meta = dict(self.meta)
        meta.update(
            format_version=DATASET_FORMAT_VERSION,
            num_snapshots=self.num_snapshots,
            num_entities=[s.num_entities for s in self.snapshots],
            num_relations=[s.num_relations for s in self.snapshots],
        )
        with open(root / "meta.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, root) -> "GrowthDataset":
        root = Path(root)
        if not root.is_dir():
            raise FileNotFoundError(f"dataset directory not found: {root}")
        with open(root / "meta.json", encoding="utf-8") as fh:
            meta = json.load(fh)
        snapshots = []
        for k in range(1, meta["num_snapshots"] + 1):
            splits = {split: _read_handles(root / f"snapshot{k}" / f"{split}.tsv") for split in SPLITS}
            snapshots.append(Snapshot(k, num_entities=meta["num_entities"][k - 1],
                                      num_relations=meta["num_relations"][k - 1], **splits))
        ds = cls(snapshots, _read_names(root / "entities.tsv"), _read_names(root / "relations.tsv"), meta)
        ds.validate()
        return ds


def delta_stats(ds: GrowthDataset, i: int) -> tuple[int, int, int]:
    """(new facts, cumulative entities, cumulative relations) for snapshot ``i`` (1-based)."""
    snap = ds.snapshot(i)
    return snap.delta_size, snap.num_entities, snap.num_relations


def _write_names(path: Path, names: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{k}\t{name}\n" for k, name in enumerate(names))


def _read_names(path: Path) -> list[str]:
    names = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            handle, _, name = line.partition("\t")
            if int(handle) != len(names):
                raise TripleParseError(path, line_no, f"handle {handle} out of order")
            names.append(name)
    return names


def _read_handles(path: Path) -> np.ndarray:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise TripleParseError(path, line_no, f"expected 3 tab-separated fields, got {len(parts)}")
            rows.append([int(p) for p in parts])
    return as_fact_array(rows)
