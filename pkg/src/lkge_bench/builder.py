"""Construction of Entity/Relation/Fact/Hybrid growth sequences from a static KG.

Three phases: seeding (a few random facts), expanding (grow the snapshot until the
variant's quota is met, or for Hybrid until a random stop), and dividing each new-fact
set into train/valid/test.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import BuilderDeadlockError, ConfigurationError
from .kg import GrowthDataset, Snapshot, Vocabulary, as_fact_array, load_triples

log = logging.getLogger(__name__)

VARIANTS = ("entity", "relation", "fact", "hybrid")
RNG_NAME = "numpy.PCG64"


@dataclass
class BuilderConfig:
    variant: str
    num_snapshots: int = 5
    seed: int = 0
    split_ratio: tuple = (3, 1, 1)
    seed_facts: int = 10
    hybrid_stop_numerator: int = 5
    # None: closure only for the entity variant
    closure_on_quota: bool | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.num_snapshots < 2:
            raise ConfigurationError("num_snapshots must be >= 2")
        self.split_ratio = tuple(int(x) for x in self.split_ratio)
        if len(self.split_ratio) != 3 or min(self.split_ratio) <= 0:
            raise ConfigurationError("split_ratio must be three positive integers")
        if self.seed_facts < 1:
            raise ConfigurationError("seed_facts must be >= 1")
        if self.hybrid_stop_numerator < 1:
            raise ConfigurationError("hybrid_stop_numerator must be >= 1")

    @property
    def closure(self) -> bool:
        if self.closure_on_quota is None:
            return self.variant == "entity"
        return self.closure_on_quota


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


class _Bag:
    """Set of small non-negative ints with O(1) add/remove and uniform random pop."""

    def __init__(self, capacity: int):
        self._items: list[int] = []
        self._pos = np.full(capacity, -1, dtype=np.int64)

    def __len__(self):
        return len(self._items)

    def __contains__(self, x: int) -> bool:
        return self._pos[x] >= 0

    def add(self, x: int) -> None:
        if self._pos[x] < 0:
            self._pos[x] = len(self._items)
            self._items.append(x)

    def remove(self, x: int) -> None:
        p = self._pos[x]
        if p < 0:
            return
        last = self._items.pop()
        if last != x:
            self._items[p] = last
            self._pos[last] = p
        self._pos[x] = -1

    def pop_random(self, rng: np.random.Generator) -> int:
        x = self._items[int(rng.integers(len(self._items)))]
        self.remove(x)
        return x

    def items(self) -> list[int]:
        return list(self._items)


def _incidence(keys: np.ndarray, size: int) -> list[np.ndarray]:
    """For each key value, the sorted indices of rows containing it (rows deduplicated)."""
    rows, cols = keys
    order = np.lexsort((rows, cols))
    rows, cols = rows[order], cols[order]
    keep = np.ones(len(rows), dtype=bool)
    keep[1:] = (rows[1:] != rows[:-1]) | (cols[1:] != cols[:-1])
    rows, cols = rows[keep], cols[keep]
    bounds = np.searchsorted(cols, np.arange(size + 1))
    return [rows[bounds[k]:bounds[k + 1]] for k in range(size)]


class GrowthState:
    """Mutable bookkeeping while snapshots are grown; all ids are base-file handles."""

    def __init__(self, base: np.ndarray, num_entities: int, num_relations: int):
        self.base = base
        self.num_entities = num_entities
        self.num_relations = num_relations
        m = len(base)
        idx = np.arange(m)
        self.by_entity = _incidence((np.concatenate([idx, idx]), np.concatenate([base[:, 0], base[:, 2]])),
                                    num_entities)
        self.by_relation = _incidence((idx, base[:, 1]), num_relations)
        self.included = np.zeros(m, dtype=bool)
        self.entity_seen = np.zeros(num_entities, dtype=bool)
        self.relation_seen = np.zeros(num_relations, dtype=bool)
        self.fact_order: list[int] = []
        self.entity_order: list[int] = []
        self.relation_order: list[int] = []
        # cumulative (facts, entities, relations) counts at each sealed snapshot
        self.boundaries: list[tuple[int, int, int]] = []
        self.frontier = _Bag(m)
        self.deferred_draws = 0

    @property
    def num_facts(self) -> int:
        return len(self.fact_order)

    def see_entity(self, e: int) -> bool:
        if self.entity_seen[e]:
            return False
        self.entity_seen[e] = True
        self.entity_order.append(e)
        for f in self.by_entity[e]:
            if not self.included[f]:
                self.frontier.add(int(f))
        return True

    def see_relation(self, r: int) -> bool:
        if self.relation_seen[r]:
            return False
        self.relation_seen[r] = True
        self.relation_order.append(r)
        return True

    def include(self, f: int) -> None:
        if self.included[f]:
            return
        self.included[f] = True
        self.frontier.remove(f)
        self.fact_order.append(f)
        s, r, o = self.base[f]
        self.see_entity(int(s))
        self.see_relation(int(r))
        self.see_entity(int(o))

    def seal(self) -> None:
        self.boundaries.append((len(self.fact_order), len(self.entity_order), len(self.relation_order)))

    def absorb_remaining(self, rng: np.random.Generator) -> None:
        """Final snapshot: the whole KG."""
        for f in rng.permutation(np.flatnonzero(~self.included)):
            self.include(int(f))
        for e in np.flatnonzero(~self.entity_seen):
            self.see_entity(int(e))
        for r in np.flatnonzero(~self.relation_seen):
            self.see_relation(int(r))
        self.seal()


def seed_phase(base: np.ndarray, num_entities: int, num_relations: int, cfg: BuilderConfig,
               rng: np.random.Generator) -> GrowthState:
    base = as_fact_array(base)
    if len(base) < cfg.seed_facts:
        raise ConfigurationError(f"base KG has {len(base)} facts, fewer than seed_facts={cfg.seed_facts}")
    state = GrowthState(base, num_entities, num_relations)
    for f in rng.choice(len(base), size=cfg.seed_facts, replace=False):
        state.include(int(f))
    return state


def _quota_met(state: GrowthState, variant: str, i: int, n: int) -> bool:
    if variant == "entity":
        return n * len(state.entity_order) >= i * state.num_entities
    if variant == "relation":
        return n * len(state.relation_order) >= i * state.num_relations
    return n * state.num_facts >= i * len(state.base)


def expand_centric(state: GrowthState, cfg: BuilderConfig, rng: np.random.Generator) -> GrowthState:
    n = cfg.num_snapshots
    base = state.base
    for i in range(1, n):
        while not _quota_met(state, cfg.variant, i, n):
            if not len(state.frontier):
                remaining = int((~state.included).sum())
                raise BuilderDeadlockError(
                    f"snapshot {i}: no remaining fact touches a seen entity but the {cfg.variant} quota is "
                    f"unmet; {remaining} facts and {int((~state.entity_seen).sum())} entities are disconnected",
                    remaining_facts=remaining, remaining_entities=int((~state.entity_seen).sum()))
            state.include(state.frontier.pop_random(rng))
        if cfg.closure:
            closed = [f for f in state.frontier.items()
                      if state.entity_seen[base[f, 0]] and state.entity_seen[base[f, 2]]]
            for f in sorted(closed):
                state.include(f)
        state.seal()
    state.absorb_remaining(rng)
    return state


def expand_hybrid(state: GrowthState, cfg: BuilderConfig, rng: np.random.Generator) -> GrowthState:
    base = state.base
    ne, nr, m = state.num_entities, state.num_relations, len(base)
    universe = ne + nr + m
    stop_p = cfg.hybrid_stop_numerator / universe

    missing = (~state.relation_seen[base[:, 1]]).astype(np.int64)
    missing += ~state.entity_seen[base[:, 0]]
    missing += (base[:, 2] != base[:, 0]) & ~state.entity_seen[base[:, 2]]

    pool = _Bag(universe)
    admissible = _Bag(m)
    pool_facts = 0
    for e in np.flatnonzero(~state.entity_seen):
        pool.add(int(e))
    for r in np.flatnonzero(~state.relation_seen):
        pool.add(ne + int(r))
    for f in np.flatnonzero(~state.included):
        pool.add(ne + nr + int(f))
        pool_facts += 1
        if missing[f] == 0:
            admissible.add(int(f))

    def mark_seen(facts):
        for f in facts:
            missing[f] -= 1
            if missing[f] == 0 and not state.included[f]:
                admissible.add(int(f))

    def take_fact(f):
        nonlocal pool_facts
        admissible.remove(f)
        pool.remove(ne + nr + f)
        pool_facts -= 1
        state.include(f)

    for _ in range(1, cfg.num_snapshots):
        while len(pool):
            x = pool.pop_random(rng)
            if x < ne:
                state.see_entity(x)
                mark_seen(state.by_entity[x])
            elif x < ne + nr:
                state.see_relation(x - ne)
                mark_seen(state.by_relation[x - ne])
            else:
                f = x - ne - nr
                pool.add(x)
                if missing[f] == 0:
                    take_fact(f)
                elif len(admissible):
                    take_fact(admissible.pop_random(rng))
                else:
                    state.deferred_draws += 1
                    if len(pool) == pool_facts:
                        raise BuilderDeadlockError(
                            "hybrid expansion: pool holds only inadmissible facts",
                            remaining_facts=pool_facts)
            if rng.random() < stop_p:
                break
        state.seal()
    state.absorb_remaining(rng)
    return state


def split_sizes(k: int, ratio=(3, 1, 1)) -> tuple[int, int, int]:
    """Train/valid/test sizes for ``k`` facts: valid and test are floored, train takes the rest."""
    total = sum(ratio)
    if k < total:
        return k, 0, 0
    valid = k * ratio[1] // total
    test = k * ratio[2] // total
    return k - valid - test, valid, test


def divide(state: GrowthState, cfg: BuilderConfig, rng: np.random.Generator,
           entity_names=None, relation_names=None) -> GrowthDataset:
    """Relabel handles in construction order and split every new-fact set."""
    ent_map = np.empty(state.num_entities, dtype=np.int64)
    ent_map[state.entity_order] = np.arange(len(state.entity_order))
    rel_map = np.empty(state.num_relations, dtype=np.int64)
    rel_map[state.relation_order] = np.arange(len(state.relation_order))
    base = state.base
    relabeled = np.stack([ent_map[base[:, 0]], rel_map[base[:, 1]], ent_map[base[:, 2]]], axis=1)

    snapshots = []
    start = 0
    for k, (end, n_ent, n_rel) in enumerate(state.boundaries, 1):
        delta = relabeled[state.fact_order[start:end]]
        start = end
        n_train, n_valid, _ = split_sizes(len(delta), cfg.split_ratio)
        if len(delta) < sum(cfg.split_ratio):
            log.warning("snapshot %d has only %d new facts; all assigned to train", k, len(delta))
        delta = delta[rng.permutation(len(delta))]
        snapshots.append(Snapshot(
            k,
            train=delta[:n_train],
            valid=delta[n_train:n_train + n_valid],
            test=delta[n_train + n_valid:],
            num_entities=n_ent,
            num_relations=n_rel,
        ))

    if entity_names is None:
        entity_names = [str(e) for e in range(state.num_entities)]
    if relation_names is None:
        relation_names = [str(r) for r in range(state.num_relations)]
    meta = {
        "builder": {**asdict(cfg), "split_ratio": list(cfg.split_ratio), "closure": cfg.closure, "rng": RNG_NAME},
        "deferred_draws": state.deferred_draws,
    }
    ds = GrowthDataset(
        snapshots,
        [entity_names[e] for e in state.entity_order],
        [relation_names[r] for r in state.relation_order],
        meta,
    )
    ds.validate()
    return ds


def build_growth_dataset(facts, num_entities: int, num_relations: int, cfg: BuilderConfig,
                         entity_names=None, relation_names=None) -> GrowthDataset:
    rng = make_rng(cfg.seed)
    state = seed_phase(as_fact_array(facts), num_entities, num_relations, cfg, rng)
    if cfg.variant == "hybrid":
        expand_hybrid(state, cfg, rng)
    else:
        expand_centric(state, cfg, rng)
    return divide(state, cfg, rng, entity_names, relation_names)


def build_from_file(path, cfg: BuilderConfig) -> GrowthDataset:
    entities, relations = Vocabulary(), Vocabulary()
    facts = load_triples(path, entities, relations)
    ds = build_growth_dataset(facts, len(entities), len(relations), cfg, entities.names, relations.names)
    ds.meta["source"] = Path(path).name
    ds.meta["source_facts"] = len(facts)
    return ds
