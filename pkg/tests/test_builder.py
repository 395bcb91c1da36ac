import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lkge_bench.builder import (VARIANTS, BuilderConfig, GrowthState, build_growth_dataset, expand_hybrid,
                                make_rng, seed_phase, split_sizes)
from lkge_bench.errors import BuilderDeadlockError, ConfigurationError
from lkge_bench.kg import delta_stats

CHAIN = np.array([(k, 0, k + 1) for k in range(5)], dtype=np.int64)


def _sizes(ds):
    return [delta_stats(ds, i)[0] for i in range(1, ds.num_snapshots + 1)]


def _fact_set(arr):
    return {tuple(x) for x in arr.tolist()}


def test_split_examples():
    assert split_sizes(100) == (60, 20, 20)
    assert split_sizes(7) == (5, 1, 1)
    assert split_sizes(3) == (3, 0, 0)
    assert split_sizes(0) == (0, 0, 0)


@given(st.integers(0, 100000))
def test_split_sums(k):
    tr, va, te = split_sizes(k)
    assert tr + va + te == k
    if k >= 5:
        assert va == te == k // 5
        assert abs(tr - 3 * k / 5) < 3


def test_config_validation():
    with pytest.raises(ConfigurationError):
        BuilderConfig("bogus")
    with pytest.raises(ConfigurationError):
        BuilderConfig("fact", num_snapshots=1)
    with pytest.raises(ConfigurationError):
        BuilderConfig("fact", seed_facts=0)
    with pytest.raises(ConfigurationError):
        BuilderConfig("fact", split_ratio=(3, 0, 1))
    assert BuilderConfig("entity").closure
    assert not BuilderConfig("fact").closure
    assert BuilderConfig("fact", closure_on_quota=True).closure


def test_seed_phase_takes_whole_small_base():
    base = np.array([(k, k % 3, k + 1) for k in range(10)], dtype=np.int64)
    state = seed_phase(base, 11, 3, BuilderConfig("fact"), make_rng(0))
    assert _fact_set(base[state.fact_order]) == _fact_set(base)


def test_seed_phase_bounds_and_determinism(small_kg):
    ne, nr = int(small_kg[:, [0, 2]].max()) + 1, int(small_kg[:, 1].max()) + 1
    a = seed_phase(small_kg, ne, nr, BuilderConfig("fact", seed=4), make_rng(4))
    b = seed_phase(small_kg, ne, nr, BuilderConfig("fact", seed=4), make_rng(4))
    assert a.num_facts == 10 and len(a.entity_order) <= 20 and len(a.relation_order) <= 10
    assert a.fact_order == b.fact_order


def test_seed_phase_base_too_small():
    with pytest.raises(ConfigurationError):
        seed_phase(CHAIN, 6, 1, BuilderConfig("fact"), make_rng(0))


@pytest.mark.parametrize("seed", range(5))
def test_chain_grows_one_fact_per_snapshot(seed):
    ds = build_growth_dataset(CHAIN, 6, 1, BuilderConfig("fact", seed=seed, seed_facts=1))
    assert _sizes(ds) == [1, 1, 1, 1, 1]
    # every snapshot's new fact touches an entity seen before it
    for i in range(2, 6):
        new = ds.snapshot(i).all_facts()[0]
        assert min(new[0], new[2]) < ds.snapshot(i - 1).num_entities


@pytest.mark.parametrize("variant", VARIANTS)
def test_builder_laws(small_kg, variant):
    ne, nr = int(small_kg[:, [0, 2]].max()) + 1, int(small_kg[:, 1].max()) + 1
    ds = build_growth_dataset(small_kg, ne, nr, BuilderConfig(variant, seed=2))
    assert ds.num_snapshots == 5
    ents = [s.num_entities for s in ds.snapshots]
    rels = [s.num_relations for s in ds.snapshots]
    assert ents == sorted(ents) and rels == sorted(rels)
    assert (ents[-1], rels[-1]) == (ne, nr)
    deltas = [_fact_set(s.all_facts()) for s in ds.snapshots]
    assert sum(len(d) for d in deltas) == len(small_kg)
    assert len(set().union(*deltas)) == len(small_kg)
    # handles are relabelled; compare through the name maps
    names = {(ds.entity_names[s], ds.relation_names[r], ds.entity_names[o]) for d in deltas for s, r, o in d}
    assert names == {(str(s), str(r), str(o)) for s, r, o in small_kg.tolist()}
    for s in ds.snapshots:
        assert (len(s.train), len(s.valid), len(s.test)) == split_sizes(s.delta_size)


def _quota_count(ds, variant, i):
    snap = ds.snapshot(i)
    return {"entity": snap.num_entities, "relation": snap.num_relations,
            "fact": len(ds.facts_upto(i))}[variant]


@pytest.mark.parametrize("variant", ["entity", "relation", "fact"])
def test_quotas(small_kg, variant):
    ne, nr = int(small_kg[:, [0, 2]].max()) + 1, int(small_kg[:, 1].max()) + 1
    total = {"entity": ne, "relation": nr, "fact": len(small_kg)}[variant]
    ds = build_growth_dataset(small_kg, ne, nr, BuilderConfig(variant, seed=5))
    for i in range(1, 5):
        assert 5 * _quota_count(ds, variant, i) >= i * total
    if variant == "fact":
        assert max(_sizes(ds)[1:]) - min(_sizes(ds)[1:]) <= 1


def test_entity_closure(small_kg):
    ne, nr = int(small_kg[:, [0, 2]].max()) + 1, int(small_kg[:, 1].max()) + 1
    ds = build_growth_dataset(small_kg, ne, nr, BuilderConfig("entity", seed=6))
    everything = np.concatenate([s.all_facts() for s in ds.snapshots])
    for i in range(1, 5):
        n_i = ds.snapshot(i).num_entities
        inside = everything[(everything[:, 0] < n_i) & (everything[:, 2] < n_i)]
        assert _fact_set(inside) <= _fact_set(ds.facts_upto(i))


def test_determinism(small_kg, tmp_path):
    ne, nr = int(small_kg[:, [0, 2]].max()) + 1, int(small_kg[:, 1].max()) + 1
    outs = []
    for k in range(2):
        build_growth_dataset(small_kg, ne, nr, BuilderConfig("hybrid", seed=9)).save(tmp_path / str(k))
        outs.append({p.relative_to(tmp_path / str(k)): p.read_bytes()
                     for p in sorted((tmp_path / str(k)).rglob("*")) if p.is_file()})
    assert outs[0] == outs[1]
    build_growth_dataset(small_kg, ne, nr, BuilderConfig("hybrid", seed=10)).save(tmp_path / "other")
    assert (tmp_path / "other" / "entities.tsv").read_bytes() != outs[0][type(tmp_path)("entities.tsv")]


def test_hybrid_uneven(small_kg):
    ne, nr = int(small_kg[:, [0, 2]].max()) + 1, int(small_kg[:, 1].max()) + 1
    spreads = []
    for seed in range(3):
        sizes = _sizes(build_growth_dataset(small_kg, ne, nr, BuilderConfig("hybrid", seed=seed)))
        spreads.append(max(sizes[1:]) - min(sizes[1:]))
    assert max(spreads) > 5


def test_hybrid_everything_seen_first_is_admissible():
    base = np.array([(0, 0, 1), (1, 1, 2), (2, 0, 0), (0, 1, 2)] * 1, dtype=np.int64)
    cfg = BuilderConfig("hybrid", seed_facts=1, hybrid_stop_numerator=1)
    state = GrowthState(base, 3, 2)
    for e in range(3):
        state.see_entity(e)
    for r in range(2):
        state.see_relation(r)
    state.include(0)
    expand_hybrid(state, cfg, make_rng(0))
    assert state.deferred_draws == 0
    assert state.num_facts == 4


def test_centric_deadlock():
    base = np.array([(0, 0, 1), (2, 0, 3), (4, 0, 5), (6, 0, 7), (8, 0, 9)], dtype=np.int64)
    with pytest.raises(BuilderDeadlockError) as info:
        build_growth_dataset(base, 10, 1, BuilderConfig("fact", seed_facts=1))
    assert info.value.remaining_facts == 4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(VARIANTS))
def test_laws_random_seeds(seed, variant):
    rng = np.random.default_rng(seed)
    # a random connected graph: a spanning path plus extra edges
    n = 40
    order = rng.permutation(n)
    facts = {(int(order[k]), int(rng.integers(4)), int(order[k + 1])) for k in range(n - 1)}
    for _ in range(60):
        facts.add((int(rng.integers(n)), int(rng.integers(4)), int(rng.integers(n))))
    base = np.array(sorted(facts), dtype=np.int64)
    nr = int(base[:, 1].max()) + 1
    ds = build_growth_dataset(base, n, nr, BuilderConfig(variant, seed=seed))
    assert sum(_sizes(ds)) == len(base)
    assert ds.snapshot(5).num_entities == n
