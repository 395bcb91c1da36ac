"""Synthetic translational KGs and connected subsampling for desk-scale experiments.

Entities get latent positions and relations latent translations, so held-out facts are
predictable by a translational model.
"""

from __future__ import annotations

from collections import deque

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .kg import as_fact_array


def generate_kg(num_entities: int = 3000, num_types: int = 25, num_relations: int = 300,
                num_facts: int = 30000, latent_dim: int = 8, noise: float = 0.25, center_scale: float = 3.0,
                seed: int = 0) -> np.ndarray:
    """Facts (as an ``(m, 3)`` handle array) restricted to the largest connected component.

    Entities belong to Zipf-sized types clustered around type centres. Each relation maps
    a domain type to a range type: a sampled subject is linked to the range-type entity
    nearest its translated (and jittered) position.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    type_w = 1.0 / np.arange(1, num_types + 1) ** 0.7
    types = rng.choice(num_types, num_entities, p=type_w / type_w.sum())
    centers = rng.normal(scale=center_scale, size=(num_types, latent_dim))
    pos = centers[types] + rng.normal(size=(num_entities, latent_dim))
    members = [np.flatnonzero(types == t) for t in range(num_types)]
    usable = [t for t in range(num_types) if len(members[t]) >= 2]

    relations = []
    for _ in range(num_relations):
        dom, rng_t = rng.choice(usable, 2)
        shift = centers[rng_t] - centers[dom] + rng.normal(size=latent_dim)
        relations.append((dom, rng_t, shift, rng.uniform(0.2, 1.0)))
    capacity = sum(cover * len(members[dom]) for dom, _, _, cover in relations)
    scale = num_facts / capacity

    facts: set[tuple[int, int, int]] = set()
    for r, (dom, rng_t, shift, cover) in enumerate(relations):
        subjects = members[dom]
        k = min(len(subjects), max(1, int(round(cover * len(subjects) * scale))))
        subj = rng.choice(subjects, k, replace=False)
        cand = members[rng_t]
        target = pos[subj] + shift + rng.normal(scale=noise, size=(k, latent_dim))
        dist = ((target[:, None, :] - pos[cand][None, :, :]) ** 2).sum(axis=2)
        dist[cand[None, :] == subj[:, None]] = np.inf
        obj = cand[dist.argmin(axis=1)]
        facts.update(zip(subj.tolist(), [r] * k, obj.tolist()))
    arr = as_fact_array(sorted(facts))
    arr = arr[rng.permutation(len(arr))]
    return largest_component(arr)


def largest_component(facts: np.ndarray) -> np.ndarray:
    facts = as_fact_array(facts)
    if len(facts) == 0:
        return facts
    n = int(facts[:, [0, 2]].max()) + 1
    adj = sp.coo_matrix((np.ones(len(facts)), (facts[:, 0], facts[:, 2])), shape=(n, n))
    _, labels = connected_components(adj, directed=False)
    comp = labels[facts[:, 0]]
    biggest = np.bincount(comp).argmax()
    return facts[comp == biggest]


def snowball_subsample(facts: np.ndarray, num_facts: int, seed: int = 0) -> np.ndarray:
    """A connected subset of ``num_facts`` facts grown breadth-first from a random entity."""
    facts = as_fact_array(facts)
    if num_facts >= len(facts):
        return facts.copy()
    rng = np.random.Generator(np.random.PCG64(seed))
    n = int(facts[:, [0, 2]].max()) + 1
    incident: list[list[int]] = [[] for _ in range(n)]
    for k, (s, _, o) in enumerate(facts.tolist()):
        incident[s].append(k)
        if o != s:
            incident[o].append(k)
    start = int(facts[rng.integers(len(facts)), 0])
    taken = np.zeros(len(facts), dtype=bool)
    visited = np.zeros(n, dtype=bool)
    visited[start] = True
    queue = deque([start])
    chosen = []
    while queue and len(chosen) < num_facts:
        e = queue.popleft()
        for k in rng.permutation(incident[e]):
            if taken[k]:
                continue
            taken[k] = True
            chosen.append(k)
            s, _, o = facts[k]
            for x in (s, o):
                if not visited[x]:
                    visited[x] = True
                    queue.append(int(x))
            if len(chosen) == num_facts:
                break
    return facts[np.sort(np.array(chosen, dtype=np.int64))]


def write_triples(path, facts: np.ndarray, entity_prefix: str = "e", relation_prefix: str = "r") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{entity_prefix}{s}\t{relation_prefix}{r}\t{entity_prefix}{o}\n"
                      for s, r, o in as_fact_array(facts).tolist())
