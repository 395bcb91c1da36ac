"""Link-prediction ranking, MRR / Hits@k, and forward/backward transfer."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .kg import GrowthDataset, as_fact_array
from .transe import EmbeddingState

HITS_AT = (1, 3, 10)


class Query(NamedTuple):
    """``known`` is (subject, relation) for tail prediction, (relation, object) for head prediction."""

    known: tuple
    answer: int
    direction: str  # "head" | "tail"

    @classmethod
    def tail(cls, s, r, o):
        return cls((int(s), int(r)), int(o), "tail")

    @classmethod
    def head(cls, s, r, o):
        return cls((int(r), int(o)), int(s), "head")


def _candidate_scores(q: Query, st: EmbeddingState, cands: np.ndarray, norm: str) -> np.ndarray:
    E, R = st.entity_table, st.relation_table
    if q.direction == "tail":
        s, r = q.known
        diff = E[s] + R[r] - E[cands]
    else:
        r, o = q.known
        diff = E[cands] + R[r] - E[o]
    if norm == "l1":
        return np.abs(diff).sum(axis=1)
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


def rank(q: Query, st: EmbeddingState, candidates, filter_facts=(), norm: str = "l2") -> float:
    """Mean-tie rank of the answer: 1 + #strictly better + #tied / 2, after filtering.

    ``candidates`` is a candidate count (handles ``0..n-1``) or an explicit handle sequence;
    ``filter_facts`` holds known-true (s, r, o) triples whose other answers are removed.
    """
    cands = np.arange(candidates) if np.isscalar(candidates) else np.asarray(candidates, dtype=np.int64)
    if q.answer not in set(cands.tolist()):
        raise ValueError(f"answer {q.answer} is not among the candidates")
    if q.direction == "tail":
        s, r = q.known
        removed = {o for (fs, fr, o) in filter_facts if fs == s and fr == r}
    else:
        r, o = q.known
        removed = {s for (s, fr, fo) in filter_facts if fr == r and fo == o}
    removed.discard(q.answer)
    keep = np.array([c not in removed for c in cands.tolist()], dtype=bool)
    cands = cands[keep]
    scores = _candidate_scores(q, st, cands, norm)
    ans = scores[np.flatnonzero(cands == q.answer)[0]]
    better = int((scores < ans).sum())
    ties = int((scores == ans).sum()) - 1
    return 1.0 + better + ties / 2.0


def metrics_from_ranks(ranks) -> dict:
    ranks = np.asarray(ranks, dtype=float)
    out = {"num_queries": int(len(ranks))}
    if len(ranks) == 0:
        out.update(mrr=None, **{f"hits{k}": None for k in HITS_AT})
        return out
    out["mrr"] = float(np.mean(1.0 / ranks))
    for k in HITS_AT:
        out[f"hits{k}"] = float(np.mean(ranks <= k))
    return out


class QuerySet:
    """Both prediction directions for every fact of a test set, with precomputed filter entries."""

    def __init__(self, facts, num_candidates: int, filter_facts=None, candidate_ids=None):
        facts = as_fact_array(facts)
        self.num_candidates = num_candidates
        # optional subset of 0..num_candidates-1 to score against (must contain every answer)
        self.candidate_ids = None if candidate_ids is None else np.unique(np.asarray(candidate_ids, np.int64))
        n = len(facts)
        # rows 0..n-1 predict the tail, rows n..2n-1 predict the head
        self.anchor = np.concatenate([facts[:, 0], facts[:, 2]])
        self.relation = np.concatenate([facts[:, 1], facts[:, 1]])
        self.answer = np.concatenate([facts[:, 2], facts[:, 0]])
        self.is_tail = np.concatenate([np.ones(n, bool), np.zeros(n, bool)])
        if len(self.answer) and self.answer.max() >= num_candidates:
            raise ValueError("a query answer lies outside the candidate set")
        self.filter_q, self.filter_e = self._build_filter(facts, filter_facts)
        self.answer_col = self.answer
        if self.candidate_ids is not None:
            col = np.full(num_candidates, -1, dtype=np.int64)
            col[self.candidate_ids] = np.arange(len(self.candidate_ids))
            self.answer_col = col[self.answer]
            if (self.answer_col < 0).any():
                raise ValueError("candidate subset is missing a query answer")
            keep = col[self.filter_e] >= 0
            self.filter_q, self.filter_e = self.filter_q[keep], col[self.filter_e[keep]]

    def __len__(self):
        return len(self.answer)

    def _build_filter(self, facts, filter_facts):
        if filter_facts is None or len(filter_facts) == 0:
            return np.zeros(0, np.int64), np.zeros(0, np.int64)
        ff = as_fact_array(filter_facts)
        tails, heads = defaultdict(list), defaultdict(list)
        for s, r, o in ff.tolist():
            if o < self.num_candidates:
                tails[(s, r)].append(o)
            if s < self.num_candidates:
                heads[(r, o)].append(s)
        qs, es = [], []
        n = len(facts)
        for k, (s, r, o) in enumerate(facts.tolist()):
            for e in tails.get((s, r), ()):
                if e != o:
                    qs.append(k)
                    es.append(e)
            for e in heads.get((r, o), ()):
                if e != s:
                    qs.append(n + k)
                    es.append(e)
        qs, es = np.asarray(qs, np.int64), np.asarray(es, np.int64)
        order = np.argsort(qs, kind="stable")
        return qs[order], es[order]

    def ranks(self, st: EmbeddingState, norm: str = "l2", chunk: int = 512) -> np.ndarray:
        E = st.entity_table[: self.num_candidates].astype(np.float64, copy=False)
        if self.candidate_ids is not None:
            E = E[self.candidate_ids]
        R = st.relation_table.astype(np.float64, copy=False)
        anchor = st.entity_table[self.anchor].astype(np.float64, copy=False)
        rel = R[self.relation]
        # tail: |anchor + r - c|; head: |c + r - anchor| = |c - (anchor - r)|
        points = np.where(self.is_tail[:, None], anchor + rel, anchor - rel)
        e_sq = np.einsum("ij,ij->i", E, E)
        out = np.empty(len(self.answer))
        for lo in range(0, len(self.answer), chunk):
            hi = min(lo + chunk, len(self.answer))
            p = points[lo:hi]
            if norm == "l1":
                scores = np.abs(p[:, None, :] - E[None, :, :]).sum(axis=2)
            else:
                scores = e_sq[None, :] - 2.0 * (p @ E.T)  # |p|^2 is constant per row
            a, b = np.searchsorted(self.filter_q, [lo, hi])
            scores[self.filter_q[a:b] - lo, self.filter_e[a:b]] = np.inf
            idx = np.arange(hi - lo)
            ans = scores[idx, self.answer_col[lo:hi]][:, None]
            better = (scores < ans).sum(axis=1)
            ties = (scores == ans).sum(axis=1) - 1
            out[lo:hi] = 1.0 + better + ties / 2.0
        return out


def link_prediction(st: EmbeddingState, test_facts, num_candidates: int, filter_facts=None,
                    norm: str = "l2") -> dict:
    qs = QuerySet(test_facts, num_candidates, filter_facts)
    return metrics_from_ranks(qs.ranks(st, norm))


def snapshot_query_set(ds: GrowthDataset, j: int, split: str = "test", raw: bool = False) -> QuerySet:
    """Queries from snapshot ``j``'s split, candidates E_j, filtered by all facts of snapshots 1..j."""
    snap = ds.snapshot(j)
    filt = None if raw else ds.facts_upto(j)
    return QuerySet(getattr(snap, split), snap.num_entities, filt)


def union_eval(st: EmbeddingState, ds: GrowthDataset, upto: int | None = None, raw: bool = False,
               norm: str = "l2") -> dict:
    """Micro-averaged metrics over the test sets of snapshots 1..upto, each with its own candidates."""
    upto = ds.num_snapshots if upto is None else upto
    ranks = [snapshot_query_set(ds, j, raw=raw).ranks(st, norm) for j in range(1, upto + 1)]
    return metrics_from_ranks(np.concatenate(ranks) if ranks else [])


@dataclass
class TransferMatrix:
    """h[i][j]: MRR of the model trained through snapshot i on test set j (1-based)."""

    n: int

    def __post_init__(self):
        self._h: dict[tuple[int, int], float] = {}

    def __setitem__(self, ij, value):
        i, j = ij
        if not (1 <= i <= self.n and 1 <= j <= self.n):
            raise IndexError(f"h[{i}][{j}] outside 1..{self.n}")
        if value is not None and not 0.0 <= value <= 1.0:
            raise ValueError(f"MRR {value} outside [0, 1]")
        self._h[(i, j)] = value

    def __getitem__(self, ij):
        return self._h.get(tuple(ij))

    def __contains__(self, ij):
        return self._h.get(tuple(ij)) is not None

    def to_list(self) -> list[list]:
        return [[self._h.get((i, j)) for j in range(1, self.n + 1)] for i in range(1, self.n + 1)]

    @classmethod
    def from_list(cls, rows) -> "TransferMatrix":
        h = cls(len(rows))
        for i, row in enumerate(rows, 1):
            for j, v in enumerate(row, 1):
                if v is not None:
                    h[i, j] = v
        return h


def fwt_bwt(h: TransferMatrix) -> tuple[float | None, float | None]:
    """Average next-snapshot MRR before training on it, and average MRR change on past snapshots."""
    n = h.n
    if n < 2:
        return None, None
    fwd = [h[i - 1, i] for i in range(2, n + 1)]
    fwt = sum(fwd) / (n - 1) if all(v is not None for v in fwd) else None
    back = [(h[n, i], h[i, i]) for i in range(1, n)]
    if all(a is not None and b is not None for a, b in back):
        bwt = sum(a - b for a, b in back) / (n - 1)
    else:
        bwt = None
    return fwt, bwt
