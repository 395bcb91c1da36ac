"""Translational scoring, negative sampling, margin loss and a row-sparse Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericError


def init_range(dim: int) -> float:
    return 6.0 / np.sqrt(dim)


def random_rows(rng: np.random.Generator, n: int, dim: int, dtype=np.float64) -> np.ndarray:
    bound = init_range(dim)
    return rng.uniform(-bound, bound, size=(n, dim)).astype(dtype, copy=False)


@dataclass
class EmbeddingState:
    """Current entity/relation tables plus frozen copies from the end of the previous snapshot."""

    entity_table: np.ndarray
    relation_table: np.ndarray
    prev_entity_table: np.ndarray | None = None
    prev_relation_table: np.ndarray | None = None

    def __post_init__(self):
        d = self.entity_table.shape[1]
        if self.prev_entity_table is None:
            self.prev_entity_table = np.zeros((0, d), dtype=self.entity_table.dtype)
        if self.prev_relation_table is None:
            self.prev_relation_table = np.zeros((0, d), dtype=self.relation_table.dtype)

    @classmethod
    def random(cls, num_entities: int, num_relations: int, dim: int, rng, dtype=np.float64):
        ent = random_rows(rng, num_entities, dim, dtype)
        rel = random_rows(rng, num_relations, dim, dtype)
        return cls(ent, rel)

    @property
    def dim(self) -> int:
        return self.entity_table.shape[1]

    @property
    def num_entities(self) -> int:
        return self.entity_table.shape[0]

    @property
    def num_relations(self) -> int:
        return self.relation_table.shape[0]

    def copy(self) -> "EmbeddingState":
        return EmbeddingState(self.entity_table.copy(), self.relation_table.copy(),
                              self.prev_entity_table.copy(), self.prev_relation_table.copy())

    def freeze(self) -> None:
        """Snapshot the current tables as the previous-snapshot reference."""
        self.prev_entity_table = self.entity_table.copy()
        self.prev_relation_table = self.relation_table.copy()

    def extend(self, new_entities: np.ndarray, new_relations: np.ndarray) -> None:
        self.entity_table = np.concatenate([self.entity_table, new_entities.astype(self.entity_table.dtype)])
        self.relation_table = np.concatenate([self.relation_table,
                                              new_relations.astype(self.relation_table.dtype)])


def _check(handle, size, kind):
    if not 0 <= handle < size:
        raise IndexError(f"{kind} handle {handle} out of range [0, {size})")


def dissimilarity(s: int, r: int, o: int, st: EmbeddingState, norm: str = "l2") -> float:
    _check(s, st.num_entities, "entity")
    _check(o, st.num_entities, "entity")
    _check(r, st.num_relations, "relation")
    diff = st.entity_table[s] + st.relation_table[r] - st.entity_table[o]
    if norm == "l1":
        return float(np.abs(diff).sum())
    return float(np.sqrt(np.dot(diff, diff)))


def f_sub(r_vec, o_vec) -> np.ndarray:
    """Subject estimate from a relation and object: o - r."""
    r_vec, o_vec = np.asarray(r_vec), np.asarray(o_vec)
    if r_vec.shape != o_vec.shape:
        raise ValueError(f"shape mismatch: {r_vec.shape} vs {o_vec.shape}")
    return o_vec - r_vec


def f_rel(s_vec, o_vec) -> np.ndarray:
    """Relation estimate from subject and object: o - s."""
    s_vec, o_vec = np.asarray(s_vec), np.asarray(o_vec)
    if s_vec.shape != o_vec.shape:
        raise ValueError(f"shape mismatch: {s_vec.shape} vs {o_vec.shape}")
    return o_vec - s_vec


def f_obj(s_vec, r_vec) -> np.ndarray:
    """Object estimate from subject and relation: s + r."""
    return np.asarray(s_vec) + np.asarray(r_vec)


def negative_sample(fact, num_entities: int, rng: np.random.Generator) -> tuple[int, int, int]:
    s, r, o = (int(x) for x in fact)
    replace_subject = rng.random() < 0.5
    e = int(rng.integers(num_entities))
    return (e, r, o) if replace_subject else (s, r, e)


def corrupt_batch(facts: np.ndarray, num_entities: int, rng: np.random.Generator) -> np.ndarray:
    """Vectorised negative_sample: one corruption per row."""
    neg = facts.copy()
    replace_subject = rng.random(len(facts)) < 0.5
    ents = rng.integers(num_entities, size=len(facts))
    neg[replace_subject, 0] = ents[replace_subject]
    neg[~replace_subject, 2] = ents[~replace_subject]
    return neg


def _distance_and_unit(diff: np.ndarray, norm: str):
    """Row norms and their gradient w.r.t. ``diff`` (zero at the origin)."""
    if norm == "l1":
        return np.abs(diff).sum(axis=1), np.sign(diff)
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    safe = np.where(dist > 0, dist, 1.0)
    unit = diff / safe[:, None]
    unit[dist == 0] = 0.0
    return dist, unit


class GradBuffer:
    """Dense gradient accumulators with a record of which rows were touched."""

    def __init__(self, num_entities: int, num_relations: int, dim: int, dtype=np.float64):
        self.entity = np.zeros((num_entities, dim), dtype=dtype)
        self.relation = np.zeros((num_relations, dim), dtype=dtype)
        self.entity_touched = np.zeros(num_entities, dtype=bool)
        self.relation_touched = np.zeros(num_relations, dtype=bool)

    def add_entity_rows(self, rows, values):
        np.add.at(self.entity, rows, values)
        self.entity_touched[rows] = True

    def add_relation_rows(self, rows, values):
        np.add.at(self.relation, rows, values)
        self.relation_touched[rows] = True

    def add_entity_dense(self, values, mask=None):
        self.entity += values
        self.entity_touched[slice(None) if mask is None else mask] = True

    def add_relation_dense(self, values, mask=None):
        self.relation += values
        self.relation_touched[slice(None) if mask is None else mask] = True

    def rows(self) -> "RowGrads":
        e = np.flatnonzero(self.entity_touched)
        r = np.flatnonzero(self.relation_touched)
        return RowGrads(e, self.entity[e], r, self.relation[r])


@dataclass
class RowGrads:
    entity_rows: np.ndarray
    entity_values: np.ndarray
    relation_rows: np.ndarray
    relation_values: np.ndarray


def margin_loss_batch(pos: np.ndarray, neg: np.ndarray, gamma: float, st: EmbeddingState,
                      norm: str = "l2", grads: GradBuffer | None = None) -> float:
    """Summed hinge loss max(0, gamma + f(pos) - f(neg)); accumulates gradients into ``grads``."""
    E, R = st.entity_table, st.relation_table
    d_pos = E[pos[:, 0]] + R[pos[:, 1]] - E[pos[:, 2]]
    d_neg = E[neg[:, 0]] + R[neg[:, 1]] - E[neg[:, 2]]
    f_pos, u_pos = _distance_and_unit(d_pos, norm)
    f_neg, u_neg = _distance_and_unit(d_neg, norm)
    hinge = gamma + f_pos - f_neg
    active = hinge > 0
    loss = float(hinge[active].sum())
    if grads is not None and active.any():
        p, q = pos[active], neg[active]
        up, un = u_pos[active], u_neg[active]
        grads.add_entity_rows(np.concatenate([p[:, 0], p[:, 2], q[:, 0], q[:, 2]]),
                              np.concatenate([up, -up, -un, un]))
        grads.add_relation_rows(np.concatenate([p[:, 1], q[:, 1]]), np.concatenate([up, -un]))
    return loss


def margin_loss(pos, neg, gamma: float, st: EmbeddingState, norm: str = "l2"):
    """Single-pair hinge loss and its sparse gradient as {('entity'|'relation', row): vector}."""
    if gamma <= 0:
        raise ValueError("margin must be positive")
    buf = GradBuffer(st.num_entities, st.num_relations, st.dim, st.entity_table.dtype)
    loss = margin_loss_batch(np.array([pos], dtype=np.int64), np.array([neg], dtype=np.int64),
                             gamma, st, norm, buf)
    rg = buf.rows()
    out = {("entity", int(k)): v for k, v in zip(rg.entity_rows, rg.entity_values)}
    out.update({("relation", int(k)): v for k, v in zip(rg.relation_rows, rg.relation_values)})
    return loss, out


@dataclass
class _Moments:
    m: np.ndarray
    v: np.ndarray
    t: np.ndarray

    @classmethod
    def zeros(cls, rows, dim, dtype):
        return cls(np.zeros((rows, dim), dtype), np.zeros((rows, dim), dtype), np.zeros(rows, np.int64))


@dataclass
class SparseAdam:
    """Adam with per-row moments and step counters; rows absent from a step are left untouched."""

    num_entities: int
    num_relations: int
    dim: int
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    dtype: type = np.float64
    entity: _Moments = field(init=False)
    relation: _Moments = field(init=False)

    def __post_init__(self):
        self.entity = _Moments.zeros(self.num_entities, self.dim, self.dtype)
        self.relation = _Moments.zeros(self.num_relations, self.dim, self.dtype)

    def step(self, grads: RowGrads, st: EmbeddingState) -> None:
        self._update(st.entity_table, self.entity, grads.entity_rows, grads.entity_values, "entity")
        self._update(st.relation_table, self.relation, grads.relation_rows, grads.relation_values, "relation")

    def _update(self, table, mom: _Moments, rows, g, kind):
        if len(rows) == 0:
            return
        if not np.isfinite(g).all():
            bad = rows[~np.isfinite(g).all(axis=1)]
            raise NumericError(f"non-finite gradient for {kind} rows {bad[:10].tolist()}")
        mom.t[rows] += 1
        t = mom.t[rows][:, None]
        m = mom.m[rows] * self.beta1 + (1 - self.beta1) * g
        v = mom.v[rows] * self.beta2 + (1 - self.beta2) * g * g
        mom.m[rows] = m
        mom.v[rows] = v
        m_hat = m / (1 - self.beta1 ** t)
        v_hat = v / (1 - self.beta2 ** t)
        table[rows] -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimizer_step(grads: RowGrads, opt: SparseAdam, st: EmbeddingState) -> None:
    opt.step(grads, st)
