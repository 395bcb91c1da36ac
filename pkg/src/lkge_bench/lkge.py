"""Lifelong components: fact ledger, masked autoencoder loss, embedding transfer, regularization.

Conventions shared by every function here:

* An entity's reconstruction averages one translation estimate per incident training
  fact: ``o - r`` when it is the subject and ``s + r`` when it is the object. A self-loop
  ``(e, r, e)`` is a single fact and contributes once, through its subject side.
* History enters only through the frozen previous tables weighted by the ledger's
  ``prev`` counts; old training facts are never revisited.
* Items whose total fact count is zero have neither a reconstruction nor a weight and
  are skipped by the losses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, UndefinedQuantityError
from .kg import as_fact_array
from .transe import EmbeddingState, GradBuffer, f_obj, f_rel, f_sub, margin_loss_batch


def entity_fact_counts(facts: np.ndarray, num_entities: int, subject_only: bool = False) -> np.ndarray:
    facts = as_fact_array(facts)
    counts = np.bincount(facts[:, 0], minlength=num_entities)
    if not subject_only:
        other = facts[facts[:, 0] != facts[:, 2], 2]
        counts = counts + np.bincount(other, minlength=num_entities)
    return counts.astype(np.int64)


def relation_fact_counts(facts: np.ndarray, num_relations: int) -> np.ndarray:
    return np.bincount(as_fact_array(facts)[:, 1], minlength=num_relations).astype(np.int64)


class FactLedger:
    """Per-item training-fact counts: ``prev`` over earlier snapshots, ``curr`` over the current one."""

    def __init__(self, prev_entity=None, curr_entity=None, prev_relation=None, curr_relation=None):
        z = np.zeros(0, dtype=np.int64)
        self.prev_entity = z if prev_entity is None else np.asarray(prev_entity, dtype=np.int64)
        self.curr_entity = z if curr_entity is None else np.asarray(curr_entity, dtype=np.int64)
        self.prev_relation = z if prev_relation is None else np.asarray(prev_relation, dtype=np.int64)
        self.curr_relation = z if curr_relation is None else np.asarray(curr_relation, dtype=np.int64)

    @property
    def num_entities(self):
        return len(self.curr_entity)

    @property
    def num_relations(self):
        return len(self.curr_relation)

    def advance(self, train_facts: np.ndarray, num_entities: int, num_relations: int) -> None:
        """Move to the next snapshot: fold ``curr`` into ``prev``, then recount from ``train_facts``."""
        self.prev_entity = _grow(self.prev_entity + self.curr_entity, num_entities)
        self.prev_relation = _grow(self.prev_relation + self.curr_relation, num_relations)
        self.curr_entity = entity_fact_counts(train_facts, num_entities)
        self.curr_relation = relation_fact_counts(train_facts, num_relations)

    def arrays(self) -> dict:
        return {"ledger_prev_entity": self.prev_entity, "ledger_curr_entity": self.curr_entity,
                "ledger_prev_relation": self.prev_relation, "ledger_curr_relation": self.curr_relation}

    @classmethod
    def from_arrays(cls, data) -> "FactLedger":
        return cls(data["ledger_prev_entity"], data["ledger_curr_entity"],
                   data["ledger_prev_relation"], data["ledger_curr_relation"])


def _grow(counts: np.ndarray, size: int) -> np.ndarray:
    out = np.zeros(size, dtype=np.int64)
    out[:len(counts)] = counts
    return out


@dataclass
class LkgeConfig:
    alpha: float = 0.1
    beta: float = 0.1
    margin: float = 1.0
    use_finetune: bool = True
    use_autoencoder: bool = True
    use_transfer: bool = True
    use_regularization: bool = True
    subject_only_reconstruction: bool = False
    detach_reconstruction: bool = False
    loss_scope: str = "full"

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigurationError("alpha and beta must be non-negative")
        if self.margin <= 0:
            raise ConfigurationError("margin must be positive")
        if self.loss_scope not in ("full", "batch"):
            raise ConfigurationError("loss_scope must be 'full' or 'batch'")


# ---- single-item reference operations ------------------------------------------------


def _entity_contribution(e, fact, E, R, subject_only=False):
    s, r, o = fact
    if s == e:
        return f_sub(R[r], E[o])
    if o == e and not subject_only:
        return f_obj(E[s], R[r])
    return None


def reconstruct_entity(e: int, facts, st: EmbeddingState, ledger: FactLedger,
                       subject_only: bool = False) -> np.ndarray:
    """Count-weighted blend of the frozen embedding and the current snapshot's estimates."""
    E, R = st.entity_table, st.relation_table
    prev = int(ledger.prev_entity[e]) if e < len(ledger.prev_entity) else 0
    contribs = [c for c in (_entity_contribution(e, f, E, R, subject_only) for f in facts) if c is not None]
    denom = prev + len(contribs)
    if denom == 0:
        raise UndefinedQuantityError(f"entity {e} has no facts to reconstruct from")
    total = np.zeros(st.dim)
    if prev:
        total += prev * st.prev_entity_table[e]
    for c in contribs:
        total += c
    return total / denom


def reconstruct_relation(r: int, facts, st: EmbeddingState, ledger: FactLedger) -> np.ndarray:
    E = st.entity_table
    prev = int(ledger.prev_relation[r]) if r < len(ledger.prev_relation) else 0
    contribs = [f_rel(E[s], E[o]) for s, rr, o in facts if rr == r]
    denom = prev + len(contribs)
    if denom == 0:
        raise UndefinedQuantityError(f"relation {r} has no facts to reconstruct from")
    total = np.zeros(st.dim)
    if prev:
        total += prev * st.prev_relation_table[r]
    for c in contribs:
        total += c
    return total / denom


def transfer_entity_init(e: int, facts, prev_entity_table: np.ndarray, prev_relation_table: np.ndarray):
    """Mean translation estimate from facts whose other components were seen before; None if none."""
    n_e, n_r = len(prev_entity_table), len(prev_relation_table)
    contribs = []
    for s, r, o in facts:
        if r >= n_r:
            continue
        if s == e and o != e and o < n_e:
            contribs.append(f_sub(prev_relation_table[r], prev_entity_table[o]))
        elif o == e and s != e and s < n_e:
            contribs.append(f_obj(prev_entity_table[s], prev_relation_table[r]))
    if not contribs:
        return None
    return np.mean(contribs, axis=0)


def transfer_relation_init(r: int, facts, prev_entity_table: np.ndarray):
    n_e = len(prev_entity_table)
    contribs = [f_rel(prev_entity_table[s], prev_entity_table[o])
                for s, rr, o in facts if rr == r and s < n_e and o < n_e]
    if not contribs:
        return None
    return np.mean(contribs, axis=0)


def reg_weight(prev: int, curr: int) -> float:
    """Share of an item's training facts that are old: 1 - curr / (prev + curr)."""
    total = prev + curr
    if total <= 0:
        raise UndefinedQuantityError("regularization weight undefined for an item with no facts")
    return 1.0 - curr / total


def reg_weights(prev: np.ndarray, curr: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised reg_weight; returns (weights, defined-mask) with weight 0 where undefined."""
    total = prev + curr
    defined = total > 0
    w = np.zeros(len(total))
    w[defined] = 1.0 - curr[defined] / total[defined]
    return w, defined


# ---- batched transfer ------------------------------------------------------------------


def transfer_init(train_facts: np.ndarray, prev_entity_table: np.ndarray, prev_relation_table: np.ndarray,
                  num_entities: int, num_relations: int):
    """Transfer vectors for every unseen item at once.

    Returns ``(ent_vecs, ent_ok, rel_vecs, rel_ok)`` covering handles from the previous
    vocabulary sizes up to ``num_entities`` / ``num_relations``; rows with ``ok`` False
    had no eligible fact and keep their random initialisation.
    """
    facts = as_fact_array(train_facts)
    n_pe, n_pr = len(prev_entity_table), len(prev_relation_table)
    d = prev_entity_table.shape[1] if n_pe else prev_relation_table.shape[1]
    s, r, o = facts[:, 0], facts[:, 1], facts[:, 2]
    n_new_e, n_new_r = num_entities - n_pe, num_relations - n_pr

    ent_sum = np.zeros((n_new_e, d))
    ent_cnt = np.zeros(n_new_e)
    old_r = r < n_pr
    sub = (s >= n_pe) & (o < n_pe) & old_r
    if sub.any():
        np.add.at(ent_sum, s[sub] - n_pe, prev_entity_table[o[sub]] - prev_relation_table[r[sub]])
        np.add.at(ent_cnt, s[sub] - n_pe, 1)
    obj = (o >= n_pe) & (s < n_pe) & old_r
    if obj.any():
        np.add.at(ent_sum, o[obj] - n_pe, prev_entity_table[s[obj]] + prev_relation_table[r[obj]])
        np.add.at(ent_cnt, o[obj] - n_pe, 1)

    rel_sum = np.zeros((n_new_r, d))
    rel_cnt = np.zeros(n_new_r)
    rel = (r >= n_pr) & (s < n_pe) & (o < n_pe)
    if rel.any():
        np.add.at(rel_sum, r[rel] - n_pr, prev_entity_table[o[rel]] - prev_entity_table[s[rel]])
        np.add.at(rel_cnt, r[rel] - n_pr, 1)

    ent_ok, rel_ok = ent_cnt > 0, rel_cnt > 0
    ent_sum[ent_ok] /= ent_cnt[ent_ok, None]
    rel_sum[rel_ok] /= rel_cnt[rel_ok, None]
    return ent_sum, ent_ok, rel_sum, rel_ok


# ---- batched losses ----------------------------------------------------------------------


class Reconstruction:
    """Linear reconstruction maps for one snapshot.

    ``recon_E = const_E + EE @ E + ER @ R`` and ``recon_R = const_R + RE @ E``, where the
    sparse matrices already carry the 1/denominator scaling.
    """

    def __init__(self, train_facts: np.ndarray, ledger: FactLedger, prev_entity_table: np.ndarray,
                 prev_relation_table: np.ndarray, num_entities: int, num_relations: int,
                 subject_only: bool = False):
        facts = as_fact_array(train_facts)
        s, r, o = facts[:, 0], facts[:, 1], facts[:, 2]
        ne, nr = num_entities, num_relations
        d = prev_entity_table.shape[1]

        prev_e = _grow(ledger.prev_entity, ne).astype(float)
        prev_r = _grow(ledger.prev_relation, nr).astype(float)
        cnt_e = entity_fact_counts(facts, ne, subject_only).astype(float)
        cnt_r = relation_fact_counts(facts, nr).astype(float)
        den_e, den_r = prev_e + cnt_e, prev_r + cnt_r
        self.entity_mask = den_e > 0
        self.relation_mask = den_r > 0
        inv_e = np.divide(1.0, den_e, out=np.zeros(ne), where=self.entity_mask)
        inv_r = np.divide(1.0, den_r, out=np.zeros(nr), where=self.relation_mask)

        rows_ee, cols_ee, val_ee = [s], [o], [np.ones(len(s))]
        rows_er, cols_er, val_er = [s], [r], [-np.ones(len(s))]
        if not subject_only:
            obj = s != o
            rows_ee.append(o[obj]); cols_ee.append(s[obj]); val_ee.append(np.ones(obj.sum()))
            rows_er.append(o[obj]); cols_er.append(r[obj]); val_er.append(np.ones(obj.sum()))
        scale = sp.diags(inv_e)
        self.EE = (scale @ sp.csr_matrix((np.concatenate(val_ee), (np.concatenate(rows_ee), np.concatenate(cols_ee))),
                                         shape=(ne, ne))).tocsr()
        self.ER = (scale @ sp.csr_matrix((np.concatenate(val_er), (np.concatenate(rows_er), np.concatenate(cols_er))),
                                         shape=(ne, nr))).tocsr()
        re = sp.csr_matrix((np.concatenate([np.ones(len(r)), -np.ones(len(r))]),
                            (np.concatenate([r, r]), np.concatenate([o, s]))), shape=(nr, ne))
        self.RE = (sp.diags(inv_r) @ re).tocsr()

        self.const_E = np.zeros((ne, d))
        k = min(len(prev_entity_table), ne)
        self.const_E[:k] = (prev_e[:k] * inv_e[:k])[:, None] * prev_entity_table[:k]
        self.const_R = np.zeros((nr, d))
        k = min(len(prev_relation_table), nr)
        self.const_R[:k] = (prev_r[:k] * inv_r[:k])[:, None] * prev_relation_table[:k]
        self.EE_T, self.ER_T, self.RE_T = self.EE.T.tocsr(), self.ER.T.tocsr(), self.RE.T.tocsr()

    def reconstruct(self, E: np.ndarray, R: np.ndarray):
        return self.const_E + self.EE @ E + self.ER @ R, self.const_R + self.RE @ E

    def loss(self, E: np.ndarray, R: np.ndarray, grads: GradBuffer | None = None, detach: bool = False,
             entity_rows=None, relation_rows=None) -> float:
        """Squared alignment error between embeddings and reconstructions.

        ``entity_rows``/``relation_rows`` restrict the sum to those items (batch scope).
        """
        rec_E, rec_R = self.reconstruct(E, R)
        em, rm = self.entity_mask, self.relation_mask
        if entity_rows is not None:
            em = em & _row_mask(entity_rows, len(em))
        if relation_rows is not None:
            rm = rm & _row_mask(relation_rows, len(rm))
        res_E = np.where(em[:, None], E - rec_E, 0.0)
        res_R = np.where(rm[:, None], R - rec_R, 0.0)
        loss = float(np.einsum("ij,ij->", res_E, res_E) + np.einsum("ij,ij->", res_R, res_R))
        if grads is not None:
            g_E, g_R = 2.0 * res_E, 2.0 * res_R
            if not detach:
                g_E -= 2.0 * (self.EE_T @ res_E + self.RE_T @ res_R)
                g_R -= 2.0 * (self.ER_T @ res_E)
            touched_e = em | np.any(g_E != 0, axis=1)
            touched_r = rm | np.any(g_R != 0, axis=1)
            grads.add_entity_dense(g_E, touched_e)
            grads.add_relation_dense(g_R, touched_r)
        return loss


def _row_mask(rows, n):
    mask = np.zeros(n, dtype=bool)
    if n:
        mask[np.asarray(rows, dtype=np.int64)] = True
    return mask


class Regularizer:
    """Weighted pull of previously seen rows toward their frozen values."""

    def __init__(self, ledger: FactLedger, prev_entity_table: np.ndarray, prev_relation_table: np.ndarray):
        ne, nr = len(prev_entity_table), len(prev_relation_table)
        self.prev_E, self.prev_R = prev_entity_table, prev_relation_table
        self.w_E, _ = reg_weights(ledger.prev_entity[:ne], ledger.curr_entity[:ne])
        self.w_R, _ = reg_weights(ledger.prev_relation[:nr], ledger.curr_relation[:nr])

    def loss(self, E: np.ndarray, R: np.ndarray, grads: GradBuffer | None = None,
             entity_rows=None, relation_rows=None) -> float:
        ne, nr = len(self.prev_E), len(self.prev_R)
        w_E, w_R = self.w_E, self.w_R
        if entity_rows is not None:
            w_E = w_E * _row_mask(entity_rows, len(E))[:ne]
        if relation_rows is not None:
            w_R = w_R * _row_mask(relation_rows, len(R))[:nr]
        dE = E[:ne] - self.prev_E
        dR = R[:nr] - self.prev_R
        loss = float(w_E @ np.einsum("ij,ij->i", dE, dE) + w_R @ np.einsum("ij,ij->i", dR, dR))
        if grads is not None:
            g_E = np.zeros_like(E)
            g_E[:ne] = 2.0 * w_E[:, None] * dE
            g_R = np.zeros_like(R)
            g_R[:nr] = 2.0 * w_R[:, None] * dR
            grads.add_entity_dense(g_E, _row_mask(np.flatnonzero(w_E > 0), len(E)))
            grads.add_relation_dense(g_R, _row_mask(np.flatnonzero(w_R > 0), len(R)))
        return loss


def mae_loss(train_facts, st: EmbeddingState, ledger: FactLedger, grads: GradBuffer | None = None,
             subject_only=False, detach=False) -> float:
    rec = Reconstruction(train_facts, ledger, st.prev_entity_table, st.prev_relation_table,
                         st.num_entities, st.num_relations, subject_only)
    return rec.loss(st.entity_table, st.relation_table, grads, detach)


def reg_loss(st: EmbeddingState, ledger: FactLedger, grads: GradBuffer | None = None) -> float:
    return Regularizer(ledger, st.prev_entity_table, st.prev_relation_table).loss(
        st.entity_table, st.relation_table, grads)


class LkgeObjective:
    """Composite loss new + alpha * old + beta * MAE for one snapshot, with ablation toggles."""

    def __init__(self, cfg: LkgeConfig, train_facts: np.ndarray, st: EmbeddingState, ledger: FactLedger,
                 norm: str = "l2"):
        self.cfg = cfg
        self.norm = norm
        self.reconstruction = None
        self.regularizer = None
        if cfg.use_autoencoder and cfg.beta > 0:
            self.reconstruction = Reconstruction(train_facts, ledger, st.prev_entity_table, st.prev_relation_table,
                                                 st.num_entities, st.num_relations, cfg.subject_only_reconstruction)
        if cfg.use_regularization and cfg.alpha > 0 and len(st.prev_entity_table) + len(st.prev_relation_table):
            self.regularizer = Regularizer(ledger, st.prev_entity_table, st.prev_relation_table)

    def __call__(self, pos: np.ndarray, neg: np.ndarray, st: EmbeddingState,
                 grads: GradBuffer | None = None) -> dict:
        cfg = self.cfg
        out = {"new": margin_loss_batch(pos, neg, cfg.margin, st, self.norm, grads), "old": 0.0, "mae": 0.0}
        ent_rows = rel_rows = None
        if cfg.loss_scope == "batch":
            ent_rows = np.unique(np.concatenate([pos[:, 0], pos[:, 2], neg[:, 0], neg[:, 2]]))
            rel_rows = np.unique(pos[:, 1])
        E, R = st.entity_table, st.relation_table
        if self.regularizer is not None:
            sub = None if grads is None else _Scaled(grads, cfg.alpha)
            out["old"] = self.regularizer.loss(E, R, sub, ent_rows, rel_rows)
        if self.reconstruction is not None:
            sub = None if grads is None else _Scaled(grads, cfg.beta)
            out["mae"] = self.reconstruction.loss(E, R, sub, cfg.detach_reconstruction, ent_rows, rel_rows)
        out["total"] = out["new"] + cfg.alpha * out["old"] + cfg.beta * out["mae"]
        return out


class _Scaled:
    """GradBuffer proxy multiplying incoming dense gradients by a constant weight."""

    def __init__(self, grads: GradBuffer, weight: float):
        self._grads = grads
        self._w = weight

    def add_entity_dense(self, values, mask=None):
        self._grads.add_entity_dense(self._w * values, mask)

    def add_relation_dense(self, values, mask=None):
        self._grads.add_relation_dense(self._w * values, mask)


def total_loss(pos, neg, st: EmbeddingState, ledger: FactLedger, cfg: LkgeConfig, train_facts=None,
               grads: GradBuffer | None = None, norm: str = "l2") -> dict:
    if train_facts is None:
        train_facts = pos
    obj = LkgeObjective(cfg, train_facts, st, ledger, norm)
    return obj(as_fact_array(pos), as_fact_array(neg), st, grads)
