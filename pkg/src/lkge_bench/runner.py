"""Lifelong training over a snapshot sequence under one of four strategies."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError
from .evaluation import QuerySet, TransferMatrix, fwt_bwt, metrics_from_ranks, snapshot_query_set
from .kg import GrowthDataset, as_fact_array
from .lkge import FactLedger, LkgeConfig, LkgeObjective, transfer_init
from .transe import EmbeddingState, GradBuffer, SparseAdam, corrupt_batch, random_rows

log = logging.getLogger(__name__)

STRATEGIES = ("snapshot_only", "retrain", "finetune", "lkge")
RUN_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1
_BASELINE = LkgeConfig(use_autoencoder=False, use_transfer=False, use_regularization=False)


@dataclass
class RunConfig:
    strategy: str = "lkge"
    lr: float = 1e-3
    batch_size: int = 1024
    dim: int = 100
    patience: int = 3
    max_epochs: int = 200
    eval_every: int = 1
    seed: int = 0
    margin: float = 1.0
    norm: str = "l2"
    neg_ratio: int = 1
    normalize_entities: bool = False
    dtype: str = "float64"
    raw: bool = False
    val_candidate_cap: int | None = None
    eval_future: bool = True
    lkge: LkgeConfig = field(default_factory=LkgeConfig)

    def __post_init__(self):
        if isinstance(self.lkge, dict):
            self.lkge = LkgeConfig(**self.lkge)
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        for name in ("patience", "batch_size", "dim", "max_epochs", "eval_every", "neg_ratio"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.lr <= 0 or self.margin <= 0:
            raise ConfigurationError("lr and margin must be positive")
        if self.norm not in ("l1", "l2"):
            raise ConfigurationError("norm must be 'l1' or 'l2'")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError("dtype must be 'float32' or 'float64'")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        data = dict(data)
        if "lkge" in data:
            lk_known = {f.name for f in fields(LkgeConfig)}
            bad = set(data["lkge"]) - lk_known
            if bad:
                raise ConfigurationError(f"unknown lkge config keys: {sorted(bad)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)

    def objective_config(self) -> LkgeConfig:
        base = self.lkge if self.strategy == "lkge" else _BASELINE
        return replace(base, margin=self.margin)


@dataclass
class SnapshotLog:
    index: int
    epochs: int
    best_epoch: int
    best_valid_mrr: float | None
    train_time: float
    trained: bool


@dataclass
class RunRecord:
    config: dict
    h: TransferMatrix
    snapshots: list[SnapshotLog] = field(default_factory=list)
    union_by_snapshot: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)
    dataset: str | None = None

    @property
    def strategy(self) -> str:
        return self.config["strategy"]

    @property
    def seed(self) -> int:
        return self.config["seed"]

    @property
    def times(self) -> list[float]:
        return [s.train_time for s in self.snapshots]

    @property
    def cumulative_times(self) -> list[float]:
        return np.cumsum(self.times).tolist()

    @property
    def union(self) -> dict:
        return self.union_by_snapshot[-1] if self.union_by_snapshot else metrics_from_ranks([])

    def transfer(self) -> tuple[float | None, float | None]:
        return fwt_bwt(self.h)

    def to_json(self) -> dict:
        fwt, bwt = self.transfer()
        return {
            "format_version": RUN_FORMAT_VERSION,
            "strategy": self.strategy,
            "seed": self.seed,
            "dataset": self.dataset,
            "config": self.config,
            "h": self.h.to_list(),
            "fwt": fwt,
            "bwt": bwt,
            "union": self.union,
            "union_by_snapshot": self.union_by_snapshot,
            "snapshots": [asdict(s) for s in self.snapshots],
            "cumulative_time": self.cumulative_times,
            "checkpoints": self.checkpoints,
        }

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "RunRecord":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        return cls(
            config=data["config"],
            h=TransferMatrix.from_list(data["h"]),
            snapshots=[SnapshotLog(**s) for s in data["snapshots"]],
            union_by_snapshot=data["union_by_snapshot"],
            checkpoints=data["checkpoints"],
            dataset=data.get("dataset"),
        )


# ---- checkpoints ---------------------------------------------------------------------


def save_checkpoint(path, st: EmbeddingState, ledger: FactLedger | None, meta: dict) -> None:
    arrays = {
        "entity_table": st.entity_table,
        "relation_table": st.relation_table,
        "prev_entity_table": st.prev_entity_table,
        "prev_relation_table": st.prev_relation_table,
    }
    if ledger is not None:
        arrays.update(ledger.arrays())
    header = {"format_version": CHECKPOINT_FORMAT_VERSION, "dim": st.dim,
              "entity_shape": list(st.entity_table.shape), "relation_shape": list(st.relation_table.shape), **meta}
    with open(path, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), **arrays)


def load_checkpoint(path):
    """Returns (EmbeddingState, FactLedger or None, header dict)."""
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version {header.get('format_version')}")
        st = EmbeddingState(data["entity_table"], data["relation_table"],
                            data["prev_entity_table"], data["prev_relation_table"])
        ledger = FactLedger.from_arrays(data) if "ledger_prev_entity" in data.files else None
    return st, ledger, header


# ---- training ------------------------------------------------------------------------


class EarlyStopper:
    """Stops after ``patience`` consecutive evaluations without strict improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_step = 0
        self.bad = 0
        self.steps = 0

    def update(self, value: float) -> tuple[bool, bool]:
        """Record one evaluation; returns (improved, should_stop)."""
        self.steps += 1
        if value > self.best:
            self.best, self.best_step, self.bad = value, self.steps, 0
            return True, False
        self.bad += 1
        return False, self.bad >= self.patience


class _Validator:
    def __init__(self, query_sets: list[QuerySet], norm: str):
        self.query_sets = [q for q in query_sets if len(q)]
        self.norm = norm

    def __bool__(self):
        return bool(self.query_sets)

    def __call__(self, st: EmbeddingState) -> float:
        ranks = np.concatenate([q.ranks(st, self.norm) for q in self.query_sets])
        return float(np.mean(1.0 / ranks))


def _validation_sets(ds: GrowthDataset, i: int, cfg: RunConfig) -> list[QuerySet]:
    idx = range(1, i + 1) if cfg.strategy == "retrain" else [i]
    sets = []
    for j in idx:
        snap = ds.snapshot(j)
        filt = None if cfg.raw else ds.facts_upto(j)
        cands = None
        if cfg.val_candidate_cap and snap.num_entities > cfg.val_candidate_cap:
            sub = np.random.Generator(np.random.PCG64([cfg.seed, j, 7])).choice(
                snap.num_entities, cfg.val_candidate_cap, replace=False)
            cands = np.union1d(sub, snap.valid[:, [0, 2]].ravel())
        sets.append(QuerySet(snap.valid, snap.num_entities, filt, candidate_ids=cands))
    return sets


def train_snapshot(st: EmbeddingState, train: np.ndarray, objective: LkgeObjective, validator: _Validator,
                   cfg: RunConfig, rng: np.random.Generator, tag: str = "") -> tuple[int, int, float | None]:
    """Minibatch Adam with early stopping on validation MRR; restores the best tables.

    Returns (epochs run, best epoch, best validation MRR).
    """
    opt = SparseAdam(st.num_entities, st.num_relations, st.dim, lr=cfg.lr, dtype=st.entity_table.dtype)
    stopper = EarlyStopper(cfg.patience)
    best = (st.entity_table.copy(), st.relation_table.copy())
    best_epoch = 0
    epoch = 0
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        t0 = time.perf_counter()
        sums = {"new": 0.0, "old": 0.0, "mae": 0.0}
        perm = rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            pos = train[perm[lo:lo + cfg.batch_size]]
            if cfg.neg_ratio > 1:
                pos = np.repeat(pos, cfg.neg_ratio, axis=0)
            neg = corrupt_batch(pos, st.num_entities, rng)
            grads = GradBuffer(st.num_entities, st.num_relations, st.dim, st.entity_table.dtype)
            parts = objective(pos, neg, st, grads)
            for k in sums:
                sums[k] += parts[k]
            rows = grads.rows()
            opt.step(rows, st)
            if cfg.normalize_entities and len(rows.entity_rows):
                vecs = st.entity_table[rows.entity_rows]
                st.entity_table[rows.entity_rows] = vecs / np.maximum(np.linalg.norm(vecs, axis=1, keepdims=True), 1e-12)
        if epoch % cfg.eval_every and epoch != cfg.max_epochs:
            continue
        if not validator:
            best, best_epoch = (st.entity_table.copy(), st.relation_table.copy()), epoch
            continue
        mrr = validator(st)
        improved, stop = stopper.update(mrr)
        log.info("%s epoch %d loss_new %.4f loss_old %.4f loss_mae %.4f valid_mrr %.4f time %.2fs",
                 tag, epoch, sums["new"], sums["old"], sums["mae"], mrr, time.perf_counter() - t0)
        if improved:
            best, best_epoch = (st.entity_table.copy(), st.relation_table.copy()), epoch
        if stop:
            break
    st.entity_table, st.relation_table = best
    best_mrr = None if stopper.best == -np.inf else float(stopper.best)
    return epoch, best_epoch, best_mrr


def _extend_for(st: EmbeddingState, num_entities: int, num_relations: int, rng: np.random.Generator,
                transfer_facts=None) -> None:
    """Append rows for unseen items: random draws, overwritten by transfer vectors where eligible."""
    new_e = num_entities - st.num_entities
    new_r = num_relations - st.num_relations
    rand_e = random_rows(rng, new_e, st.dim, st.entity_table.dtype)
    rand_r = random_rows(rng, new_r, st.dim, st.entity_table.dtype)
    if transfer_facts is not None and (new_e or new_r):
        ent, ent_ok, rel, rel_ok = transfer_init(transfer_facts, st.entity_table, st.relation_table,
                                                 num_entities, num_relations)
        rand_e[ent_ok] = ent[ent_ok]
        rand_r[rel_ok] = rel[rel_ok]
    st.extend(rand_e, rand_r)


def _uses_transfer(cfg: RunConfig) -> bool:
    return cfg.strategy == "lkge" and cfg.lkge.use_transfer


def evaluate_future(st: EmbeddingState, ds: GrowthDataset, i: int, cfg: RunConfig,
                    query_set: QuerySet | None = None) -> tuple[float | None, np.ndarray]:
    """MRR of the snapshot-``i`` model on the next test set, without training.

    Unseen items get transfer vectors (lkge) or random rows drawn from a stream seeded by
    (run seed, i), so the main training trajectory is unaffected.
    """
    nxt = ds.snapshot(i + 1)
    probe = EmbeddingState(st.entity_table.copy(), st.relation_table.copy())
    rng = np.random.Generator(np.random.PCG64([cfg.seed, i]))
    _extend_for(probe, nxt.num_entities, nxt.num_relations, rng,
                nxt.train if _uses_transfer(cfg) else None)
    qs = query_set or snapshot_query_set(ds, i + 1, raw=cfg.raw)
    ranks = qs.ranks(probe, cfg.norm)
    return metrics_from_ranks(ranks)["mrr"], ranks


def run_lifelong(ds: GrowthDataset, cfg: RunConfig, out_dir=None, dataset_label: str | None = None) -> RunRecord:
    ds.validate()
    if ds.num_snapshots < 1:
        raise ConfigurationError("dataset has no snapshots")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dtype = np.dtype(cfg.dtype)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    obj_cfg = cfg.objective_config()
    n = ds.num_snapshots
    record = RunRecord(config=cfg.to_dict(), h=TransferMatrix(n), dataset=dataset_label)
    tests = {j: snapshot_query_set(ds, j, raw=cfg.raw) for j in range(1, n + 1)}
    ledger = FactLedger()
    st: EmbeddingState | None = None

    for i in range(1, n + 1):
        snap = ds.snapshot(i)
        t0 = time.perf_counter()
        if st is None or cfg.strategy in ("snapshot_only", "retrain"):
            st = EmbeddingState.random(snap.num_entities, snap.num_relations, cfg.dim, rng, dtype)
        else:
            st.freeze()
            _extend_for(st, snap.num_entities, snap.num_relations, rng,
                        snap.train if _uses_transfer(cfg) else None)
        ledger.advance(snap.train, snap.num_entities, snap.num_relations)
        train = ds.facts_upto(i, ("train",)) if cfg.strategy == "retrain" else as_fact_array(snap.train)

        trained = not (cfg.strategy == "lkge" and not cfg.lkge.use_finetune and i > 1)
        epochs = best_epoch = 0
        best_mrr = None
        if trained:
            objective = LkgeObjective(obj_cfg, train, st, ledger, cfg.norm)
            validator = _Validator(_validation_sets(ds, i, cfg), cfg.norm)
            epochs, best_epoch, best_mrr = train_snapshot(st, train, objective, validator, cfg, rng,
                                                          tag=f"[{cfg.strategy} s{i}]")
        elapsed = time.perf_counter() - t0
        record.snapshots.append(SnapshotLog(i, epochs, best_epoch, best_mrr, elapsed, trained))
        log.info("[%s] snapshot %d done: %d epochs (best %d), %.2fs", cfg.strategy, i, epochs, best_epoch, elapsed)

        if out is not None:
            name = f"snapshot{i}.ckpt"
            save_checkpoint(out / name, st, ledger, {"strategy": cfg.strategy, "snapshot": i, "norm": cfg.norm,
                                                      "seed": cfg.seed})
            record.checkpoints.append(name)

        ranks_i = []
        for j in range(1, i + 1):
            ranks = tests[j].ranks(st, cfg.norm)
            ranks_i.append(ranks)
            record.h[i, j] = metrics_from_ranks(ranks)["mrr"]
        record.union_by_snapshot.append(metrics_from_ranks(np.concatenate(ranks_i)))
        if cfg.eval_future and i < n:
            record.h[i, i + 1], _ = evaluate_future(st, ds, i, cfg, tests[i + 1])

    if out is not None:
        record.save(out / "run.json")
    return record
