"""Multi-seed experiments, seed aggregation and CSV report tables."""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .builder import BuilderConfig, build_from_file
from .errors import AggregationError, ConfigurationError
from .kg import GrowthDataset
from .runner import RunConfig, RunRecord, run_lifelong

log = logging.getLogger(__name__)

REPORT_FORMAT_VERSION = 1
METRICS = ("mrr", "hits1", "hits3", "hits10")
TABLE_HEADERS = {"mrr": "MRR", "hits1": "H@1", "hits3": "H@3", "hits10": "H@10"}


@dataclass
class RunSpec:
    name: str
    strategy: str
    config: dict


@dataclass
class ExperimentManifest:
    """``dataset`` is a dataset directory, or a dict of build-dataset options to build one first."""

    dataset: str | dict
    runs: list[RunSpec]
    seeds: list[int]
    output_root: Path

    def __post_init__(self):
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError("experiment seeds must be distinct")
        if not self.seeds:
            raise ConfigurationError("experiment needs at least one seed")
        names = [r.name for r in self.runs]
        if len(set(names)) != len(names):
            raise ConfigurationError("run names must be distinct")

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        path = Path(path)
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        try:
            runs = [RunSpec(r.get("name", r["strategy"]), r["strategy"], r.get("config", {})) for r in data["runs"]]
            root = Path(data["output_root"])
            if not root.is_absolute():
                root = path.parent / root
            dataset = data["dataset"]
            if isinstance(dataset, str) and not Path(dataset).is_absolute():
                dataset = str(path.parent / dataset)
            return cls(dataset, runs, [int(s) for s in data["seeds"]], root)
        except KeyError as exc:
            raise ConfigurationError(f"manifest {path} is missing key {exc}") from None


def _prepare_dataset(manifest: ExperimentManifest, force: bool) -> Path:
    if isinstance(manifest.dataset, str):
        return Path(manifest.dataset)
    opts = dict(manifest.dataset)
    source = Path(opts.pop("input"))
    out = manifest.output_root / "dataset"
    if (out / "meta.json").exists() and not force:
        return out
    cfg = BuilderConfig(**opts)
    build_from_file(source, cfg).save(out)
    return out


def _run_one(dataset_dir: str, config: dict, out_dir: str) -> str:
    ds = GrowthDataset.load(dataset_dir)
    run_lifelong(ds, RunConfig.from_dict(config), out_dir, dataset_label=Path(dataset_dir).name)
    return out_dir


def run_experiment(manifest: ExperimentManifest, force: bool = False, workers: int = 1) -> dict:
    dataset_dir = _prepare_dataset(manifest, force)
    GrowthDataset.load(dataset_dir)  # fail fast on a broken dataset
    manifest.output_root.mkdir(parents=True, exist_ok=True)
    jobs = []
    for spec in manifest.runs:
        for seed in manifest.seeds:
            out = manifest.output_root / spec.name / f"seed{seed}"
            if (out / "run.json").exists() and not force:
                log.info("skipping existing run %s", out)
                continue
            cfg = RunConfig.from_dict({**spec.config, "strategy": spec.strategy, "seed": seed})
            jobs.append((str(dataset_dir), cfg.to_dict(), str(out)))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            list(pool.map(_run_one, *zip(*jobs)))
    else:
        for job in jobs:
            _run_one(*job)

    means = {spec.name: aggregate_seeds(sorted((manifest.output_root / spec.name).glob("seed*")))
             for spec in manifest.runs}
    out = {"format_version": REPORT_FORMAT_VERSION, "seeds": manifest.seeds, "runs": means}
    with open(manifest.output_root / "means.json", "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2)
        fh.write("\n")
    return out


def _comparable(config: dict) -> dict:
    return {k: v for k, v in config.items() if k != "seed"}


def _summary(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "n": 0}
    arr = np.asarray(vals, dtype=float)
    std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
    return {"mean": float(arr.mean()), "std": std, "n": len(arr)}


def aggregate_seeds(run_dirs) -> dict:
    """Mean and sample standard deviation of each metric across seeds of one configuration."""
    records = [RunRecord.load(Path(d) / "run.json") for d in run_dirs]
    if not records:
        raise AggregationError("no completed runs to aggregate")
    ref = _comparable(records[0].config)
    for d, rec in zip(run_dirs, records):
        if _comparable(rec.config) != ref:
            diff = sorted(k for k in set(ref) | set(rec.config)
                          if k != "seed" and ref.get(k) != rec.config.get(k))
            raise AggregationError(f"run {d} differs from {run_dirs[0]} in {diff}; refusing to aggregate")
    out = {"strategy": records[0].strategy, "seeds": [r.seed for r in records], "dataset": records[0].dataset}
    for m in METRICS:
        out[m] = _summary([r.union[m] for r in records])
    transfers = [r.transfer() for r in records]
    out["fwt"] = _summary([t[0] for t in transfers])
    out["bwt"] = _summary([t[1] for t in transfers])
    out["total_time"] = _summary([sum(r.times) for r in records])
    n = len(records[0].times)
    out["cumulative_time"] = [_summary([r.cumulative_times[k] for r in records])["mean"] for k in range(n)]
    return out


def _group_runs(root: Path) -> dict:
    groups: dict[tuple[str, str], list[Path]] = {}
    for path in sorted(root.rglob("run.json")):
        run_dir = path.parent
        rec = RunRecord.load(path)
        name = run_dir.parent.name if run_dir.name.startswith("seed") else rec.strategy
        groups.setdefault((rec.dataset or "dataset", name), []).append(run_dir)
    return groups


def write_report(root, out_dir=None) -> list[Path]:
    """Write table2.csv (union metrics), transfer.csv (FWT/BWT) and time.csv under ``out_dir``."""
    root = Path(root)
    out_dir = Path(out_dir) if out_dir else root
    out_dir.mkdir(parents=True, exist_ok=True)
    groups = _group_runs(root)
    if not groups:
        raise AggregationError(f"no run.json files found under {root}")
    agg = {key: aggregate_seeds(dirs) for key, dirs in groups.items()}
    datasets = sorted({d for d, _ in agg})
    names = sorted({n for _, n in agg})

    def cell(key, metric):
        entry = agg.get(key)
        if entry is None or entry[metric]["mean"] is None:
            return ""
        return f"{entry[metric]['mean']:.4f}"

    paths = []
    path = out_dir / "table2.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model"] + [f"{d}:{TABLE_HEADERS[m]}" for d in datasets for m in METRICS])
        for name in names:
            w.writerow([name] + [cell((d, name), m) for d in datasets for m in METRICS])
    paths.append(path)

    path = out_dir / "transfer.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["model"] + [f"{d}:{m.upper()}" for d in datasets for m in ("fwt", "bwt")])
        for name in names:
            w.writerow([name] + [cell((d, name), m) for d in datasets for m in ("fwt", "bwt")])
    paths.append(path)

    path = out_dir / "time.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        n = max(len(a["cumulative_time"]) for a in agg.values())
        w.writerow(["dataset", "model"] + [f"snapshot{k}" for k in range(1, n + 1)])
        for (d, name), entry in sorted(agg.items()):
            w.writerow([d, name] + [f"{t:.3f}" for t in entry["cumulative_time"]])
    paths.append(path)
    return paths
