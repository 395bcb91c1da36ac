"""Command-line entry point: ``lkge-bench <subcommand>``.

Log verbosity comes from the ``LKGE_LOG_LEVEL`` environment variable (default INFO).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from .builder import VARIANTS, BuilderConfig, build_from_file
from .errors import ConfigurationError, LkgeError
from .evaluation import metrics_from_ranks, snapshot_query_set, union_eval
from .experiment import ExperimentManifest, run_experiment, write_report
from .kg import GrowthDataset
from .runner import STRATEGIES, RunConfig, RunRecord, load_checkpoint, run_lifelong
from .synthetic import generate_kg, snowball_subsample, write_triples

log = logging.getLogger("lkge_bench")
EVAL_FORMAT_VERSION = 1


def _config_help() -> str:
    lines = ["config keys (YAML or JSON file) and defaults:"]
    for k, v in RunConfig().to_dict().items():
        if k == "lkge":
            for kk, vv in v.items():
                lines.append(f"  lkge.{kk}: {vv}")
        else:
            lines.append(f"  {k}: {v}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lkge-bench", description="Lifelong KG embedding benchmark.")
    sub = p.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-dataset", help="build a growing snapshot sequence from a triple file")
    b.add_argument("--input", required=True, help="tab-separated subject/relation/object file")
    b.add_argument("--variant", required=True, choices=VARIANTS)
    b.add_argument("--snapshots", type=int, default=5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--seed-facts", type=int, default=10)
    b.add_argument("--hybrid-stop-numerator", type=int, default=5)
    b.add_argument("--closure-on-quota", choices=("auto", "on", "off"), default="auto")
    b.add_argument("--out", required=True)
    b.add_argument("--force", action="store_true")

    t = sub.add_parser("train", help="run lifelong training over a dataset",
                       formatter_class=argparse.RawDescriptionHelpFormatter, epilog=_config_help())
    t.add_argument("--dataset", required=True)
    t.add_argument("--strategy", choices=STRATEGIES)
    t.add_argument("--config", help="YAML/JSON run configuration")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--force", action="store_true")

    e = sub.add_parser("eval", help="evaluate a checkpoint or summarise a run")
    e.add_argument("--checkpoint")
    e.add_argument("--dataset")
    g = e.add_mutually_exclusive_group()
    g.add_argument("--snapshot", type=int)
    g.add_argument("--union", action="store_true")
    e.add_argument("--raw", action="store_true", help="disable filtering of known-true answers")
    e.add_argument("--run", help="run directory: print its h-matrix with FWT/BWT")

    r = sub.add_parser("report", help="write CSV tables from completed runs")
    r.add_argument("--root", required=True)
    r.add_argument("--out")
    r.add_argument("--force", action="store_true")

    x = sub.add_parser("experiment", help="run a multi-seed experiment manifest")
    x.add_argument("--manifest", required=True)
    x.add_argument("--workers", type=int, default=1)
    x.add_argument("--force", action="store_true")

    s = sub.add_parser("synth-kg", help="write a synthetic translational KG as a triple file")
    s.add_argument("--out", required=True)
    s.add_argument("--entities", type=int, default=3000)
    s.add_argument("--types", type=int, default=25)
    s.add_argument("--relations", type=int, default=300)
    s.add_argument("--facts", type=int, default=30000)
    s.add_argument("--subsample", type=int, help="keep a connected sample of this many facts")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--force", action="store_true")
    return p


def _emit(obj) -> None:
    json.dump(obj, sys.stdout, indent=2)
    sys.stdout.write("\n")


def _require_dir(path) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"directory not found: {path}")
    return path


def cmd_build(args) -> int:
    out = Path(args.out)
    if (out / "meta.json").exists() and not args.force:
        log.info("%s already holds a dataset; use --force to rebuild", out)
        return 0
    if not Path(args.input).is_file():
        raise FileNotFoundError(f"input triple file not found: {args.input}")
    closure = {"auto": None, "on": True, "off": False}[args.closure_on_quota]
    cfg = BuilderConfig(args.variant, num_snapshots=args.snapshots, seed=args.seed, seed_facts=args.seed_facts,
                        hybrid_stop_numerator=args.hybrid_stop_numerator, closure_on_quota=closure)
    ds = build_from_file(args.input, cfg)
    ds.save(out)
    _emit({"format_version": EVAL_FORMAT_VERSION, "out": str(out),
           "snapshots": [{"index": s.index, "delta": s.delta_size, "entities": s.num_entities,
                          "relations": s.num_relations, "train": len(s.train), "valid": len(s.valid),
                          "test": len(s.test)} for s in ds.snapshots]})
    return 0


def load_config_file(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigurationError(f"{path}: config must be a mapping")
    return data


def cmd_train(args) -> int:
    out = Path(args.out)
    if (out / "run.json").exists() and not args.force:
        log.info("%s already holds a run; use --force to retrain", out)
        return 0
    ds = GrowthDataset.load(_require_dir(args.dataset))
    data = load_config_file(args.config) if args.config else {}
    if args.strategy:
        data["strategy"] = args.strategy
    if args.seed is not None:
        data["seed"] = args.seed
    cfg = RunConfig.from_dict(data)
    rec = run_lifelong(ds, cfg, out, dataset_label=Path(args.dataset).name)
    fwt, bwt = rec.transfer()
    _emit({"format_version": EVAL_FORMAT_VERSION, "out": str(out), "union": rec.union, "fwt": fwt, "bwt": bwt})
    return 0


def cmd_eval(args) -> int:
    if args.run:
        rec = RunRecord.load(Path(_require_dir(args.run)) / "run.json")
        fwt, bwt = rec.transfer()
        _emit({"format_version": EVAL_FORMAT_VERSION, "h": rec.h.to_list(), "fwt": fwt, "bwt": bwt,
               "union": rec.union})
        return 0
    if not (args.checkpoint and args.dataset):
        raise ConfigurationError("eval needs --checkpoint and --dataset (or --run)")
    if not Path(args.checkpoint).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    ds = GrowthDataset.load(_require_dir(args.dataset))
    st, _, header = load_checkpoint(args.checkpoint)
    norm = header.get("norm", "l2")
    upto = header.get("snapshot", ds.num_snapshots)
    if args.snapshot is not None:
        snap = ds.snapshot(args.snapshot)
        if snap.num_entities > st.num_entities or snap.num_relations > st.num_relations:
            raise ConfigurationError(f"checkpoint covers {st.num_entities} entities / {st.num_relations} "
                                     f"relations; snapshot {args.snapshot} needs {snap.num_entities} / "
                                     f"{snap.num_relations}")
        metrics = metrics_from_ranks(snapshot_query_set(ds, args.snapshot, raw=args.raw).ranks(st, norm))
    else:
        metrics = union_eval(st, ds, upto=upto, raw=args.raw, norm=norm)
    _emit({"format_version": EVAL_FORMAT_VERSION, **metrics})
    return 0


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else Path(args.root)
    if (out / "table2.csv").exists() and not args.force:
        log.info("%s already holds a report; use --force to rewrite", out)
        return 0
    paths = write_report(_require_dir(args.root), out)
    _emit({"format_version": EVAL_FORMAT_VERSION, "tables": [str(p) for p in paths]})
    return 0


def cmd_experiment(args) -> int:
    if not Path(args.manifest).is_file():
        raise FileNotFoundError(f"manifest not found: {args.manifest}")
    manifest = ExperimentManifest.load(args.manifest)
    result = run_experiment(manifest, force=args.force, workers=args.workers)
    _emit(result)
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and not args.force:
        log.info("%s exists; use --force to overwrite", out)
        return 0
    facts = generate_kg(num_entities=args.entities, num_types=args.types, num_relations=args.relations, num_facts=args.facts,
                        seed=args.seed)
    if args.subsample:
        facts = snowball_subsample(facts, args.subsample, seed=args.seed)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_triples(out, facts)
    _emit({"format_version": EVAL_FORMAT_VERSION, "out": str(out), "facts": int(len(facts))})
    return 0


COMMANDS = {
    "build-dataset": cmd_build,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
    "experiment": cmd_experiment,
    "synth-kg": cmd_synth,
}


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("LKGE_LOG_LEVEL", "INFO").upper(),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ConfigurationError as exc:
        print(f"lkge-bench {args.command}: configuration error: {exc}", file=sys.stderr)
        return 2
    except (LkgeError, OSError, ValueError, IndexError) as exc:
        print(f"lkge-bench {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
