"""Command-line experiment runner.

    rfsynth run --config exp.cfg --out results [--seed N]
    rfsynth sweep --config grid.cfg --out results [--jobs N]
    rfsynth report --in results
    rfsynth selftest
    rfsynth init-config PATH
    rfsynth export-data --config exp.cfg --out DIR
    rfsynth inspect FILE

Exit codes: 0 success, 2 invalid config, 3 non-finite loss abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from .config import DEFAULT_CONFIG, ConfigError, ExperimentConfig, expand_grid, load_config
from .engine import NonFiniteLossError, run_incremental
from .gaussmem import STATS_MAGIC, load_stats, save_stats
from .model import CHECKPOINT_MAGIC, load_checkpoint, save_checkpoint
from .records import (
    RECORD_NAME,
    TABLE_HEADER,
    RunRecord,
    build_record,
    emit_plot_data,
    find_records,
    format_table,
    read_record,
    sweep_table,
    write_record,
    write_report,
    write_tsv,
)
from .selftest import run_selftest
from .synthdata import DATASET_MAGIC, load_dataset, save_dataset

log = logging.getLogger("rfsynth")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_NONFINITE = 0, 1, 2, 3


@dataclass
class RunOutcome:
    run_dir: Path
    record: Optional[RunRecord] = None
    diagnostic: Optional[Path] = None
    resumed: bool = False

    @property
    def exit_code(self) -> int:
        return EXIT_OK if self.record is not None else EXIT_NONFINITE


def run_dir_for(cfg: ExperimentConfig, out_root) -> Path:
    return Path(out_root) / f"{cfg.hash}-s{cfg.seed}"


def execute_run(cfg: ExperimentConfig, out_root) -> RunOutcome:
    """Run one config into ``<out>/<hash>-s<seed>/``; an existing record is reused."""
    run_dir = run_dir_for(cfg, out_root)
    if (run_dir / RECORD_NAME).exists():
        return RunOutcome(run_dir, read_record(run_dir / RECORD_NAME), resumed=True)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(cfg.canonical_text(include_seed=True), encoding="utf-8")
    train, test = cfg.dataset()
    try:
        result = run_incremental(train, test, cfg.stream(), cfg.train_config(), **cfg.model_kwargs())
    except NonFiniteLossError as exc:
        diag = run_dir / "diagnostic.json"
        diag.write_text(json.dumps({"task": exc.task, "epoch": exc.epoch, "step": exc.step,
                                    "losses": exc.breakdown.as_dict(), "config_hash": cfg.hash,
                                    "seed": cfg.seed}, indent=1, sort_keys=True), encoding="utf-8")
        return RunOutcome(run_dir, diagnostic=diag)
    record = build_record(cfg, result)
    meta = {"config_hash": cfg.hash, "seed": cfg.seed, "class_columns": record.class_columns}
    save_checkpoint(run_dir / "model.ckpt", result.model, meta)
    save_stats(run_dir / "class_stats.bin", result.store, cfg.hash)
    emit_plot_data([record], run_dir)
    write_record(run_dir, record)  # written last: its presence marks a finished run
    return RunOutcome(run_dir, record)


def _cell_worker(echo: dict, out_root: str) -> RunOutcome:
    return execute_run(ExperimentConfig.from_raw(echo, env={}), out_root)


def execute_sweep(cells: list[ExperimentConfig], out_root, jobs: int = 1) -> list[RunOutcome]:
    if jobs <= 1 or len(cells) == 1:
        return [execute_run(c, out_root) for c in cells]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(_cell_worker, c.echo(), str(out_root)) for c in cells]
        return [f.result() for f in futures]


def _summary(rec: RunRecord) -> str:
    m = rec.metrics
    forget = "n/a" if m["average_forgetting"] is None else f"{m['average_forgetting']:.4f}"
    return (f"{rec.label} seed={rec.seed}: avg incremental {m['avg_incremental_accuracy']:.4f}  "
            f"final {m['final_accuracy']:.4f}  forgetting {forget}")


# -- subcommands ---------------------------------------------------------------

def cmd_run(args) -> int:
    cfg, _ = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.replace(**{"run.seed": str(args.seed)})
    outcome = execute_run(cfg, args.out)
    if outcome.record is None:
        print(f"non-finite loss; diagnostic written to {outcome.diagnostic}", file=sys.stderr)
        return EXIT_NONFINITE
    print(("reused " if outcome.resumed else "") + _summary(outcome.record))
    print(f"run directory: {outcome.run_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base, axes = load_config(args.config)
    cells = expand_grid(base, axes)
    log.info("sweep of %d cells with %d job(s)", len(cells), args.jobs)
    outcomes = execute_sweep(cells, args.out, args.jobs)
    records = [o.record for o in outcomes if o.record is not None]
    rows = sweep_table(records)
    table = write_tsv(Path(args.out) / f"sweep_{base.hash}.tsv", TABLE_HEADER, rows)
    print(format_table(TABLE_HEADER, rows))
    print(f"table: {table}")
    failed = [o for o in outcomes if o.record is None]
    for o in failed:
        print(f"non-finite loss; diagnostic written to {o.diagnostic}", file=sys.stderr)
    return EXIT_NONFINITE if failed else EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.input)
    records = find_records(root)
    if not records:
        print(f"no {RECORD_NAME} files under {root}", file=sys.stderr)
        return EXIT_FAIL
    groups: dict[tuple, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(tuple(r.protocol), []).append(r)
    for proto, recs in sorted(groups.items()):
        dest = root / "report" if len(groups) == 1 else root / "report" / "B{}-C{}-T{}".format(*proto)
        paths = write_report(recs, dest)
        print("protocol B={} C={} T={}".format(*proto))
        print(format_table(TABLE_HEADER, sweep_table(recs)))
        print(f"wrote {len(paths)} files to {dest}")
    return EXIT_OK


def cmd_selftest(args) -> int:
    return EXIT_OK if run_selftest() else EXIT_FAIL


def cmd_init_config(args) -> int:
    path = Path(args.path)
    if path.exists() and not args.force:
        print(f"{path} exists; pass --force to overwrite", file=sys.stderr)
        return EXIT_FAIL
    path.write_text(DEFAULT_CONFIG, encoding="utf-8")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_export_data(args) -> int:
    cfg, _ = load_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = cfg.dataset()
    save_dataset(out / "train.rfsd", train)
    save_dataset(out / "test.rfsd", test)
    print(f"wrote {len(train)} train and {len(test)} test images to {out}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    path = Path(args.file)
    head = path.read_bytes()[:8]
    if head == CHECKPOINT_MAGIC:
        arrays, meta = load_checkpoint(path)
        print(f"checkpoint: {len(arrays)} arrays, metadata {json.dumps(meta, sort_keys=True)}")
        for name, arr in arrays.items():
            print(f"  {name} {tuple(arr.shape)}")
    elif head == STATS_MAGIC:
        store, tag = load_stats(path)
        print(f"class statistics: {len(store)} classes, feature dim {store.feature_dim}, config {tag or '-'}")
        for cid in store.classes():
            s = store[cid]
            print(f"  class {cid}: N={s.sample_count} task={s.learned_at_task} lambda={s.lam:.3g}")
    elif head[:4] == DATASET_MAGIC:
        data = load_dataset(path)
        print(f"dataset: {len(data)} images of {data.side}x{data.side}, "
              f"{len(set(data.labels.tolist()))} classes")
    else:
        print(f"{path}: unrecognised file format", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rfsynth", description="Non-exemplar class-incremental experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-task progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and evaluate one configuration")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="run every cell of the config's sweep.* grid")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_sweep)

    rep = sub.add_parser("report", help="rebuild tables and figures from saved records")
    rep.add_argument("--in", dest="input", required=True)
    rep.set_defaults(func=cmd_report)

    st = sub.add_parser("selftest", help="run the built-in invariant checks")
    st.set_defaults(func=cmd_selftest)

    ic = sub.add_parser("init-config", help="write the default benchmark config")
    ic.add_argument("path")
    ic.add_argument("--force", action="store_true")
    ic.set_defaults(func=cmd_init_config)

    ex = sub.add_parser("export-data", help="write the config's dataset as binary files")
    ex.add_argument("--config", required=True)
    ex.add_argument("--out", required=True)
    ex.set_defaults(func=cmd_export_data)

    ins = sub.add_parser("inspect", help="summarise a checkpoint, stats or dataset file")
    ins.add_argument("file")
    ins.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"invalid config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return EXIT_CONFIG if getattr(args, "config", None) else EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
