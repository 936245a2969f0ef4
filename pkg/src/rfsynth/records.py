"""Persisted run records, sweep tables and plot files.

Everything here works from records alone, so tables and figures can be
regenerated from a results directory without rerunning anything.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .metrics import AccuracyMatrix, average_forgetting, average_incremental_accuracy, final_accuracy

RECORD_NAME = "record.json"
SCHEMA_VERSION = 1


class MixedProtocolError(ValueError):
    pass


@dataclass
class RunRecord:
    config: dict
    config_hash: str
    seed: int
    label: str
    strategy: dict
    protocol: list
    tasks: list
    counts: list  # counts[t][p] = [correct, total]
    metrics: dict
    phase_overall: list
    loss_log: list
    confusions: list
    class_columns: list
    timings: list
    schema: int = SCHEMA_VERSION

    @property
    def run_id(self) -> str:
        return f"{self.config_hash}-s{self.seed}"

    def matrix(self) -> AccuracyMatrix:
        mat = AccuracyMatrix(len(self.tasks))
        for row in self.counts:
            mat.add_phase([tuple(c) for c in row])
        return mat

    def task0_curve(self) -> list[float]:
        return [c[0][0] / c[0][1] for c in self.counts]

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        data = json.loads(text)
        names = {f.name for f in fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown record fields: {sorted(unknown)}")
        return cls(**data)


def metrics_triple(mat: AccuracyMatrix) -> dict:
    forgetting = average_forgetting(mat) if mat.num_tasks > 1 else None
    return {"avg_incremental_accuracy": average_incremental_accuracy(mat),
            "final_accuracy": final_accuracy(mat),
            "average_forgetting": forgetting}


def build_record(cfg, result) -> RunRecord:
    """``cfg`` is an ExperimentConfig, ``result`` an engine RunResult."""
    strat = cfg.strategy()
    return RunRecord(
        config=cfg.echo(),
        config_hash=cfg.hash,
        seed=cfg.seed,
        label=cfg.label,
        strategy={"name": strat.name, "generation": strat.generation,
                  "compensation": strat.compensation, "K": strat.K},
        protocol=list(cfg.protocol),
        tasks=[list(map(int, t)) for t in result.stream.tasks],
        counts=[[list(c) for c in row] for row in result.matrix.counts],
        metrics=metrics_triple(result.matrix),
        phase_overall=list(result.matrix.phase_overall),
        loss_log=result.loss_log,
        confusions=[c.tolist() for c in result.confusions],
        class_columns=list(map(int, result.class_columns)),
        timings=list(result.timings),
    )


def write_record(run_dir, record: RunRecord) -> Path:
    """Create ``record.json``; refuses to overwrite an existing record."""
    path = Path(run_dir) / RECORD_NAME
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "x", encoding="utf-8") as fh:
        fh.write(record.to_json())
    return path


def read_record(path) -> RunRecord:
    return RunRecord.from_json(Path(path).read_text(encoding="utf-8"))


def find_records(root) -> list[RunRecord]:
    out = []
    for dirpath, _, files in sorted(os.walk(root)):
        if RECORD_NAME in files:
            out.append(read_record(Path(dirpath) / RECORD_NAME))
    out.sort(key=lambda r: (r.label, r.seed, r.config_hash))
    return out


# -- tables ------------------------------------------------------------------

TABLE_HEADER = ["cell", "seed", "avg_incremental_accuracy", "final_accuracy", "average_forgetting", "run_id"]


def sweep_table(records: list[RunRecord]) -> list[list]:
    rows = []
    for r in records:
        m = r.metrics
        forget = m["average_forgetting"]
        rows.append([r.label, r.seed, f"{m['avg_incremental_accuracy']:.4f}", f"{m['final_accuracy']:.4f}",
                     "" if forget is None else f"{forget:.4f}", r.run_id])
    return rows


def write_tsv(path, header: list[str], rows: list[list]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return path


def format_table(header: list[str], rows: list[list]) -> str:
    cols = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(row[i]) for row in cols) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cols)


# -- plot data ---------------------------------------------------------------

def _column_names(records: list[RunRecord]) -> list[str]:
    labels = [r.label for r in records]
    return [lab if labels.count(lab) == 1 else f"{lab} seed={r.seed}" for lab, r in zip(labels, records)]


def emit_plot_data(records: list[RunRecord], out_dir) -> dict[str, Path]:
    """Write the three figure tables as tab-separated files.

    accuracy_per_phase.tsv   phase vs overall accuracy, one column per run
    task0_accuracy.tsv       phase vs accuracy on the first task's classes
    confusion.tsv            final-phase confusion matrices in long form
    """
    if not records:
        raise ValueError("no records to plot")
    protocols = {tuple(r.protocol) for r in records}
    if len(protocols) > 1:
        raise MixedProtocolError(f"records mix protocols {sorted(protocols)}; plot one protocol at a time")
    out_dir = Path(out_dir)
    names = _column_names(records)
    phases = len(records[0].phase_overall)
    acc_rows = [[t] + [f"{r.phase_overall[t]!r}" for r in records] for t in range(phases)]
    task0_rows = [[t] + [f"{r.task0_curve()[t]!r}" for r in records] for t in range(phases)]
    conf_rows = []
    for name, r in zip(names, records):
        final = r.confusions[-1]
        for i, row in enumerate(final):
            for j, count in enumerate(row):
                conf_rows.append([name, r.class_columns[i], r.class_columns[j], count])
    return {
        "accuracy": write_tsv(out_dir / "accuracy_per_phase.tsv", ["phase"] + names, acc_rows),
        "task0": write_tsv(out_dir / "task0_accuracy.tsv", ["phase"] + names, task0_rows),
        "confusion": write_tsv(out_dir / "confusion.tsv", ["run", "true_class", "predicted_class", "count"],
                               conf_rows),
    }


def render_figures(records: list[RunRecord], out_dir) -> list[Path]:
    """PNG versions of the plot tables (accuracy curves, task-0 curve, final confusion)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = _column_names(records)
    written = []

    for fname, title, curve in (("accuracy_per_phase.png", "Overall accuracy per phase", lambda r: r.phase_overall),
                                ("task0_accuracy.png", "Accuracy on initial classes", lambda r: r.task0_curve())):
        fig, ax = plt.subplots(figsize=(6, 4))
        for name, r in zip(names, records):
            ys = curve(r)
            ax.plot(range(len(ys)), ys, marker="o", label=name)
        ax.set_xlabel("phase")
        ax.set_ylabel("top-1 accuracy")
        ax.set_title(title)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(out_dir / fname, dpi=120)
        plt.close(fig)
        written.append(out_dir / fname)

    for name, r in zip(names, records):
        conf = np.asarray(r.confusions[-1], dtype=float)
        conf /= np.maximum(conf.sum(axis=1, keepdims=True), 1)
        fig, ax = plt.subplots(figsize=(5, 4.5))
        im = ax.imshow(conf, cmap="viridis", vmin=0, vmax=1)
        ax.set_xlabel("predicted column")
        ax.set_ylabel("true column")
        ax.set_title(name, fontsize=9)
        fig.colorbar(im, ax=ax, fraction=0.046)
        fig.tight_layout()
        safe = "".join(ch if ch.isalnum() else "_" for ch in f"{name}_{r.run_id}")
        path = out_dir / f"confusion_{safe}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def write_report(records: list[RunRecord], out_dir) -> dict[str, Path]:
    """Table, plot TSVs and PNGs for one protocol's records."""
    out_dir = Path(out_dir)
    paths = {"table": write_tsv(out_dir / "table.tsv", TABLE_HEADER, sweep_table(records))}
    paths.update(emit_plot_data(records, out_dir))
    for p in render_figures(records, out_dir):
        paths[p.stem] = p
    return paths
