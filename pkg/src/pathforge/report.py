"""Comparison reports: delimited curves plus vector figures.

Consumes run records produced by the coordinator (one workspace directory
per experiment, ``rep*/run.json`` inside) and emits, per workspace group:

* ``<group>_curve.csv``: per-iteration means across repetitions with the
  across-repetition standard deviation of test accuracy,
* aggregate mutation-probability-by-depth and hyperparameter histogram CSVs,
* SVG figures: accuracy vs iteration / wall clock (mean with std band),
  cost measures vs iteration, clone-probability by depth, hyperparameter
  histograms.

CSV bytes are deterministic for identical run records; figures are rendered
with the Agg backend so reporting is headless.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter, defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import ReportError

_CURVE_COLUMNS = ("iteration", "wall_clock_s", "mean_val_acc", "mean_test_acc",
                  "std_test_acc", "mean_acc_params", "mean_flops")


def load_group(run_dir: str | Path) -> tuple[str, list[dict]]:
    """(group label, run records) for one workspace directory."""
    run_dir = Path(run_dir)
    records = []
    for rep_dir in sorted(run_dir.glob("rep*")):
        run_file = rep_dir / "run.json"
        if run_file.is_file():
            records.append(json.loads(run_file.read_text(encoding="utf-8")))
    if not records:
        raise ReportError(f"no run records under {run_dir}")
    shapes = {(len(r["iterations"]), tuple(r["tasks"])) for r in records}
    if len(shapes) != 1:
        raise ReportError(f"{run_dir}: repetitions disagree on run shape")
    return run_dir.name, records


def _sample_std(values: list[float]) -> float:
    if len(values) < 2:
        return 0.0
    mean = sum(values) / len(values)
    return math.sqrt(sum((v - mean) ** 2 for v in values) / (len(values) - 1))


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values)


def group_curve(records: list[dict]) -> list[dict]:
    """Across-repetition aggregation of one group's iteration metrics."""
    n_iter = len(records[0]["iterations"])
    rows = []
    for n in range(n_iter):
        per_rep_val, per_rep_test, per_rep_params = [], [], []
        per_rep_flops, per_rep_wall = [], []
        for rec in records:
            entry = rec["iterations"][n]
            tasks = entry["per_task"].values()
            per_rep_val.append(_mean(t["val_accuracy"] for t in tasks))
            per_rep_test.append(_mean(t["test_accuracy"] for t in tasks))
            per_rep_params.append(_mean(t["accounted_params"] for t in tasks))
            per_rep_flops.append(_mean(t["inference_flops"] for t in tasks))
            per_rep_wall.append(entry["cum_wall_s"])
        rows.append({
            "iteration": n,
            "wall_clock_s": _mean(per_rep_wall),
            "mean_val_acc": _mean(per_rep_val),
            "mean_test_acc": _mean(per_rep_test),
            "std_test_acc": _sample_std(per_rep_test),
            "mean_acc_params": _mean(per_rep_params),
            "mean_flops": _mean(per_rep_flops),
        })
    return rows


def measured_speedup(seq_record: dict, multi_record: dict) -> float:
    """Paper accounting: sequential task-set time over slowest-agent time,
    averaged across iterations."""
    seq_iters = seq_record["iterations"]
    multi_iters = multi_record["iterations"]
    if len(seq_iters) != len(multi_iters):
        raise ReportError("speedup needs runs with equal iteration counts")
    ratios = [s["task_set_wall_s"] / m["task_set_wall_s"]
              for s, m in zip(seq_iters, multi_iters)]
    return _mean(ratios)


def _clone_prob_by_depth(records: list[dict]) -> dict[int, list[float]]:
    by_depth: dict[int, list[float]] = defaultdict(list)
    for rec in records:
        for entry in rec["final"].values():
            for key, prob in entry["mutation_probs"].items():
                if key.startswith("clone:"):
                    by_depth[int(key.split(":", 1)[1])].append(prob)
    return dict(by_depth)


def _hyperparam_counts(records: list[dict]) -> dict[str, Counter]:
    counts: dict[str, Counter] = defaultdict(Counter)
    for rec in records:
        for entry in rec["final"].values():
            for field, value in entry["hyperparams"].items():
                counts[field][value] += 1
    return dict(counts)


def _write_csv(path: Path, header: tuple[str, ...], rows: list[tuple]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def emit_report(run_dirs: list[str | Path], out_dir: str | Path) -> list[Path]:
    """Write every CSV and figure for the given workspaces; returns paths."""
    if not run_dirs:
        raise ReportError("need at least one run directory")
    groups = [load_group(d) for d in run_dirs]
    labels = [label for label, _ in groups]
    if len(set(labels)) != len(labels):
        raise ReportError(f"duplicate workspace names: {labels}")

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    curves = {label: group_curve(records) for label, records in groups}
    for label in sorted(curves):
        path = out / f"{label}_curve.csv"
        _write_csv(path, _CURVE_COLUMNS, [
            tuple(row[c] for c in _CURVE_COLUMNS) for row in curves[label]
        ])
        written.append(path)

    depth_rows = []
    depth_data: dict[str, dict[int, list[float]]] = {}
    for label, records in groups:
        by_depth = _clone_prob_by_depth(records)
        depth_data[label] = by_depth
        for depth in sorted(by_depth):
            probs = by_depth[depth]
            depth_rows.append((label, depth, _mean(probs), len(probs)))
    path = out / "mutation_prob_by_depth.csv"
    _write_csv(path, ("group", "depth", "mean_clone_prob", "n_paths"),
               sorted(depth_rows))
    written.append(path)

    hist_rows = []
    hist_data: dict[str, dict[str, Counter]] = {}
    for label, records in groups:
        counts = _hyperparam_counts(records)
        hist_data[label] = counts
        for field in sorted(counts):
            for value, n in sorted(counts[field].items()):
                hist_rows.append((label, field, value, n))
    path = out / "hyperparam_hist.csv"
    _write_csv(path, ("group", "field", "value", "count"), sorted(hist_rows))
    written.append(path)

    written.extend(_emit_figures(out, curves, depth_data, hist_data))
    return written


def _emit_figures(out: Path, curves, depth_data, hist_data) -> list[Path]:
    written = []

    def save(fig, name: str) -> None:
        target = out / name
        fig.savefig(target, format="svg")
        plt.close(fig)
        written.append(target)

    for x_key, x_label, name in (
        ("iteration", "task-set iteration", "accuracy_vs_iteration.svg"),
        ("wall_clock_s", "wall-clock seconds", "accuracy_vs_wallclock.svg"),
    ):
        fig, ax = plt.subplots(figsize=(6.5, 4.0))
        for label in sorted(curves):
            rows = curves[label]
            xs = [r[x_key] + (1 if x_key == "iteration" else 0) for r in rows]
            ys = [r["mean_test_acc"] for r in rows]
            sd = [r["std_test_acc"] for r in rows]
            ax.plot(xs, ys, marker="o", label=label)
            ax.fill_between(xs, [y - s for y, s in zip(ys, sd)],
                            [y + s for y, s in zip(ys, sd)], alpha=0.2)
        ax.set_xlabel(x_label)
        ax.set_ylabel("mean test accuracy")
        ax.legend()
        ax.grid(True, alpha=0.3)
        fig.tight_layout()
        save(fig, name)

    fig, (ax_p, ax_f) = plt.subplots(1, 2, figsize=(9.0, 3.6))
    for label in sorted(curves):
        rows = curves[label]
        xs = [r["iteration"] + 1 for r in rows]
        ax_p.plot(xs, [r["mean_acc_params"] for r in rows], marker="o", label=label)
        ax_f.plot(xs, [r["mean_flops"] for r in rows], marker="o", label=label)
    ax_p.set_xlabel("task-set iteration")
    ax_p.set_ylabel("mean accounted parameters")
    ax_f.set_xlabel("task-set iteration")
    ax_f.set_ylabel("mean inference flops / sample")
    ax_p.legend()
    for ax in (ax_p, ax_f):
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    save(fig, "cost_vs_iteration.svg")

    fig, ax = plt.subplots(figsize=(6.5, 4.0))
    width = 0.8 / max(len(depth_data), 1)
    for i, label in enumerate(sorted(depth_data)):
        by_depth = depth_data[label]
        depths = sorted(by_depth)
        ax.bar([d + i * width for d in depths],
               [_mean(by_depth[d]) for d in depths],
               width=width, label=label)
    ax.set_xlabel("layer depth")
    ax.set_ylabel("mean clone probability")
    ax.legend()
    fig.tight_layout()
    save(fig, "mutation_prob_by_depth.svg")

    fields = sorted({f for counts in hist_data.values() for f in counts})
    if fields:
        fig, axes = plt.subplots(1, len(fields),
                                 figsize=(2.6 * len(fields), 3.2))
        if len(fields) == 1:
            axes = [axes]
        labels_sorted = sorted(hist_data)
        bar_w = 0.8 / len(labels_sorted)
        for ax, field in zip(axes, fields):
            values = sorted({v for lbl in labels_sorted
                             for v in hist_data[lbl].get(field, Counter())})
            for i, lbl in enumerate(labels_sorted):
                counter = hist_data[lbl].get(field, Counter())
                ax.bar([j + i * bar_w for j in range(len(values))],
                       [counter.get(v, 0) for v in values],
                       width=bar_w, label=lbl)
            ax.set_xticks([j + 0.4 - bar_w / 2 for j in range(len(values))])
            ax.set_xticklabels([str(v) for v in values], rotation=45, fontsize=7)
            ax.set_title(field, fontsize=9)
        axes[0].set_ylabel("retained paths")
        axes[-1].legend(fontsize=7)
        fig.tight_layout()
        save(fig, "hyperparam_hist.svg")
    return written
