"""Comparison tables and plot-data files for completed runs.

Everything here is recomputable from the persisted sample CSVs alone;
the first run in a report acts as the efficiency reference.
"""

from __future__ import annotations

import csv
import json
import os

import numpy as np

from .sampler import (
    DegenerateSampleError,
    SampleSet,
    ess,
    evidence_estimate,
    load_sample_set,
    posterior_mean_sd,
)


def run_summary(sample_set: SampleSet, name: str) -> dict:
    w = sample_set.weights()
    accepted = int((w > 0).sum())
    try:
        ess_val = ess(sample_set)
    except DegenerateSampleError:
        ess_val = 0.0
    row = {
        "run": name,
        "algorithm": sample_set.algorithm_id,
        "n_iterations": sample_set.n_iterations,
        "epsilon": sample_set.epsilon,
        "time": sample_set.total_cost,
        "accepted": accepted,
        "ess": ess_val,
        "evidence": evidence_estimate(sample_set),
    }
    p = len(sample_set.samples[0].theta) if sample_set.samples else 0
    for j in range(p):
        if accepted > 0:
            mean, sd = posterior_mean_sd(sample_set, j)
        else:
            mean, sd = float("nan"), float("nan")
        row[f"post_mean_{j}"] = mean
        row[f"post_sd_{j}"] = sd
    return row


def comparison_table(named_sets: list[tuple[str, SampleSet]]) -> list[dict]:
    """Summaries plus efficiency relative to the first run."""
    data_ids = {s.data_id for _, s in named_sets if s.data_id}
    if len(data_ids) > 1:
        raise ValueError(
            f"runs target different observed data ({sorted(data_ids)}); refusing "
            "to tabulate together"
        )
    rows = [run_summary(s, name) for name, s in named_sets]
    ref = rows[0]
    ref_rate = ref["ess"] / ref["time"] if ref["time"] > 0 else float("nan")
    for row in rows:
        rate = row["ess"] / row["time"] if row["time"] > 0 else float("nan")
        row["relative_efficiency"] = rate / ref_rate if ref_rate else float("nan")
    return rows


def write_table_csv(rows: list[dict], path: str) -> None:
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=keys)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def format_table_text(rows: list[dict]) -> str:
    keys = list(rows[0].keys())
    rendered = [
        {
            k: (f"{v:.6g}" if isinstance(v, float) else str(v))
            for k, v in row.items()
        }
        for row in rows
    ]
    widths = {k: max(len(k), *(len(r[k]) for r in rendered)) for k in keys}
    lines = ["  ".join(k.ljust(widths[k]) for k in keys)]
    for r in rendered:
        lines.append("  ".join(r[k].ljust(widths[k]) for k in keys))
    lines.append("")
    lines.append("time columns are machine-dependent outside simulated-cost mode")
    return "\n".join(lines) + "\n"


def write_curves_csv(curves: dict, path: str) -> None:
    """Aligned curve columns (decision statistic grid, gamma, alpha, t2)."""
    keys = [k for k in ("phi", "gamma", "t2", "alpha") if k in curves]
    if not keys:
        return
    n = len(curves[keys[0]])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(keys)
        for i in range(n):
            writer.writerow([format(float(curves[k][i]), ".10g") for k in keys])


def write_scatter_csv(record_phi, record_distance, path: str) -> None:
    """Estimated-vs-realised distance pairs from a pilot record."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["phi", "distance"])
        for a, b in zip(record_phi, record_distance):
            writer.writerow([format(float(a), ".10g"), format(float(b), ".10g")])


def report_runs(run_dirs: list[str], out_dir: str) -> list[dict]:
    """Tabulate persisted runs and emit table + curve files."""
    if not run_dirs:
        raise ValueError("need at least one run directory")
    named = []
    for d in run_dirs:
        named.append((os.path.basename(os.path.normpath(d)), load_sample_set(d)))
    rows = comparison_table(named)
    os.makedirs(out_dir, exist_ok=True)
    write_table_csv(rows, os.path.join(out_dir, "comparison.csv"))
    with open(os.path.join(out_dir, "comparison.txt"), "w") as fh:
        fh.write(format_table_text(rows))
    for d in run_dirs:
        tuning_path = os.path.join(d, "tuning_report.json")
        if os.path.exists(tuning_path):
            with open(tuning_path) as fh:
                payload = json.load(fh)
            if payload.get("curves"):
                name = os.path.basename(os.path.normpath(d))
                write_curves_csv(
                    payload["curves"], os.path.join(out_dir, f"curves_{name}.csv")
                )
    return rows
